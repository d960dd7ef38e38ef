"""
Granularity-aware distillation of multi-level region features into one
Gaussian feature field.

A shared pointwise MLP decodes each rendered feature into a unit
language-space feature f_clip and a 3-way granularity factor eta
(sub-part, part, whole). The loss weights the three target features by
softmax(eta), normalizes by region area so every object contributes
equally, and pulls features inside each fused region together.

Gradients are computed by hand: the decoder backprop is plain numpy and
the render backward is W^T @ G with the cached per-view blend matrix.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .config import HIDDEN_DIM, LEVELS, TrainConfig, save_json
from .errors import DataError, MissingInputError, NumericError, ShapeMismatchError, UnsetMinDepthError
from .field import Camera, GaussianField
from .oracle import GranularityFeatures, GranularityMasks
from .splat import RenderOutput, rasterize
from .tensorio import read_tensor, write_tensor

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12
LAYER_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


def granularity_weights(eta: np.ndarray) -> np.ndarray:
    """softmax over the last axis, max-subtracted."""
    eta = np.asarray(eta, dtype=np.float64)
    z = eta - eta.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_weights(eta: np.ndarray) -> np.ndarray:
    z = eta - eta.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class Decoder:
    """
    MLP d -> h -> h -> (C + 3) with ReLU between hidden layers.

    The first C outputs are L2-normalized into f_clip, the last 3 are eta.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: int = HIDDEN_DIM, seed: int = 0):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.hidden = hidden
        rng = np.random.default_rng([int(seed), 2])
        sizes = [(in_dim, hidden), (hidden, hidden), (hidden, out_dim + 3)]
        self.params: Dict[str, np.ndarray] = {}
        for k, (fan_in, fan_out) in enumerate(sizes, start=1):
            bound = 1.0 / np.sqrt(fan_in)
            self.params[f"W{k}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.params[f"b{k}"] = rng.uniform(-bound, bound, size=fan_out)

    def forward(self, x: np.ndarray):
        """
        Args:
            x: (P, d) rendered features

        Returns:
            f_clip (P, C) unit rows, eta (P, 3), cache for backward
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatchError(f"decoder expects (P, {self.in_dim}) input, got {x.shape}")
        p = self.params
        z1 = x @ p["W1"] + p["b1"]
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ p["W2"] + p["b2"]
        h2 = np.maximum(z2, 0.0)
        out = h2 @ p["W3"] + p["b3"]
        raw = out[:, :self.out_dim]
        norm = np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), NORM_EPS)
        f_clip = raw / norm
        eta = out[:, self.out_dim:]
        cache = (x, z1, h1, z2, h2, f_clip, norm)
        return f_clip, eta, cache

    def __call__(self, x: np.ndarray):
        f_clip, eta, _ = self.forward(x)
        return f_clip, eta

    def backward(self, cache, grad_f_clip: np.ndarray, grad_eta: np.ndarray):
        """Return (parameter gradients, dL/dx)."""
        x, z1, h1, z2, h2, f_clip, norm = cache
        p = self.params
        g = np.asarray(grad_f_clip, dtype=np.float64)
        g_raw = (g - f_clip * np.sum(f_clip * g, axis=1, keepdims=True)) / norm
        g_out = np.concatenate([g_raw, np.asarray(grad_eta, dtype=np.float64)], axis=1)
        grads = {"W3": h2.T @ g_out, "b3": g_out.sum(axis=0)}
        g_h2 = g_out @ p["W3"].T
        g_z2 = g_h2 * (z2 > 0)
        grads["W2"] = h1.T @ g_z2
        grads["b2"] = g_z2.sum(axis=0)
        g_h1 = g_z2 @ p["W2"].T
        g_z1 = g_h1 * (z1 > 0)
        grads["W1"] = x.T @ g_z1
        grads["b1"] = g_z1.sum(axis=0)
        return grads, g_z1 @ p["W1"].T

    def save(self, directory) -> List[Path]:
        """TensorFile per layer plus decoder.json with the layer sizes."""
        directory = Path(directory)
        paths = []
        for name in LAYER_NAMES:
            path = directory / f"decoder_{name}.tensor"
            write_tensor(path, self.params[name].astype(np.float32))
            paths.append(path)
        manifest = directory / "decoder.json"
        save_json({"in_dim": self.in_dim, "hidden": self.hidden, "out_dim": self.out_dim,
                   "layers": [self.in_dim, self.hidden, self.hidden, self.out_dim + 3]}, manifest)
        return paths + [manifest]

    @classmethod
    def load(cls, directory) -> "Decoder":
        directory = Path(directory)
        manifest = directory / "decoder.json"
        if not manifest.exists():
            raise MissingInputError(f"decoder manifest not found: {manifest}")
        with open(manifest, "r", encoding="utf-8") as f:
            meta = json.load(f)
        decoder = cls(meta["in_dim"], meta["out_dim"], meta["hidden"])
        for name in LAYER_NAMES:
            value = read_tensor(directory / f"decoder_{name}.tensor").astype(np.float64)
            if value.shape != decoder.params[name].shape:
                raise ShapeMismatchError(f"decoder_{name}: shape {value.shape}, expected {decoder.params[name].shape}")
            decoder.params[name] = value
        return decoder


class Adam:
    """Adam over a dict of arrays, updated in place."""

    def __init__(self, params: Dict[str, np.ndarray], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            self.params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def decode(decoder: Decoder, feature_map: np.ndarray, covered: Optional[np.ndarray] = None):
    """
    Decode a rendered (H, W, d) map pointwise.

    Returns:
        f_clip (H, W, C), eta (H, W, 3), zero on uncovered pixels, and the
        covered mask
    """
    h, w, d = feature_map.shape
    if covered is None:
        covered = np.ones((h, w), dtype=bool)
    f_clip = np.zeros((h, w, decoder.out_dim))
    eta = np.zeros((h, w, 3))
    if np.any(covered):
        f, e = decoder(feature_map[covered])
        f_clip[covered] = f
        eta[covered] = e
    return f_clip, eta, covered


def distill_loss(f_clip: np.ndarray, targets: np.ndarray, alpha: np.ndarray,
                 present: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Per-pixel sum_n alpha_n ||f_clip - f_n||^2.

    Args:
        f_clip: (P, C)
        targets: (P, 3, C) target features at (s, p, w)
        alpha: (P, 3)
        present: (P, 3) bool; missing levels are skipped and alpha is
            renormalized over the rest. Pixels with no level give 0.
    """
    f_clip = np.asarray(f_clip, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    d2 = np.sum((f_clip[:, None, :] - targets) ** 2, axis=2)
    if present is None:
        return np.sum(alpha * d2, axis=1)
    weighted = alpha * present
    total = weighted.sum(axis=1)
    safe = np.where(total > 0, total, 1.0)
    return np.where(total > 0, np.sum(weighted * d2, axis=1) / safe, 0.0)


def entropy_loss(alpha: np.ndarray) -> np.ndarray:
    """Per-pixel -sum alpha log alpha, with 0 log 0 = 0."""
    alpha = np.asarray(alpha, dtype=np.float64)
    safe = np.where(alpha > 0, alpha, 1.0)
    return -np.sum(np.where(alpha > 0, alpha * np.log(safe), 0.0), axis=-1)


@dataclass
class FusedMask:
    """
    index: (H, W) region index into the tables, -1 where excluded.
    region_level / region_id: the (level, id) key of every fused region.
    """

    index: np.ndarray
    region_level: np.ndarray
    region_id: np.ndarray
    sizes: np.ndarray

    @property
    def n_regions(self) -> int:
        return len(self.sizes)

    @property
    def covered(self) -> np.ndarray:
        return self.index >= 0

    @property
    def level_map(self) -> np.ndarray:
        out = np.full(self.index.shape, -1, dtype=np.int64)
        out[self.covered] = self.region_level[self.index[self.covered]]
        return out


def _as_maps(masks) -> np.ndarray:
    return masks.maps if isinstance(masks, GranularityMasks) else np.asarray(masks)


def fuse_masks(masks, alpha: np.ndarray, valid: Optional[np.ndarray] = None) -> FusedMask:
    """
    Per pixel pick the level with the highest alpha (ties go to the coarser
    level) and key the pixel by (level, region id). A pixel unassigned at its
    pick falls back to the next level by alpha; unassigned everywhere, it is
    excluded.

    Args:
        masks: GranularityMasks or (3, H, W) region ids
        alpha: (H, W, 3) granularity weights
        valid: optional (H, W) bool restricting the pixels considered
    """
    maps = _as_maps(masks)
    _, h, w = maps.shape
    if alpha.shape != (h, w, 3):
        raise ShapeMismatchError(f"alpha map has shape {alpha.shape}, masks are {(h, w)}")
    # stable sort on reversed levels puts the coarser level first on ties
    order = 2 - np.argsort(-alpha[..., ::-1], axis=-1, kind="stable")
    chosen = np.full((h, w), -1, dtype=np.int64)
    ids = np.zeros((h, w), dtype=np.int64)
    for rank in range(3):
        level = order[..., rank]
        region = np.take_along_axis(maps.transpose(1, 2, 0), level[..., None], axis=-1)[..., 0]
        take = (chosen < 0) & (region > 0)
        chosen[take] = level[take]
        ids[take] = region[take]
    if valid is not None:
        chosen[~valid] = -1
    keep = chosen >= 0
    keys = chosen[keep] * (int(maps.max(initial=0)) + 1) + ids[keep]
    uniq, inverse, sizes = np.unique(keys, return_inverse=True, return_counts=True)
    index = np.full((h, w), -1, dtype=np.int64)
    index[keep] = inverse.reshape(-1)
    base = int(maps.max(initial=0)) + 1
    return FusedMask(index=index, region_level=uniq // base, region_id=uniq % base, sizes=sizes)


def single_level_mask(masks, level: int, valid: Optional[np.ndarray] = None) -> FusedMask:
    """FusedMask that uses one level's regions everywhere."""
    maps = _as_maps(masks)
    alpha = np.zeros(maps.shape[1:] + (3,))
    alpha[..., level] = 1.0
    only = np.zeros_like(maps)
    only[level] = maps[level]
    return fuse_masks(only, alpha, valid)


def region_factor(fused: FusedMask) -> np.ndarray:
    """
    (H, W) map of beta = sum_i S(R_i) / (n_r * S(R)) with R the pixel's own
    region; 0 on excluded pixels.
    """
    beta = np.zeros(fused.index.shape)
    if fused.n_regions == 0:
        return beta
    per_region = fused.sizes.sum() / (fused.n_regions * fused.sizes)
    beta[fused.covered] = per_region[fused.index[fused.covered]]
    return beta


def consistency_loss(f_clip: np.ndarray, fused: FusedMask, with_grad: bool = False):
    """
    sum_i sum_{p in R_i} ||f_p - mean(R_i)||^2 / S(R_i).

    Args:
        f_clip: (H, W, C) decoded features
        fused: regions
        with_grad: also return dL/df_clip as an (H, W, C) map
    """
    covered = fused.covered
    if fused.n_regions == 0:
        return (0.0, np.zeros_like(f_clip)) if with_grad else 0.0
    idx = fused.index[covered]
    f = f_clip[covered]
    sums = np.zeros((fused.n_regions, f.shape[1]))
    np.add.at(sums, idx, f)
    means = sums / fused.sizes[:, None]
    dev = f - means[idx]
    loss = float(np.sum(np.sum(dev * dev, axis=1) / fused.sizes[idx]))
    if not with_grad:
        return loss
    grad = np.zeros_like(f_clip, dtype=np.float64)
    grad[covered] = 2.0 * dev / fused.sizes[idx][:, None]
    return loss, grad


@dataclass
class ViewTargets:
    masks: GranularityMasks
    features: GranularityFeatures

    def gather(self, flat_index: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Target features (P, 3, C) and presence (P, 3) at flattened pixels."""
        ids = self.masks.maps.reshape(3, -1)[:, flat_index]
        t = np.stack([self.features.tables[k][ids[k]] for k in range(3)], axis=1)
        return t, (ids > 0).T


@dataclass
class LossResult:
    total: float
    terms: Dict[str, float]
    grad_feature_map: np.ndarray
    decoder_grads: Dict[str, np.ndarray]
    alpha: np.ndarray   # (H, W, 3), zero outside the loss pixels
    pixels: np.ndarray  # (H, W) bool pixels in the loss
    fused: Optional[FusedMask] = None


def _softmax_backward(alpha: np.ndarray, grad_alpha: np.ndarray) -> np.ndarray:
    return alpha * (grad_alpha - np.sum(alpha * grad_alpha, axis=1, keepdims=True))


def active_terms(config: TrainConfig) -> Dict[str, bool]:
    """Which parts of total_loss are switched on for config.distill_mode."""
    mode = config.distill_mode
    return {
        "distill": True,
        "region_weighting": mode != "average" and config.region_weighting,
        "entropy": mode == "gad" and config.lambda_entropy > 0,
        "consistency": mode != "average" and config.lambda_cons > 0,
    }


def total_loss(
    feature_map: np.ndarray,
    decoder: Decoder,
    targets: ViewTargets,
    config: TrainConfig,
    covered: Optional[np.ndarray] = None,
) -> LossResult:
    """
    L = mean_p beta_p * l_distill(p) + lambda_e * mean_p H(alpha_p)
        + lambda_c * l_cons / n_r

    The fused mask is rebuilt from the current alpha and treated as a
    constant. distill_mode single_x fits level x alone on its own regions;
    average fits the renormalized mean of the present levels with neither
    region weighting nor the consistency term. Only gad keeps the entropy
    term.

    Raises:
        DataError: no pixel is both covered and assigned at a usable level
    """
    h, w, d = feature_map.shape
    if targets.masks.shape != (h, w):
        raise ShapeMismatchError(f"masks are {targets.masks.shape}, render is {(h, w)}")
    if covered is None:
        covered = np.ones((h, w), dtype=bool)
    mode = config.distill_mode
    maps = targets.masks.maps
    if mode.startswith("single_"):
        level = LEVELS.index(mode[-1])
        usable = covered & (maps[level] > 0)
    else:
        level = None
        usable = covered & np.any(maps > 0, axis=0)
    if not np.any(usable):
        raise DataError("no covered pixel has a target feature")

    flat = np.flatnonzero(usable)
    n_pix = len(flat)
    x = feature_map.reshape(-1, d)[flat]
    f, eta, cache = decoder.forward(x)
    alpha = granularity_weights(eta)
    t, present = targets.gather(flat)
    alpha_map = np.zeros((h, w, 3))
    alpha_map[usable] = alpha

    grad_f = np.zeros_like(f)
    grad_eta = np.zeros_like(eta)
    terms = {"distill": 0.0, "entropy": 0.0, "consistency": 0.0}
    fused = None

    if mode == "average":
        mean = (t * present[..., None]).sum(axis=1) / present.sum(axis=1, keepdims=True)
        target = mean / np.maximum(np.linalg.norm(mean, axis=1, keepdims=True), NORM_EPS)
        diff = f - target
        terms["distill"] = float(np.mean(np.sum(diff * diff, axis=1)))
        grad_f += 2.0 * diff / n_pix
    else:
        if level is not None:
            fused = single_level_mask(maps, level, usable)
            weights = np.zeros_like(alpha)
            weights[:, level] = 1.0
        else:
            fused = fuse_masks(maps, alpha_map, usable)
            weights = alpha
        beta = region_factor(fused).reshape(-1)[flat] if config.region_weighting else np.ones(n_pix)

        d2 = np.sum((f[:, None, :] - t) ** 2, axis=2)
        wm = weights * present
        s = wm.sum(axis=1, keepdims=True)
        a_tilde = wm / s
        per_pixel = np.sum(a_tilde * d2, axis=1)
        terms["distill"] = float(np.mean(beta * per_pixel))
        scale = beta / n_pix
        grad_f += scale[:, None] * 2.0 * np.einsum("pk,pkc->pc", a_tilde, f[:, None, :] - t)

        if level is None:
            g_tilde = scale[:, None] * d2
            g_alpha = present / s * (g_tilde - np.sum(a_tilde * g_tilde, axis=1, keepdims=True))
            grad_eta += _softmax_backward(alpha, g_alpha)

            log_alpha = _log_weights(eta)
            ent = -np.sum(alpha * log_alpha, axis=1)
            terms["entropy"] = float(np.mean(ent))
            grad_eta += config.lambda_entropy / n_pix * (-alpha * (log_alpha + ent[:, None]))

        if fused.n_regions:
            f_map = np.zeros((h, w, f.shape[1]))
            f_map[usable] = f
            cons, g_cons = consistency_loss(f_map, fused, with_grad=True)
            terms["consistency"] = cons / fused.n_regions
            grad_f += config.lambda_cons / fused.n_regions * g_cons[usable]

    total = terms["distill"] + config.lambda_entropy * terms["entropy"] + config.lambda_cons * terms["consistency"]
    decoder_grads, grad_x = decoder.backward(cache, grad_f, grad_eta)
    grad_map = np.zeros((h * w, d))
    grad_map[flat] = grad_x
    return LossResult(
        total=float(total),
        terms=terms,
        grad_feature_map=grad_map.reshape(h, w, d),
        decoder_grads=decoder_grads,
        alpha=alpha_map,
        pixels=usable,
        fused=fused,
    )


@dataclass
class TrainResult:
    field: GaussianField
    decoder: Decoder
    log: List[dict]


def _dump_nan(run_dir, record: dict, features: np.ndarray, decoder: Decoder) -> Optional[str]:
    if run_dir is None:
        return None
    path = Path(run_dir) / "nan_dump.json"
    dump = dict(record)
    dump["feature_norm"] = float(np.linalg.norm(np.nan_to_num(features)))
    dump["decoder_norms"] = {k: float(np.linalg.norm(np.nan_to_num(v))) for k, v in decoder.params.items()}
    save_json(dump, path)
    return str(path)


def _check_targets(cameras: Sequence[Camera], targets: Sequence[ViewTargets], out_dim: Optional[int]):
    if len(targets) != len(cameras):
        raise ShapeMismatchError(f"{len(targets)} target sets for {len(cameras)} views")
    dims = {t.features.dim for t in targets}
    if len(dims) != 1:
        raise ShapeMismatchError(f"target feature widths differ across views: {sorted(dims)}")
    for k, (camera, target) in enumerate(zip(cameras, targets)):
        if target.masks.shape != (camera.height, camera.width):
            raise ShapeMismatchError(f"view {k}: masks {target.masks.shape} vs image {(camera.height, camera.width)}")
    dim = dims.pop()
    if out_dim is not None and out_dim != dim:
        raise ShapeMismatchError(f"decoder outputs {out_dim} dims, target features have {dim}")
    return dim


def train(
    field_: GaussianField,
    cameras: Sequence[Camera],
    targets: Sequence[ViewTargets],
    config: TrainConfig,
    decoder: Optional[Decoder] = None,
    outputs: Optional[Sequence[RenderOutput]] = None,
    run_dir=None,
    log_path=None,
    threads: int = 1,
    progress: bool = False,
) -> TrainResult:
    """
    Optimize the field's features and the decoder with Adam.

    Each iteration samples views_per_iteration views, renders through the
    cached blend matrix, decodes, evaluates total_loss and steps both
    optimizers.

    Args:
        field_: Field whose geometry stays frozen
        cameras: Training views
        targets: Target masks and features per view
        config: Loss weights, rates, mode and iteration count
        decoder: Decoder to continue from; a fresh one is built when omitted
        outputs: Cached renders of the views (built when omitted)
        run_dir: Where nan_dump.json goes on failure
        log_path: JSON-lines training log
        threads: Render threads for the initial pass

    Returns:
        TrainResult with the trained field, decoder and per-iteration log

    Raises:
        UnsetMinDepthError: gas_on without min_depth on the field
        NumericError: NaN or infinite loss
    """
    config.validate()
    if config.gas_on and not field_.has_min_depth():
        raise UnsetMinDepthError("gas_on requires min_depth; run compute_min_depth first")
    if config.feature_dim is not None and config.feature_dim != field_.feature_dim:
        raise ShapeMismatchError(f"train.feature_dim is {config.feature_dim}, field has {field_.feature_dim}")
    out_dim = _check_targets(cameras, targets, decoder.out_dim if decoder else None)
    seed = 0 if config.seed is None else int(config.seed)
    if decoder is None:
        decoder = Decoder(field_.feature_dim, out_dim, config.hidden_dim, seed)
    if config.iterations == 0:
        return TrainResult(field_, decoder, [])

    if outputs is None:
        outputs = [rasterize(field_, cam, threads=threads) for cam in cameras]
    rng = np.random.default_rng([seed, 3])
    features = field_.features.astype(np.float64).copy()
    feature_opt = Adam({"features": features}, config.lr_features, config.beta1, config.beta2, config.eps)
    decoder_opt = Adam(decoder.params, config.lr_decoder, config.beta1, config.beta2, config.eps)

    log: List[dict] = []
    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "w", encoding="utf-8")
    try:
        for it in tqdm(range(config.iterations), desc="distill", disable=not progress):
            views = rng.choice(len(cameras), size=min(config.views_per_iteration, len(cameras)), replace=False)
            grad_features = np.zeros_like(features)
            grad_decoder = {k: np.zeros_like(v) for k, v in decoder.params.items()}
            record = {"iteration": it, "view": [int(v) for v in views]}
            sums = {"total": 0.0, "distill": 0.0, "entropy": 0.0, "consistency": 0.0}
            alpha_sum = np.zeros(3)
            for v in views:
                out = outputs[v]
                h, w = out.shape
                feature_map = out.blend(features)
                result = total_loss(feature_map, decoder, targets[v], config, out.covered)
                sums["total"] += result.total
                for name, value in result.terms.items():
                    sums[name] += value
                alpha_sum += result.alpha[result.pixels].mean(axis=0)
                grad_features += out.blend_weights.T @ result.grad_feature_map.reshape(h * w, -1)
                for k, g in result.decoder_grads.items():
                    grad_decoder[k] += g
            n = len(views)
            record.update({name: value / n for name, value in sums.items()})
            record.update({f"alpha_{name}": float(a / n) for name, a in zip(LEVELS, alpha_sum)})
            if not np.isfinite(record["total"]):
                dump = _dump_nan(run_dir, record, features, decoder)
                raise NumericError(f"loss became {record['total']} at iteration {it}", dump)
            feature_opt.step({"features": grad_features / n})
            decoder_opt.step({k: g / n for k, g in grad_decoder.items()})
            log.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
    finally:
        if log_file is not None:
            log_file.close()

    if log:
        logger.info("distill: loss %.4f -> %.4f over %d iterations (alpha s/p/w %.2f/%.2f/%.2f)",
                    log[0]["total"], log[-1]["total"], len(log),
                    log[-1]["alpha_s"], log[-1]["alpha_p"], log[-1]["alpha_w"])
    return TrainResult(field_.with_features(features), decoder, log)


def granularity_stats(
    field_: GaussianField,
    decoder: Decoder,
    cameras: Sequence[Camera],
    object_masks: Sequence[np.ndarray],
    outputs: Optional[Sequence[RenderOutput]] = None,
) -> Dict[str, float]:
    """Mean alpha per level over object pixels of all views."""
    total = np.zeros(3)
    count = 0
    for k, camera in enumerate(cameras):
        out = outputs[k] if outputs is not None else rasterize(field_, camera)
        pixels = out.covered & object_masks[k]
        if not np.any(pixels):
            continue
        feature_map = out.blend(field_.features)
        _, eta = decoder(feature_map[pixels])
        total += granularity_weights(eta).sum(axis=0)
        count += int(pixels.sum())
    if count == 0:
        raise DataError("no object pixels in any view")
    return {f"alpha_{name}": float(v / count) for name, v in zip(LEVELS, total)}
