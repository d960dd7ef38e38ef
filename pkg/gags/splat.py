"""
Feature/depth rasterization of a Gaussian field by front-to-back alpha
blending, the feature backward pass, and minimum-visible-depth bookkeeping.

Pixel (u, v) samples the image-plane point (u, v). A splat contributes to a
pixel only inside its 3-sigma pixel rectangle, so the per-pixel result does
not depend on how the image is tiled.

The forward pass records every non-zero blend weight alpha_i * T_i in a
sparse (pixels x Gaussians) matrix. Geometry is frozen, so the rendered
feature map is linear in the features: f_render = W @ F and dL/dF = W^T @ G.
"""

import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .config import (
    ALPHA_MAX,
    DOMINANT_SENTINEL,
    LOW_PASS,
    SIGMA_EXTENT,
    T_MIN,
    TILE_SIZE,
    VISIBILITY_THRESHOLD,
)
from .errors import EmptyFieldError, MissingInputError, ShapeMismatchError, UnsetMinDepthError
from .field import Camera, GaussianField
from .tensorio import write_pgm16, write_tensor

logger = logging.getLogger(__name__)

# frustum guard for the projection Jacobian, as in the reference 3DGS rasterizer
JACOBIAN_GUARD = 1.3


@dataclass
class Projected2D:
    """Screen-space splats, sorted ascending by depth (ties by position, opacity, scale)."""

    means2d: np.ndarray       # (M, 2) pixels
    cov2d: np.ndarray         # (M, 2, 2) pixels^2, low-pass dilated
    conics: np.ndarray        # (M, 3) upper triangle of cov2d^-1
    depths: np.ndarray        # (M,) camera-space z
    radii: np.ndarray         # (M,) integer pixel radius of the 3-sigma box
    opacities: np.ndarray     # (M,)
    source_index: np.ndarray  # (M,) index into the field

    def __len__(self) -> int:
        return len(self.depths)


@dataclass
class RenderOutput:
    feature_map: np.ndarray          # (H, W, d)
    depth_map: np.ndarray            # (H, W), 0 where invalid
    depth_valid: np.ndarray          # (H, W) bool
    final_transmittance: np.ndarray  # (H, W)
    dominant_index: np.ndarray       # (H, W) uint32, DOMINANT_SENTINEL where nothing blends
    blend_count: np.ndarray          # (H, W)
    blend_weights: sp.csr_matrix     # (H*W, N) alpha_i * T_i

    @property
    def shape(self):
        return self.depth_map.shape

    @property
    def covered(self) -> np.ndarray:
        return self.blend_count > 0

    def blend(self, values: np.ndarray) -> np.ndarray:
        """Alpha-blend arbitrary per-Gaussian values (N, k) into an (H, W, k) map."""
        values = np.asarray(values, dtype=np.float64)
        h, w = self.shape
        return np.asarray(self.blend_weights @ values.reshape(len(values), -1)).reshape(h, w, -1)

    def with_features(self, features: np.ndarray) -> "RenderOutput":
        """Same view re-blended with new per-Gaussian features; geometry is reused."""
        return dataclasses.replace(self, feature_map=self.blend(features))


@dataclass
class MinDepthMap:
    md: np.ndarray     # (H, W)
    valid: np.ndarray  # (H, W) bool


def project(field: GaussianField, camera: Camera) -> Projected2D:
    """
    Perspective-project every Gaussian, propagating its covariance through
    the projection Jacobian (EWA), with a LOW_PASS px^2 dilation.

    Splats outside (near, far) or whose 3-sigma rectangle misses the
    viewport are culled.
    """
    n = len(field)
    idx = np.arange(n)
    p_cam = camera.to_camera(field.positions)
    z = p_cam[:, 2]
    keep = (z > camera.near) & (z < camera.far)
    idx, p_cam, z = idx[keep], p_cam[keep], z[keep]

    u = camera.fx * p_cam[:, 0] / z + camera.cx
    v = camera.fy * p_cam[:, 1] / z + camera.cy

    lim_x = JACOBIAN_GUARD * 0.5 * camera.width / camera.fx
    lim_y = JACOBIAN_GUARD * 0.5 * camera.height / camera.fy
    tx = np.clip(p_cam[:, 0] / z, -lim_x, lim_x) * z
    ty = np.clip(p_cam[:, 1] / z, -lim_y, lim_y) * z

    m = len(idx)
    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = camera.fx / z
    J[:, 0, 2] = -camera.fx * tx / (z * z)
    J[:, 1, 1] = camera.fy / z
    J[:, 1, 2] = -camera.fy * ty / (z * z)
    T = J @ camera.rotation
    sigma = field.covariances()[idx]
    cov2d = T @ sigma @ np.transpose(T, (0, 2, 1))
    cov2d[:, 0, 0] += LOW_PASS
    cov2d[:, 1, 1] += LOW_PASS

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    ok = det > 0
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radii = np.ceil(SIGMA_EXTENT * np.sqrt(np.maximum(lam_max, 0.0))).astype(np.int64)
    on_screen = (
        (u + radii >= 0) & (u - radii <= camera.width - 1)
        & (v + radii >= 0) & (v - radii <= camera.height - 1)
    )
    keep = ok & on_screen
    safe_det = np.where(ok, det, 1.0)
    conics = np.stack([c / safe_det, -b / safe_det, a / safe_det], axis=1)

    # equal depths fall back to position, opacity and scale so array order never matters
    src = idx[keep]
    pos, scl, opa = field.positions[src], field.scales[src], field.opacities[src]
    order = np.lexsort((src, scl[:, 2], scl[:, 1], scl[:, 0], opa, pos[:, 2], pos[:, 1], pos[:, 0], z[keep]))
    sel = np.flatnonzero(keep)[order]
    return Projected2D(
        means2d=np.stack([u, v], axis=1)[sel],
        cov2d=cov2d[sel],
        conics=conics[sel],
        depths=z[sel],
        radii=radii[sel],
        opacities=field.opacities[idx[sel]],
        source_index=idx[sel],
    )


def _tile_bins(splats: Projected2D, tiles_x: int, tiles_y: int) -> List[np.ndarray]:
    """Per-tile arrays of splat ranks (depth order) whose 3-sigma box touches the tile."""
    if len(splats) == 0:
        return [np.zeros(0, dtype=np.int64) for _ in range(tiles_x * tiles_y)]
    u, v = splats.means2d[:, 0], splats.means2d[:, 1]
    r = splats.radii
    x0 = np.clip(np.floor((u - r) / TILE_SIZE), 0, tiles_x - 1).astype(np.int64)
    x1 = np.clip(np.floor((u + r) / TILE_SIZE), 0, tiles_x - 1).astype(np.int64)
    y0 = np.clip(np.floor((v - r) / TILE_SIZE), 0, tiles_y - 1).astype(np.int64)
    y1 = np.clip(np.floor((v + r) / TILE_SIZE), 0, tiles_y - 1).astype(np.int64)
    nx, ny = x1 - x0 + 1, y1 - y0 + 1
    counts = nx * ny
    rank = np.repeat(np.arange(len(splats)), counts)
    # position of each (splat, tile) pair inside its splat's rectangle
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = np.repeat(x0, counts) + local % np.repeat(nx, counts)
    ty = np.repeat(y0, counts) + local // np.repeat(nx, counts)
    tile = ty * tiles_x + tx
    order = np.lexsort((rank, tile))
    tile, rank = tile[order], rank[order]
    bounds = np.searchsorted(tile, np.arange(tiles_x * tiles_y + 1))
    return [rank[bounds[t]:bounds[t + 1]] for t in range(tiles_x * tiles_y)]


def _blend_tile(splats: Projected2D, ranks: np.ndarray, x0: int, y0: int, width: int, height: int):
    """
    Blend weights for one tile.

    Returns:
        (pixel flat indices, source indices, weights, final transmittance,
         pixel flat indices of the whole tile)
    """
    xs = np.arange(x0, min(x0 + TILE_SIZE, width))
    ys = np.arange(y0, min(y0 + TILE_SIZE, height))
    px, py = np.meshgrid(xs, ys)
    px, py = px.ravel().astype(np.float64), py.ravel().astype(np.float64)
    pixels = (py.astype(np.int64) * width + px.astype(np.int64))
    if len(ranks) == 0:
        empty = np.zeros(0)
        return pixels[:0], empty.astype(np.int64), empty, np.ones(len(pixels)), pixels

    mu = splats.means2d[ranks]
    con = splats.conics[ranks]
    r = splats.radii[ranks][:, None]
    dx = px[None, :] - mu[:, 0:1]
    dy = py[None, :] - mu[:, 1:2]
    power = -0.5 * (con[:, 0:1] * dx * dx + con[:, 2:3] * dy * dy) - con[:, 1:2] * dx * dy
    alpha = np.minimum(ALPHA_MAX, splats.opacities[ranks][:, None] * np.exp(np.minimum(power, 0.0)))
    alpha = np.where((np.abs(dx) <= r) & (np.abs(dy) <= r), alpha, 0.0)

    one_minus = 1.0 - alpha
    T = np.cumprod(np.vstack([np.ones((1, alpha.shape[1])), one_minus[:-1]]), axis=0)
    included = T >= T_MIN
    weights = alpha * T * included
    final_t = np.prod(np.where(included, one_minus, 1.0), axis=0)

    k, p = np.nonzero(weights)
    return pixels[p], splats.source_index[ranks][k], weights[k, p], final_t, pixels


def rasterize(field: GaussianField, camera: Camera, threads: int = 1, allow_empty: bool = False) -> RenderOutput:
    """
    Render the feature map, expected depth, transmittance and dominant
    contributor of one view.

    Args:
        field: Gaussian field
        camera: Viewpoint
        threads: Worker threads over tiles; results do not depend on it
        allow_empty: Render an empty field as background instead of raising

    Raises:
        EmptyFieldError: empty field without allow_empty
    """
    if len(field) == 0 and not allow_empty:
        raise EmptyFieldError("cannot render an empty field")
    h, w = camera.height, camera.width
    n = len(field)
    splats = project(field, camera)
    tiles_x, tiles_y = math.ceil(w / TILE_SIZE), math.ceil(h / TILE_SIZE)
    bins = _tile_bins(splats, tiles_x, tiles_y)
    jobs = [(bins[t], (t % tiles_x) * TILE_SIZE, (t // tiles_x) * TILE_SIZE) for t in range(len(bins))]

    def work(job):
        ranks, x0, y0 = job
        return _blend_tile(splats, ranks, x0, y0, w, h)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(job) for job in jobs]

    transmittance = np.ones(h * w)
    rows, cols, vals = [], [], []
    for pix, src, wts, final_t, tile_pixels in results:
        transmittance[tile_pixels] = final_t
        rows.append(pix)
        cols.append(src)
        vals.append(wts)
    rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    vals = np.concatenate(vals) if vals else np.zeros(0)
    weights = sp.csr_matrix((vals, (rows, cols)), shape=(h * w, n))
    weights.sort_indices()

    count = np.diff(weights.indptr)
    dominant = np.full(h * w, DOMINANT_SENTINEL, dtype=np.uint32)
    has = count > 0
    if np.any(has):
        # argmax per row; ties go to the front-most splat
        depth_of = camera.to_camera(field.positions)[:, 2]
        for_row = np.repeat(np.arange(h * w), count)
        key = np.lexsort((depth_of[weights.indices], -weights.data, for_row))
        first = np.searchsorted(for_row[key], np.flatnonzero(has))
        dominant[has] = weights.indices[key[first]].astype(np.uint32)

    depth_acc = weights @ camera.to_camera(field.positions)[:, 2] if n else np.zeros(h * w)
    coverage = 1.0 - transmittance
    valid = has & (coverage > 0)
    depth = np.where(valid, depth_acc / np.where(valid, coverage, 1.0), 0.0)
    features = weights @ field.features if n else np.zeros((h * w, field.feature_dim))

    return RenderOutput(
        feature_map=np.asarray(features).reshape(h, w, field.feature_dim),
        depth_map=depth.reshape(h, w),
        depth_valid=valid.reshape(h, w),
        final_transmittance=transmittance.reshape(h, w),
        dominant_index=dominant.reshape(h, w),
        blend_count=count.reshape(h, w),
        blend_weights=weights,
    )


def render(field: GaussianField, camera: Camera, threads: int = 1, allow_empty: bool = False) -> RenderOutput:
    """f_render(p) = sum_i f_i alpha_i T_i, plus depth/transmittance/dominant maps."""
    return rasterize(field, camera, threads=threads, allow_empty=allow_empty)


def render_backward(
    field: GaussianField,
    camera: Camera,
    grad_feature_map: np.ndarray,
    output: Optional[RenderOutput] = None,
    threads: int = 1,
) -> np.ndarray:
    """
    dL/df_i = sum_p alpha_i(p) T_i(p) grad(p).

    Args:
        field: Field used for the forward pass
        camera: Camera used for the forward pass
        grad_feature_map: (H, W, d) upstream gradient
        output: Forward result to reuse; re-rendered when omitted

    Returns:
        (N, d) per-Gaussian feature gradients, zero for Gaussians never blended
    """
    expected = (camera.height, camera.width, field.feature_dim)
    grad = np.asarray(grad_feature_map, dtype=np.float64)
    if grad.shape != expected:
        raise ShapeMismatchError(f"gradient map has shape {grad.shape}, expected {expected}")
    if output is None:
        output = rasterize(field, camera, threads=threads)
    return np.asarray(output.blend_weights.T @ grad.reshape(-1, field.feature_dim))


def compute_min_depth(
    field: GaussianField,
    cameras: Sequence[Camera],
    visibility_threshold: float = VISIBILITY_THRESHOLD,
    threads: int = 1,
    outputs: Optional[Sequence[RenderOutput]] = None,
) -> int:
    """
    Fill field.min_depth with each Gaussian's minimum camera depth over the
    views where it is visible (max blend weight >= visibility_threshold).

    Gaussians visible nowhere fall back to their minimum depth over views
    where they project at all.

    Returns:
        Number of Gaussians that needed the fallback
    """
    if not cameras:
        raise MissingInputError("compute_min_depth needs at least one camera")
    n = len(field)
    visible_min = np.full(n, np.inf)
    projected_min = np.full(n, np.inf)
    for k, camera in enumerate(cameras):
        out = outputs[k] if outputs is not None else rasterize(field, camera, threads=threads)
        z = camera.to_camera(field.positions)[:, 2]
        max_w = out.blend_weights.max(axis=0).toarray().ravel() if n else np.zeros(0)
        visible = max_w >= visibility_threshold
        visible_min = np.where(visible, np.minimum(visible_min, z), visible_min)
        in_view = np.zeros(n, dtype=bool)
        in_view[project(field, camera).source_index] = True
        projected_min = np.where(in_view, np.minimum(projected_min, z), projected_min)

    fallback = ~np.isfinite(visible_min)
    md = np.where(fallback, projected_min, visible_min)
    md[~np.isfinite(md)] = np.nan
    field.min_depth = md
    n_fallback = int(fallback.sum())
    if n_fallback:
        logger.warning("%d of %d Gaussians are not visible in any view; using their unoccluded minimum depth",
                       n_fallback, n)
    return n_fallback


def min_depth_map(output: RenderOutput, field: GaussianField) -> MinDepthMap:
    """
    md(p) = MD_g of the pixel's dominant contributor, capped by this view's
    depth D(p); invalid where nothing blends.
    """
    dom = output.dominant_index
    valid = (dom != DOMINANT_SENTINEL) & output.depth_valid
    md = np.zeros(dom.shape)
    referenced = dom[valid].astype(np.int64)
    values = field.min_depth[referenced]
    if np.any(np.isnan(values)):
        raise UnsetMinDepthError("min_depth is unset for Gaussians referenced by this view; run compute_min_depth")
    md[valid] = np.minimum(values, output.depth_map[valid])
    return MinDepthMap(md=md, valid=valid)


def export_render(output: RenderOutput, camera: Camera, directory, stem: str) -> List[Path]:
    """Write feature/depth/transmittance/dominant TensorFiles and 16-bit PGM previews."""
    directory = Path(directory)
    paths = {
        "features": directory / f"{stem}_features.tensor",
        "depth": directory / f"{stem}_depth.tensor",
        "transmittance": directory / f"{stem}_transmittance.tensor",
        "dominant": directory / f"{stem}_dominant.tensor",
        "depth_pgm": directory / f"{stem}_depth.pgm",
        "transmittance_pgm": directory / f"{stem}_transmittance.pgm",
    }
    write_tensor(paths["features"], output.feature_map.astype(np.float32))
    write_tensor(paths["depth"], output.depth_map.astype(np.float32))
    write_tensor(paths["transmittance"], output.final_transmittance.astype(np.float32))
    write_tensor(paths["dominant"], output.dominant_index)
    depth16 = np.clip(output.depth_map / camera.far, 0.0, 1.0) * 65535.0
    write_pgm16(paths["depth_pgm"], np.round(depth16).astype(np.uint16))
    write_pgm16(paths["transmittance_pgm"], np.round(output.final_transmittance * 65535.0).astype(np.uint16))
    return list(paths.values())
