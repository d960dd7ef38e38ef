"""
Granularity-aware prompt planning.

A view is cut into square patches. Each patch receives a prompt budget
n_P = mean_p(D^2(p) / MD^2(p)) * n over its valid pixels, so a patch seen
from farther away than its nearest view gets proportionally more points.
Points are then placed by sampling sub-patches in proportion to the
number of pixels covered by visible Gaussians.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw

from .config import BASE_PROMPTS, DOMINANT_SENTINEL, PATCH_SIZE, RATIO_CAP, SUB_PATCHES, PromptConfig
from .errors import ConfigError, FormatError, ShapeMismatchError
from .splat import MinDepthMap, RenderOutput

logger = logging.getLogger(__name__)

# per-patch RNG stream tags
_ROUNDING_STREAM = 0
_SAMPLING_STREAM = 1


def patch_rng(seed: int, patch_id: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(patch_id), stream])


@dataclass
class Patch:
    id: int
    x0: int
    y0: int
    width: int
    height: int
    n_p: float = 0.0
    count: int = 0
    partial: bool = False
    valid_pixels: int = 0

    @property
    def area(self) -> int:
        return self.width * self.height


@dataclass
class PromptPlan:
    image_size: Tuple[int, int]  # (height, width)
    patch_size: int = PATCH_SIZE
    base_count: int = BASE_PROMPTS
    patches: List[Patch] = field(default_factory=list)
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))  # (K, 2) as (x, y)
    point_patch: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def total_count(self) -> int:
        return int(sum(p.count for p in self.patches))

    def to_json(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "patch_size": self.patch_size,
            "base_count": self.base_count,
            "patches": [vars(p).copy() for p in self.patches],
            "points": [
                {"x": int(x), "y": int(y), "patch": int(pid)}
                for (x, y), pid in zip(self.points, self.point_patch)
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "PromptPlan":
        try:
            points = data.get("points", [])
            return cls(
                image_size=tuple(data["image_size"]),
                patch_size=int(data["patch_size"]),
                base_count=int(data["base_count"]),
                patches=[Patch(**p) for p in data["patches"]],
                points=np.array([[p["x"], p["y"]] for p in points], dtype=np.int64).reshape(-1, 2),
                point_patch=np.array([p["patch"] for p in points], dtype=np.int64),
            )
        except (KeyError, TypeError) as e:
            raise FormatError(f"bad prompt plan: {e}") from e

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "PromptPlan":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(json.load(f))


@dataclass
class DensityHistogram:
    counts: np.ndarray         # (S, S) covered pixels per sub-patch
    probabilities: np.ndarray  # (S, S)
    x_edges: np.ndarray        # (S+1,) absolute pixel columns
    y_edges: np.ndarray        # (S+1,) absolute pixel rows
    uniform_fallback: bool = False


def _patch_grid(height: int, width: int, patch_size: int) -> List[Patch]:
    patches = []
    for y0 in range(0, height, patch_size):
        for x0 in range(0, width, patch_size):
            ph, pw = min(patch_size, height - y0), min(patch_size, width - x0)
            patches.append(Patch(id=len(patches), x0=x0, y0=y0, width=pw, height=ph,
                                 partial=(ph != patch_size or pw != patch_size)))
    return patches


def patch_prompt_counts(
    depth: np.ndarray,
    md: MinDepthMap,
    patch_size: int = PATCH_SIZE,
    n: int = BASE_PROMPTS,
    ratio_cap: float = RATIO_CAP,
    seed: int = 0,
    depth_valid: Optional[np.ndarray] = None,
) -> PromptPlan:
    """
    Per-patch prompt budgets.

    Args:
        depth: (H, W) rendered depth D
        md: minimum visible depth map
        patch_size: patch edge in pixels
        n: prompt count for a patch seen from its nearest view
        ratio_cap: upper clamp of D^2/MD^2 (lower clamp is 1)
        seed: run seed for stochastic rounding
        depth_valid: optional validity mask of D (defaults to md.valid)

    Returns:
        PromptPlan with n_p and rounded counts, no points
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != md.md.shape:
        raise ShapeMismatchError(f"depth {depth.shape} and min-depth {md.md.shape} differ")
    if n < 1:
        raise ConfigError("base prompt count n must be >= 1")
    if patch_size < 1:
        raise ConfigError("patch_size must be >= 1")
    h, w = depth.shape
    valid = md.valid & (md.md > 0) & (depth > 0)
    if depth_valid is not None:
        valid &= depth_valid
    ratio = np.ones_like(depth)
    ratio[valid] = np.clip(depth[valid] ** 2 / md.md[valid] ** 2, 1.0, ratio_cap)

    patches = _patch_grid(h, w, patch_size)
    if any(p.partial for p in patches):
        logger.debug("patch size %d does not divide %dx%d; edge patches are partial", patch_size, w, h)
    for patch in patches:
        sl = (slice(patch.y0, patch.y0 + patch.height), slice(patch.x0, patch.x0 + patch.width))
        v = valid[sl]
        patch.valid_pixels = int(v.sum())
        if patch.valid_pixels == 0:
            continue
        patch.n_p = float(ratio[sl][v].mean() * n)
        whole = math.floor(patch.n_p)
        frac = patch.n_p - whole
        bump = frac > 0 and patch_rng(seed, patch.id, _ROUNDING_STREAM).random() < frac
        patch.count = int(whole + bump)
    return PromptPlan(image_size=(h, w), patch_size=patch_size, base_count=n, patches=patches)


def _edges(start: int, length: int, s: int) -> np.ndarray:
    return start + (np.arange(s + 1) * length) // s


def visible_gaussian_density(
    coverage: Union[RenderOutput, np.ndarray],
    patch: Patch,
    s: int = SUB_PATCHES,
) -> DensityHistogram:
    """
    S x S histogram of pixels whose dominant Gaussian exists, normalized to a
    distribution; uniform over non-empty sub-patches when nothing is covered.
    """
    if isinstance(coverage, RenderOutput):
        covered = coverage.dominant_index != DOMINANT_SENTINEL
    else:
        covered = np.asarray(coverage, dtype=bool)
    xe = _edges(patch.x0, patch.width, s)
    ye = _edges(patch.y0, patch.height, s)
    counts = np.zeros((s, s), dtype=np.int64)
    areas = np.zeros((s, s), dtype=np.int64)
    for j in range(s):
        for i in range(s):
            block = covered[ye[j]:ye[j + 1], xe[i]:xe[i + 1]]
            counts[j, i] = int(block.sum())
            areas[j, i] = block.size
    total = counts.sum()
    if total > 0:
        return DensityHistogram(counts, counts / total, xe, ye)
    nonempty = (areas > 0).astype(np.float64)
    return DensityHistogram(counts, nonempty / nonempty.sum(), xe, ye, uniform_fallback=True)


def sample_prompts(plan: PromptPlan, histograms: Sequence[DensityHistogram], seed: int) -> PromptPlan:
    """
    Place each patch's rounded count of points: sub-patch by the histogram,
    pixel uniformly inside it, no pixel drawn twice.

    Returns:
        A new plan carrying the points
    """
    if len(histograms) != len(plan.patches):
        raise ShapeMismatchError(f"{len(histograms)} histograms for {len(plan.patches)} patches")
    points, owners = [], []
    for patch, hist in zip(plan.patches, histograms):
        count = patch.count
        if count > patch.area:
            logger.warning("patch %d requests %d prompts but has %d pixels; clamping", patch.id, count, patch.area)
            count = patch.area
        if count <= 0:
            continue
        rng = patch_rng(seed, patch.id, _SAMPLING_STREAM)
        s = hist.probabilities.shape[0]
        pools = []
        for j in range(s):
            for i in range(s):
                ys, xs = np.mgrid[hist.y_edges[j]:hist.y_edges[j + 1], hist.x_edges[i]:hist.x_edges[i + 1]]
                cells = np.stack([xs.ravel(), ys.ravel()], axis=1)
                pools.append(cells[rng.permutation(len(cells))])
        probs = hist.probabilities.ravel().astype(np.float64).copy()
        taken = np.zeros(len(pools), dtype=np.int64)
        sizes = np.array([len(p) for p in pools])
        for _ in range(count):
            open_ = taken < sizes
            p = np.where(open_, probs, 0.0)
            if p.sum() <= 0:
                # histogram support exhausted: spread over the remaining pixels
                p = np.where(open_, sizes - taken, 0).astype(np.float64)
            b = rng.choice(len(pools), p=p / p.sum())
            points.append(pools[b][taken[b]])
            owners.append(patch.id)
            taken[b] += 1
    return PromptPlan(
        image_size=plan.image_size,
        patch_size=plan.patch_size,
        base_count=plan.base_count,
        patches=plan.patches,
        points=np.array(points, dtype=np.int64).reshape(-1, 2),
        point_patch=np.array(owners, dtype=np.int64),
    )


def uniform_prompts(image_size: Tuple[int, int], n_total: int, seed: int, jitter: float = 0.25) -> PromptPlan:
    """
    Regular grid of n_total points (k = ceil(sqrt(n)) columns), each moved
    by up to `jitter` of a cell. Baseline for the GaS-off ablation.
    """
    h, w = image_size
    patch = Patch(id=0, x0=0, y0=0, width=w, height=h, n_p=float(n_total), count=int(n_total),
                  valid_pixels=h * w)
    if n_total <= 0:
        return PromptPlan(image_size=(h, w), patch_size=max(h, w), base_count=0, patches=[patch])
    cols = math.ceil(math.sqrt(n_total))
    rows = math.ceil(n_total / cols)
    cell_w, cell_h = w / cols, h / rows
    rng = np.random.default_rng([int(seed), 0, _SAMPLING_STREAM])
    k = np.arange(n_total)
    cx = (k % cols + 0.5) * cell_w
    cy = (k // cols + 0.5) * cell_h
    jx = rng.uniform(-jitter, jitter, n_total) * cell_w
    jy = rng.uniform(-jitter, jitter, n_total) * cell_h
    x = np.clip(np.floor(cx + jx), 0, w - 1).astype(np.int64)
    y = np.clip(np.floor(cy + jy), 0, h - 1).astype(np.int64)
    return PromptPlan(
        image_size=(h, w),
        patch_size=max(h, w),
        base_count=int(n_total),
        patches=[patch],
        points=np.stack([x, y], axis=1),
        point_patch=np.zeros(n_total, dtype=np.int64),
    )


def plan_prompts(output: RenderOutput, md: MinDepthMap, config: PromptConfig, seed: int) -> PromptPlan:
    """Budgets, density histograms and sampling for one view."""
    plan = patch_prompt_counts(output.depth_map, md, config.patch_size, config.base_count,
                               config.ratio_cap, seed, depth_valid=output.depth_valid)
    histograms = [visible_gaussian_density(output, p, config.sub_patches) for p in plan.patches]
    return sample_prompts(plan, histograms, seed)


def save_prompt_overlay(plan: PromptPlan, background: np.ndarray, path) -> None:
    """Draw the patch grid and prompt points over a grayscale or RGB image in [0, 1]."""
    bg = np.clip(np.asarray(background, dtype=np.float64), 0.0, 1.0)
    if bg.ndim == 2:
        bg = np.repeat(bg[..., None], 3, axis=2)
    img = Image.fromarray((bg * 255.0 + 0.5).astype(np.uint8))
    draw = ImageDraw.Draw(img)
    for patch in plan.patches:
        draw.rectangle([patch.x0, patch.y0, patch.x0 + patch.width - 1, patch.y0 + patch.height - 1],
                       outline=(80, 200, 255))
    for x, y in plan.points:
        draw.ellipse([x - 1, y - 1, x + 1, y + 1], fill=(255, 40, 40))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
