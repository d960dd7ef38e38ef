"""
Open-vocabulary queries over a distilled field: relevancy maps,
localization, segmentation and the mAcc / mIoU evaluation.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from openpyxl.utils import get_column_letter
from scipy.ndimage import uniform_filter

from .config import MAX_COLUMN_WIDTH, SEGMENT_THRESHOLD, SMOOTH_KERNEL, SUMMARY_SHEET, QueryConfig
from .distill import Decoder, decode
from .errors import ConfigError, DataError, MissingGroundTruthError
from .field import Camera, GaussianField
from .splat import RenderOutput, rasterize
from .tensorio import heat_colors, save_png, write_pgm16

logger = logging.getLogger(__name__)

DEGENERATE_SPREAD = 1e-12


@dataclass
class RelevancyMap:
    raw: np.ndarray         # (H, W) in (0, 1), 0 outside valid
    smoothed: np.ndarray    # (H, W)
    normalized: np.ndarray  # (H, W) in [0, 1]
    valid: np.ndarray       # (H, W) bool
    degenerate: bool = False


@dataclass
class QueryResult:
    label: str
    view: int
    localization: Tuple[int, int]  # (x, y)
    mask: np.ndarray
    peak: float

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "view": self.view,
            "localization": list(self.localization),
            "peak": self.peak,
            "mask_pixels": int(self.mask.sum()),
        }


@dataclass
class EvalRecord:
    entries: List[dict]
    mAcc: float
    mIoU: float
    empty_union: int = 0

    def to_json(self) -> dict:
        return {
            "entries": self.entries,
            "mAcc": self.mAcc,
            "mIoU": self.mIoU,
            "queries": len(self.entries),
            "empty_union": self.empty_union,
        }


def relevancy(f_clip: np.ndarray, f_text: np.ndarray, canon: np.ndarray) -> np.ndarray:
    """
    min_i exp(f.t) / (exp(f.c_i) + exp(f.t)) over the canonical phrases.

    Args:
        f_clip: (..., C) unit features
        f_text: (C,) query embedding
        canon: (K, C) canonical embeddings
    """
    canon = np.asarray(canon, dtype=np.float64).reshape(-1, np.shape(f_text)[-1])
    if len(canon) == 0:
        raise DataError("relevancy needs at least one canonical phrase")
    f_clip = np.asarray(f_clip, dtype=np.float64)
    text_dot = f_clip @ np.asarray(f_text, dtype=np.float64)
    canon_dot = f_clip @ canon.T
    # exp(a) / (exp(b) + exp(a)) = 1 / (1 + exp(b - a))
    ratios = 1.0 / (1.0 + np.exp(canon_dot - text_dot[..., None]))
    return ratios.min(axis=-1)


def _masked_mean(values: np.ndarray, valid: np.ndarray, kernel: int) -> np.ndarray:
    weight = uniform_filter(valid.astype(np.float64), size=kernel, mode="constant")
    summed = uniform_filter(np.where(valid, values, 0.0), size=kernel, mode="constant")
    return np.where(valid & (weight > 0), summed / np.where(weight > 0, weight, 1.0), 0.0)


def smooth(raw: np.ndarray, kernel: int = SMOOTH_KERNEL, valid: Optional[np.ndarray] = None) -> np.ndarray:
    """k x k mean filter over valid pixels only; invalid pixels come back as 0."""
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError(f"smoothing kernel must be a positive odd number, got {kernel}")
    raw = np.asarray(raw, dtype=np.float64)
    if valid is None:
        valid = np.ones(raw.shape, dtype=bool)
    return _masked_mean(raw, valid, kernel)


def normalize_map(values: np.ndarray, valid: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Min-max over valid pixels; a constant map normalizes to zeros."""
    out = np.zeros(values.shape)
    if not np.any(valid):
        return out, True
    lo, hi = values[valid].min(), values[valid].max()
    if hi - lo <= DEGENERATE_SPREAD:
        logger.warning("relevancy map is constant over valid pixels; segmentation will be empty")
        return out, True
    out[valid] = (values[valid] - lo) / (hi - lo)
    return out, False


def localize(values: np.ndarray, valid: Optional[np.ndarray] = None) -> Tuple[int, int]:
    """(x, y) of the highest value; ties resolve to the first pixel in row-major order."""
    values = np.asarray(values, dtype=np.float64)
    if valid is None:
        valid = np.ones(values.shape, dtype=bool)
    if not np.any(valid):
        raise DataError("cannot localize on a map without valid pixels")
    flat = np.argmax(np.where(valid, values, -np.inf))
    y, x = np.unravel_index(flat, values.shape)
    return int(x), int(y)


def segment(relevancy_map: RelevancyMap, threshold: float = SEGMENT_THRESHOLD) -> np.ndarray:
    """normalized >= threshold on valid pixels; empty for degenerate maps."""
    if relevancy_map.degenerate:
        return np.zeros(relevancy_map.valid.shape, dtype=bool)
    return relevancy_map.valid & (relevancy_map.normalized >= threshold)


def relevancy_map(f_clip: np.ndarray, valid: np.ndarray, f_text: np.ndarray, canon: np.ndarray,
                  kernel: int = SMOOTH_KERNEL, smooth_features: bool = False) -> RelevancyMap:
    """
    Build raw, smoothed and normalized maps. With smooth_features the f_clip
    map is mean-filtered (and re-normalized) before scoring instead of
    filtering the scores.
    """
    if smooth_features:
        filtered = np.stack([smooth(f_clip[..., c], kernel, valid) for c in range(f_clip.shape[-1])], axis=-1)
        norms = np.linalg.norm(filtered, axis=-1, keepdims=True)
        filtered = np.where(norms > 0, filtered / np.where(norms > 0, norms, 1.0), 0.0)
        raw = np.where(valid, relevancy(filtered, f_text, canon), 0.0)
        smoothed = raw
    else:
        raw = np.where(valid, relevancy(f_clip, f_text, canon), 0.0)
        smoothed = smooth(raw, kernel, valid)
    normalized, degenerate = normalize_map(smoothed, valid)
    return RelevancyMap(raw=raw, smoothed=smoothed, normalized=normalized, valid=valid, degenerate=degenerate)


def decode_view(field_: GaussianField, decoder: Decoder, camera: Camera,
                output: Optional[RenderOutput] = None, threads: int = 1):
    """Render and decode one view: (f_clip (H, W, C), eta (H, W, 3), covered)."""
    if output is None:
        output = rasterize(field_, camera, threads=threads)
    return decode(decoder, output.feature_map, output.covered)


def query_view(label: str, view: int, f_clip: np.ndarray, covered: np.ndarray, f_text: np.ndarray,
               canon: np.ndarray, config: Optional[QueryConfig] = None) -> Tuple[RelevancyMap, QueryResult]:
    config = config or QueryConfig()
    rmap = relevancy_map(f_clip, covered, f_text, canon, config.kernel, config.smooth_features)
    x, y = localize(rmap.smoothed, covered)
    mask = segment(rmap, config.threshold)
    return rmap, QueryResult(label=label, view=view, localization=(x, y), mask=mask,
                             peak=float(rmap.smoothed[y, x]))


def iou(pred: np.ndarray, gt: np.ndarray) -> Tuple[float, bool]:
    """IoU and whether both masks were empty (scored 1 by convention)."""
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0, True
    return float(np.logical_and(pred, gt).sum() / union), False


def box_hit(point: Tuple[int, int], box: Sequence[int]) -> bool:
    x, y = point
    x0, y0, x1, y1 = box
    return bool(x0 <= x <= x1 and y0 <= y <= y1)


def eval_metrics(results: Sequence[QueryResult], ground_truth: Dict[Tuple[str, int], dict]) -> EvalRecord:
    """
    Args:
        results: one QueryResult per (query, view)
        ground_truth: {(label, view): {"box": (x0, y0, x1, y1), "mask": bool array}}

    Raises:
        MissingGroundTruthError: a result has no ground truth entry or box
    """
    entries = []
    empty_union = 0
    for result in results:
        gt = ground_truth.get((result.label, result.view))
        if gt is None or gt.get("box") is None:
            raise MissingGroundTruthError(f"no ground truth for query {result.label!r} in view {result.view}")
        score, empty = iou(result.mask, gt["mask"])
        empty_union += int(empty)
        entries.append({
            "query": result.label,
            "view": result.view,
            "hit": box_hit(result.localization, gt["box"]),
            "iou": score,
        })
    if empty_union:
        logger.warning("%d prediction/ground-truth pairs were both empty and scored IoU 1", empty_union)
    if not entries:
        return EvalRecord(entries=[], mAcc=0.0, mIoU=0.0)
    return EvalRecord(
        entries=entries,
        mAcc=float(np.mean([e["hit"] for e in entries])),
        mIoU=float(np.mean([e["iou"] for e in entries])),
        empty_union=empty_union,
    )


def summary_table(record: EvalRecord) -> pd.DataFrame:
    """Per-query hit rate and mean IoU, with an overall row."""
    columns = ["query", "views", "accuracy", "mean_iou"]
    if not record.entries:
        return pd.DataFrame(columns=columns)
    df = pd.DataFrame(record.entries)
    table = df.groupby("query", sort=True).agg(views=("view", "count"), accuracy=("hit", "mean"),
                                               mean_iou=("iou", "mean")).reset_index()
    overall = pd.DataFrame([{"query": "overall", "views": len(df), "accuracy": record.mAcc, "mean_iou": record.mIoU}])
    return pd.concat([table, overall], ignore_index=True)[columns]


def export_summary(df: pd.DataFrame, output_file) -> Path:
    """Write the summary to Excel with auto-adjusted column widths."""
    output_file = Path(output_file)
    output_file.parent.mkdir(parents=True, exist_ok=True)
    with pd.ExcelWriter(output_file, engine="openpyxl") as writer:
        df.to_excel(writer, sheet_name=SUMMARY_SHEET, index=False)
        worksheet = writer.sheets[SUMMARY_SHEET]
        for idx, col in enumerate(df.columns, 1):
            max_length = max(df[col].astype(str).map(len).max() if len(df) else 0, len(str(col)))
            worksheet.column_dimensions[get_column_letter(idx)].width = min(max_length + 2, MAX_COLUMN_WIDTH)
    return output_file


def save_heatmap(rmap: RelevancyMap, path) -> None:
    save_png(path, np.where(rmap.valid[..., None], heat_colors(rmap.normalized), 0.0))


def save_mask(mask: np.ndarray, path) -> None:
    write_pgm16(path, mask.astype(np.uint16))
