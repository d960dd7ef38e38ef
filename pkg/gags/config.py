"""
Centralized configuration for the gags pipeline.

This file contains the shared default values used across the field,
rendering, prompting, oracle, distillation and query modules, plus the
typed run configuration read by the CLI. Update these values in one place
instead of modifying each module individually.
"""

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from .errors import ConfigError

SCHEMA_VERSION = 1

# Field defaults
# FEATURE_DIM is the per-Gaussian trainable feature length d
# OPACITY_EPS keeps opacities inside (eps, 1 - eps)
FEATURE_DIM = 16
OPACITY_EPS = 1e-4
QUATERNION_TOL = 1e-6

# Rasterizer
# LOW_PASS is added to the diagonal of every projected 2D covariance (px^2)
# ALPHA_MAX clamps per-splat alpha, T_MIN stops blending once transmittance falls below it
TILE_SIZE = 16
LOW_PASS = 0.3
ALPHA_MAX = 0.99
T_MIN = 1e-4
SIGMA_EXTENT = 3.0
DOMINANT_SENTINEL = 0xFFFFFFFF
VISIBILITY_THRESHOLD = 0.05
MIN_DEPTH_SLACK = 1e-4

# Prompt planning
# BASE_PROMPTS is the prompt count n for a patch seen from its nearest view
PATCH_SIZE = 64
SUB_PATCHES = 4
BASE_PROMPTS = 4
RATIO_CAP = 25.0

# Oracle
CODEBOOK_DIM = 32
CANONICAL_LABELS = ("object", "things", "stuff", "texture")
HIERARCHY_MIX = 0.6
GAUSSIANS_PER_UNIT_AREA = 400.0
MERGE_MIN_PROMPTS = 2

# Distillation
# Level order everywhere is (sub-part, part, whole)
LEVELS = ("s", "p", "w")
HIDDEN_DIM = 64
LAMBDA_ENTROPY = 0.01
LAMBDA_CONS = 0.1
LR_FEATURES = 2.5e-3
LR_DECODER = 1e-3
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
ITERATIONS = 2000
DISTILL_MODES = ("gad", "single_s", "single_p", "single_w", "average")

# Query
SMOOTH_KERNEL = 5
SEGMENT_THRESHOLD = 0.4

# Evaluation summary workbook
SUMMARY_SHEET = "Summary"
MAX_COLUMN_WIDTH = 50

ENV_PREFIX = "GAGS_"


@dataclass
class ObjectNode:
    """One node of the whole -> part -> sub-part hierarchy."""

    label: str
    shape: str = "box"
    center: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    # half-extents for boxes; extent[0] is the radius of spheres and disks
    extent: List[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])
    rotation: List[float] = field(default_factory=lambda: [1.0, 0.0, 0.0, 0.0])
    children: List["ObjectNode"] = field(default_factory=list)


@dataclass
class CameraRing:
    count: int = 20
    radii: List[float] = field(default_factory=lambda: [2.5, 6.0])
    height: float = 1.0
    look_at: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    image_width: int = 128
    image_height: int = 128
    fov_deg: float = 60.0
    near: float = 0.1
    far: float = 100.0


@dataclass
class SceneSpec:
    objects: List[ObjectNode] = field(default_factory=list)
    cameras: CameraRing = field(default_factory=CameraRing)
    gaussians_per_unit_area: float = GAUSSIANS_PER_UNIT_AREA
    feature_dim: int = FEATURE_DIM
    codebook_dim: int = CODEBOOK_DIM
    hierarchy_mix: float = HIERARCHY_MIX
    opacity: float = 0.9
    seed: Optional[int] = None


@dataclass
class PromptConfig:
    patch_size: int = PATCH_SIZE
    base_count: int = BASE_PROMPTS
    sub_patches: int = SUB_PATCHES
    ratio_cap: float = RATIO_CAP
    visibility_threshold: float = VISIBILITY_THRESHOLD
    # total points per view for uniform prompting; None matches the depth-aware budget
    uniform_total: Optional[int] = None


@dataclass
class SegmentConfig:
    p_drop: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    p_merge: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    merge_min_prompts: int = MERGE_MIN_PROMPTS
    level_noise: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])


@dataclass
class TrainConfig:
    lambda_entropy: float = LAMBDA_ENTROPY
    lambda_cons: float = LAMBDA_CONS
    lr_features: float = LR_FEATURES
    lr_decoder: float = LR_DECODER
    beta1: float = ADAM_BETAS[0]
    beta2: float = ADAM_BETAS[1]
    eps: float = ADAM_EPS
    iterations: int = ITERATIONS
    views_per_iteration: int = 1
    hidden_dim: int = HIDDEN_DIM
    feature_dim: Optional[int] = None
    distill_mode: str = "gad"
    gas_on: bool = True
    region_weighting: bool = True
    seed: Optional[int] = None

    def validate(self) -> None:
        if self.lambda_entropy < 0 or self.lambda_cons < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.lr_features <= 0 or self.lr_decoder <= 0:
            raise ConfigError("learning rates must be positive")
        if self.distill_mode not in DISTILL_MODES:
            raise ConfigError(f"unknown distill_mode {self.distill_mode!r}, expected one of {DISTILL_MODES}")
        if self.iterations < 0 or self.views_per_iteration < 1:
            raise ConfigError("iterations must be >= 0 and views_per_iteration >= 1")


@dataclass
class QueryConfig:
    # empty list queries every whole-level label of the scene
    queries: List[str] = field(default_factory=list)
    threshold: float = SEGMENT_THRESHOLD
    kernel: int = SMOOTH_KERNEL
    smooth_features: bool = False
    # optional TensorFile of real text embeddings, rows ordered like `queries`
    text_embeddings: Optional[str] = None
    views: Optional[List[int]] = None


@dataclass
class IngestConfig:
    masks_dir: Optional[str] = None
    features_dir: Optional[str] = None


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: Optional[int] = None
    threads: int = 1
    output_dir: str = "runs/default"
    scene_preset: str = "a"
    scene: Optional[SceneSpec] = None
    field_path: Optional[str] = None
    cameras_path: Optional[str] = None
    # None: the preset-scene grid for preset scenes, PromptConfig defaults otherwise
    prompt: Optional[PromptConfig] = None
    segment: SegmentConfig = field(default_factory=SegmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    query: QueryConfig = field(default_factory=QueryConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("a seed is mandatory for stochastic commands (set 'seed' or GAGS_SEED)")
        return int(self.seed)


def _unwrap_optional(tp: Any) -> Any:
    if typing.get_origin(tp) is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return tp


def _coerce(tp: Any, value: Any, where: str) -> Any:
    tp = _unwrap_optional(tp)
    if value is None:
        return None
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object, got {type(value).__name__}")
        return from_dict(tp, value, where)
    origin = typing.get_origin(tp)
    if origin in (list, List):
        (item_tp,) = typing.get_args(tp) or (Any,)
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return [_coerce(item_tp, v, f"{where}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string")
    return value


def from_dict(cls, data: Dict[str, Any], where: str = "config"):
    """
    Build dataclass `cls` from a JSON object, rejecting unknown keys.

    Args:
        cls: Target dataclass type
        data: Parsed JSON object
        where: Dotted location used in error messages

    Returns:
        Instance of cls
    """
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from e


def to_dict(obj) -> Dict[str, Any]:
    return dataclasses.asdict(obj)


def load_run_config(path: Optional[str]) -> RunConfig:
    """
    Load a RunConfig from JSON (or defaults when path is None).

    Raises:
        ConfigError: unreadable file, unknown keys or schema mismatch
    """
    if path is None:
        config = RunConfig()
    else:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top-level JSON must be an object")
        config = from_dict(RunConfig, data)
    if config.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {config.schema_version} is not supported (expected {SCHEMA_VERSION})")
    if config.threads < 1:
        raise ConfigError("threads must be >= 1")
    config.train.validate()
    return config


def env_default(name: str, default: Any = None) -> Any:
    """Return GAGS_<name> from the environment, or default."""
    return os.environ.get(ENV_PREFIX + name, default)


def env_flag(name: str) -> Optional[bool]:
    value = env_default(name)
    if value is None:
        return None
    return value.strip().lower() in ("1", "true", "yes", "on")


def save_json(data: Any, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")
