"""
Scene data model: Gaussians, the Gaussian field, pinhole cameras and
field/camera file I/O.

Geometry (position, scale, rotation, opacity) is frozen once a field is
loaded or generated; only the per-Gaussian feature is trainable.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from plyfile import PlyData, PlyElement
from scipy.spatial.transform import Rotation

from .config import FEATURE_DIM, OPACITY_EPS, QUATERNION_TOL
from .errors import EmptyFieldError, FormatError, MissingInputError

logger = logging.getLogger(__name__)

# zeroth-order spherical harmonic constant used by 3DGS color storage
SH_C0 = 0.28209479177387814
LOGIT_MAX = float(np.log((1.0 - OPACITY_EPS) / OPACITY_EPS))

REQUIRED_PROPERTIES = (
    "x", "y", "z",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "opacity",
)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Renormalize wxyz quaternions whose norm drifted more than QUATERNION_TOL from 1."""
    q = np.array(q, dtype=np.float64, copy=True).reshape(-1, 4)
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms == 0.0):
        raise FormatError("zero-length rotation quaternion")
    drift = np.abs(norms - 1.0) > QUATERNION_TOL
    q[drift] /= norms[drift, None]
    return q


def rotation_matrices(q: np.ndarray) -> np.ndarray:
    """wxyz quaternions (N,4) -> rotation matrices (N,3,3)."""
    q = np.asarray(q, dtype=np.float64).reshape(-1, 4)
    if len(q) == 0:
        return np.zeros((0, 3, 3))
    return Rotation.from_quat(q[:, [1, 2, 3, 0]]).as_matrix()


@dataclass
class Gaussian:
    """One Gaussian in activated (in-memory) units."""

    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    feature: np.ndarray
    color: Optional[np.ndarray] = None
    min_depth: Optional[float] = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.rotation = normalize_quaternions(self.rotation)[0]
        self.feature = np.asarray(self.feature, dtype=np.float64).reshape(-1)
        if np.any(self.scale <= 0):
            raise FormatError("Gaussian scales must be positive")
        if not 0.0 < self.opacity < 1.0:
            raise FormatError("Gaussian opacity must lie in (0, 1)")

    def covariance(self) -> np.ndarray:
        R = rotation_matrices(self.rotation)[0]
        return R @ np.diag(self.scale ** 2) @ R.T


@dataclass
class GaussianField:
    """
    Structure-of-arrays Gaussian field.

    Scales and opacities are kept in their file parameterization (log-scale
    and logit) so that PLY round trips are exact; `scales` and `opacities`
    give the activated values.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    features: np.ndarray
    color_dc: Optional[np.ndarray] = None
    min_depth: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = normalize_quaternions(self.rotations) if n else np.zeros((0, 4))
        self.opacity_logits = np.clip(
            np.asarray(self.opacity_logits, dtype=np.float64).reshape(n), -LOGIT_MAX, LOGIT_MAX
        )
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.features) != n or self.features.shape[1] < 1:
            raise FormatError(f"features must have shape ({n}, d), got {self.features.shape}")
        if self.color_dc is not None:
            self.color_dc = np.asarray(self.color_dc, dtype=np.float64).reshape(n, 3)
        if self.min_depth is None:
            self.min_depth = np.full(n, np.nan)
        else:
            self.min_depth = np.asarray(self.min_depth, dtype=np.float64).reshape(n)
        for name in ("positions", "log_scales", "opacity_logits", "features"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise FormatError(f"non-finite values in {name}")

    @classmethod
    def create(
        cls,
        positions: np.ndarray,
        scales: np.ndarray,
        rotations: np.ndarray,
        opacities: np.ndarray,
        features: Optional[np.ndarray] = None,
        colors: Optional[np.ndarray] = None,
        feature_dim: int = FEATURE_DIM,
    ) -> "GaussianField":
        """Build a field from activated values; features default to zeros."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        scales = np.asarray(scales, dtype=np.float64).reshape(-1, 3)
        opacities = np.asarray(opacities, dtype=np.float64).reshape(-1)
        if np.any(scales <= 0):
            raise FormatError("all scale components must be positive")
        if np.any((opacities <= 0) | (opacities >= 1)):
            raise FormatError("opacities must lie in (0, 1)")
        if features is None:
            features = np.zeros((len(positions), feature_dim))
        color_dc = None if colors is None else (np.asarray(colors, dtype=np.float64) - 0.5) / SH_C0
        return cls(
            positions=positions,
            log_scales=np.log(scales),
            rotations=rotations,
            opacity_logits=logit(opacities),
            features=features,
            color_dc=color_dc,
        )

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian]) -> "GaussianField":
        if not gaussians:
            raise EmptyFieldError("cannot build a field from zero Gaussians")
        dims = {len(g.feature) for g in gaussians}
        if len(dims) != 1:
            raise FormatError(f"all Gaussians must share one feature dimension, got {sorted(dims)}")
        colors = None
        if all(g.color is not None for g in gaussians):
            colors = np.stack([g.color for g in gaussians])
        out = cls.create(
            positions=np.stack([g.position for g in gaussians]),
            scales=np.stack([g.scale for g in gaussians]),
            rotations=np.stack([g.rotation for g in gaussians]),
            opacities=np.array([g.opacity for g in gaussians]),
            features=np.stack([g.feature for g in gaussians]),
            colors=colors,
        )
        out.min_depth = np.array([np.nan if g.min_depth is None else g.min_depth for g in gaussians])
        return out

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def colors(self) -> Optional[np.ndarray]:
        if self.color_dc is None:
            return None
        return np.clip(self.color_dc * SH_C0 + 0.5, 0.0, 1.0)

    def gaussian(self, i: int) -> Gaussian:
        md = self.min_depth[i]
        return Gaussian(
            position=self.positions[i],
            scale=self.scales[i],
            rotation=self.rotations[i],
            opacity=float(self.opacities[i]),
            feature=self.features[i].copy(),
            color=None if self.color_dc is None else self.colors[i],
            min_depth=None if np.isnan(md) else float(md),
        )

    def covariances(self) -> np.ndarray:
        """Sigma = R diag(scale^2) R^T for every Gaussian, shape (N,3,3)."""
        R = rotation_matrices(self.rotations)
        s2 = self.scales ** 2
        return np.einsum("nij,nj,nkj->nik", R, s2, R)

    def bounding_box(self) -> Tuple[np.ndarray, np.ndarray]:
        if len(self) == 0:
            raise EmptyFieldError("empty field has no bounding box")
        return self.positions.min(axis=0), self.positions.max(axis=0)

    def with_features(self, features: np.ndarray) -> "GaussianField":
        """Copy sharing geometry, with a new feature matrix."""
        return GaussianField(
            positions=self.positions,
            log_scales=self.log_scales,
            rotations=self.rotations,
            opacity_logits=self.opacity_logits,
            features=np.array(features, dtype=np.float64),
            color_dc=self.color_dc,
            min_depth=self.min_depth.copy(),
        )

    def has_min_depth(self) -> bool:
        return bool(np.all(np.isfinite(self.min_depth)))


def load_field(path) -> GaussianField:
    """
    Load a 3DGS-style binary PLY.

    Properties: x y z, scale_0..2 (log), rot_0..3 (wxyz), opacity (logit),
    optional f_dc_0..2, feat_0..feat_{d-1} and min_depth.

    Raises:
        MissingInputError: file does not exist
        FormatError: a required property is missing
        EmptyFieldError: the file holds zero Gaussians
    """
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"field file not found: {path}")
    try:
        ply = PlyData.read(str(path))
        vertex = ply["vertex"]
    except (KeyError, ValueError, OSError) as e:
        raise FormatError(f"{path}: unreadable PLY ({e})") from e
    names = [p.name for p in vertex.properties]
    missing = [p for p in REQUIRED_PROPERTIES if p not in names]
    if missing:
        raise FormatError(f"{path}: missing required properties {missing}")
    n = vertex.count
    if n == 0:
        raise EmptyFieldError(f"{path}: field has zero Gaussians")

    def column(name):
        return np.asarray(vertex[name], dtype=np.float64)

    def stack(prefix, count):
        return np.stack([column(f"{prefix}{i}") for i in range(count)], axis=1)

    feat_names = sorted((p for p in names if p.startswith("feat_")), key=lambda s: int(s.split("_")[-1]))
    if feat_names:
        features = np.stack([column(name) for name in feat_names], axis=1)
    else:
        features = np.zeros((n, FEATURE_DIM))
    color_dc = stack("f_dc_", 3) if all(f"f_dc_{i}" in names for i in range(3)) else None
    min_depth = column("min_depth") if "min_depth" in names else None
    logger.debug("loaded %d Gaussians (d=%d) from %s", n, features.shape[1], path)
    return GaussianField(
        positions=np.stack([column("x"), column("y"), column("z")], axis=1),
        log_scales=stack("scale_", 3),
        rotations=stack("rot_", 4),
        opacity_logits=column("opacity"),
        features=features,
        color_dc=color_dc,
        min_depth=min_depth,
    )


def save_field(field: GaussianField, path, features: Optional[np.ndarray] = None, dtype: str = "f4") -> None:
    """
    Write a field as binary little-endian PLY, re-loadable by load_field.

    Args:
        field: Field to write
        path: Output PLY path
        features: Optional feature override; an empty array writes zeros
        dtype: "f4" (3DGS-compatible) or "f8"
    """
    if dtype not in ("f4", "f8"):
        raise FormatError(f"unsupported PLY dtype {dtype}")
    n = len(field)
    if features is None:
        features = field.features
    elif np.size(features) == 0:
        features = np.zeros((n, field.feature_dim))
    features = np.asarray(features).reshape(n, -1)

    columns: List[Tuple[str, np.ndarray]] = [
        ("x", field.positions[:, 0]), ("y", field.positions[:, 1]), ("z", field.positions[:, 2]),
    ]
    columns += [(f"scale_{i}", field.log_scales[:, i]) for i in range(3)]
    columns += [(f"rot_{i}", field.rotations[:, i]) for i in range(4)]
    columns.append(("opacity", field.opacity_logits))
    if field.color_dc is not None:
        columns += [(f"f_dc_{i}", field.color_dc[:, i]) for i in range(3)]
    columns += [(f"feat_{i}", features[:, i]) for i in range(features.shape[1])]
    if np.any(np.isfinite(field.min_depth)):
        columns.append(("min_depth", field.min_depth))

    elements = np.empty(n, dtype=[(name, dtype) for name, _ in columns])
    for name, values in columns:
        elements[name] = values
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PlyData([PlyElement.describe(elements, "vertex")], byte_order="<").write(str(path))


@dataclass
class Camera:
    """
    Pinhole camera; world_to_camera maps world points to an OpenCV-style
    camera frame (x right, y down, z forward).
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.1
    far: float = 100.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise FormatError("focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise FormatError("camera clip planes must satisfy 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise FormatError("image size must be positive")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6) or np.linalg.det(self.rotation) < 0:
            raise FormatError("camera rotation must be orthonormal with determinant +1")

    @classmethod
    def look_at(cls, eye, target, width: int, height: int, fov_deg: float,
                up=(0.0, 0.0, 1.0), near: float = 0.1, far: float = 100.0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
        return cls(width=width, height=height, fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                   rotation=R, translation=-R @ eye, near=near, far=far)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {
            "width": self.width, "height": self.height,
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Camera":
        try:
            return cls(**data)
        except TypeError as e:
            raise FormatError(f"bad camera record: {e}") from e


def save_cameras(cameras: Sequence[Camera], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump([c.to_dict() for c in cameras], f, indent=2)
        f.write("\n")


def load_cameras(path) -> List[Camera]:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"camera file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, list):
        raise FormatError(f"{path}: expected a list of cameras")
    return [Camera.from_dict(d) for d in data]
