"""
Synthetic stand-ins for the segmenter and the image-text embedder, plus
ingestion of precomputed masks and features.

A scene is a forest of whole -> part -> sub-part nodes built from simple
primitives. Gaussians are sampled on the leaf surfaces and remember the
three node ids they belong to, so a label render gives per-pixel ground
truth at all three granularities.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .config import (
    CANONICAL_LABELS,
    LEVELS,
    CameraRing,
    ObjectNode,
    SceneSpec,
    SegmentConfig,
    from_dict,
    to_dict,
)
from .errors import DataError, FormatError, IngestError, ShapeMismatchError
from .field import Camera, GaussianField
from .prompt import PromptPlan
from .splat import RenderOutput
from .tensorio import read_label_image, read_tensor, write_pgm16, write_tensor

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-6
DRIFT_WARN = 1e-3
SHAPES = ("box", "sphere", "disk")
FOUR_NEIGHBOURS = ndimage.generate_binary_structure(2, 1)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass
class SceneHierarchy:
    """
    Node tables per level. labels[level][id - 1] is the label of node `id`
    at that level; parent[level][id - 1] is its parent id one level up
    (whole nodes have parent 0).
    """

    labels: List[List[str]] = field(default_factory=lambda: [[], [], []])
    parent: List[List[int]] = field(default_factory=lambda: [[], [], []])

    def ids_for_label(self, label: str) -> Tuple[int, List[int]]:
        """Return (level, ids) of every node carrying `label` at its highest level."""
        for level in (2, 1, 0):
            ids = [i + 1 for i, name in enumerate(self.labels[level]) if name == label]
            if ids:
                return level, ids
        raise DataError(f"label {label!r} does not occur in the scene")

    def whole_of(self, level: int, node_id: int) -> int:
        while level < 2:
            node_id = self.parent[level][node_id - 1]
            level += 1
        return node_id

    def to_json(self) -> dict:
        return {"labels": self.labels, "parent": self.parent}

    @classmethod
    def from_json(cls, data: dict) -> "SceneHierarchy":
        return cls(labels=[list(x) for x in data["labels"]], parent=[list(x) for x in data["parent"]])


@dataclass
class Codebook:
    """Unit-norm label vectors, including the canonical phrases, plus a text-query table."""

    vectors: Dict[str, np.ndarray]
    text: Dict[str, np.ndarray]

    def __post_init__(self):
        missing = [c for c in CANONICAL_LABELS if c not in self.vectors]
        if missing:
            raise FormatError(f"codebook lacks canonical labels {missing}")
        for table in (self.vectors, self.text):
            for label, v in table.items():
                v = np.asarray(v, dtype=np.float64)
                if abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
                    v = _unit(v)
                table[label] = v

    @property
    def dim(self) -> int:
        return len(next(iter(self.vectors.values())))

    def __getitem__(self, label: str) -> np.ndarray:
        try:
            return self.vectors[label]
        except KeyError:
            raise DataError(f"label {label!r} is not in the codebook") from None

    def canonical(self) -> np.ndarray:
        return np.stack([self.vectors[c] for c in CANONICAL_LABELS])

    def text_embedding(self, label: str) -> np.ndarray:
        try:
            return self.text[label]
        except KeyError:
            raise DataError(f"no text embedding for query {label!r}") from None

    def to_json(self) -> dict:
        return {
            "vectors": {k: v.tolist() for k, v in self.vectors.items()},
            "text": {k: v.tolist() for k, v in self.text.items()},
        }

    @classmethod
    def from_json(cls, data: dict) -> "Codebook":
        return cls(
            vectors={k: np.asarray(v) for k, v in data["vectors"].items()},
            text={k: np.asarray(v) for k, v in data["text"].items()},
        )


@dataclass
class RegionInfo:
    pixels: int
    label: Optional[str] = None


@dataclass
class GranularityMasks:
    """Region-id maps for the (sub-part, part, whole) levels; 0 means unassigned."""

    maps: np.ndarray  # (3, H, W) uint32
    tables: List[Dict[int, RegionInfo]]

    @property
    def m_s(self) -> np.ndarray:
        return self.maps[0]

    @property
    def m_p(self) -> np.ndarray:
        return self.maps[1]

    @property
    def m_w(self) -> np.ndarray:
        return self.maps[2]

    @property
    def shape(self):
        return self.maps.shape[1:]

    def region_count(self, level: int) -> int:
        return len(self.tables[level])

    def validate(self) -> None:
        for level in range(3):
            ids, counts = np.unique(self.maps[level], return_counts=True)
            present = {int(i): int(c) for i, c in zip(ids, counts) if i != 0}
            if sorted(present) != list(range(1, len(present) + 1)):
                raise FormatError(f"level {LEVELS[level]}: region ids are not contiguous from 1")
            table = {k: v.pixels for k, v in self.tables[level].items()}
            if table != present:
                raise FormatError(f"level {LEVELS[level]}: region table does not match the map")

    @classmethod
    def from_maps(cls, maps: np.ndarray, labels: Optional[Sequence[Dict[int, str]]] = None) -> "GranularityMasks":
        maps = np.asarray(maps, dtype=np.uint32)
        tables = []
        for level in range(3):
            ids, counts = np.unique(maps[level], return_counts=True)
            names = labels[level] if labels else {}
            tables.append({int(i): RegionInfo(int(c), names.get(int(i))) for i, c in zip(ids, counts) if i != 0})
        return cls(maps=maps, tables=tables)


@dataclass
class GranularityFeatures:
    """
    Per level, a (num_regions + 1, C) table whose row r is the unit feature
    of region r (row 0 unused).
    """

    tables: List[np.ndarray]

    @property
    def dim(self) -> int:
        return self.tables[0].shape[1]

    def dense(self, masks: GranularityMasks, level: int) -> np.ndarray:
        """(H, W, C) feature map of one level; zeros on unassigned pixels."""
        return self.tables[level][masks.maps[level]]

    def validate(self, masks: GranularityMasks) -> None:
        for level in range(3):
            top = int(masks.maps[level].max(initial=0))
            if top >= len(self.tables[level]):
                raise IngestError(f"level {LEVELS[level]}: region {top} has no feature row")
            used = np.unique(masks.maps[level])
            used = used[used > 0]
            norms = np.linalg.norm(self.tables[level][used], axis=1)
            if np.any(np.abs(norms - 1.0) > UNIT_TOL):
                raise IngestError(f"level {LEVELS[level]}: features are not unit norm")


@dataclass
class SceneBundle:
    field: GaussianField
    cameras: List[Camera]
    gt_labels: np.ndarray  # (N, 3) uint32 node ids per level
    hierarchy: SceneHierarchy
    codebook: Codebook


def _flatten(objects: Sequence[ObjectNode]):
    """
    Yield (leaf node, [sub-part, part, whole] nodes). Missing levels are
    filled by promoting the node itself.
    """
    for whole in objects:
        parts = whole.children or [whole]
        for part in parts:
            subs = part.children or [part]
            for sub in subs:
                yield sub, [sub, part, whole]


def _check_node(node: ObjectNode) -> None:
    if node.shape not in SHAPES:
        raise DataError(f"node {node.label!r}: unknown shape {node.shape!r}")
    extent = np.asarray(node.extent, dtype=np.float64)
    needed = extent if node.shape == "box" else extent[:1]
    if len(extent) < (3 if node.shape == "box" else 1) or np.any(needed <= 0):
        raise DataError(f"node {node.label!r}: degenerate primitive (zero extent)")


def _sample_surface(node: ObjectNode, density: float, rng: np.random.Generator):
    """Points and outward normals on a primitive, in world coordinates."""
    _check_node(node)
    e = np.asarray(node.extent, dtype=np.float64)
    if node.shape == "box":
        areas = np.array([e[1] * e[2], e[1] * e[2], e[0] * e[2], e[0] * e[2], e[0] * e[1], e[0] * e[1]]) * 4.0
        count = max(1, int(round(areas.sum() * density)))
        face = rng.choice(6, size=count, p=areas / areas.sum())
        pts = rng.uniform(-1.0, 1.0, size=(count, 3)) * e
        normals = np.zeros((count, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        pts[np.arange(count), axis] = sign * e[axis]
        normals[np.arange(count), axis] = sign
    elif node.shape == "sphere":
        r = e[0]
        count = max(1, int(round(4.0 * np.pi * r * r * density)))
        normals = _unit(rng.normal(size=(count, 3)))
        pts = normals * r
    else:
        r = e[0]
        count = max(1, int(round(np.pi * r * r * density)))
        rad = r * np.sqrt(rng.uniform(size=count))
        ang = rng.uniform(0.0, 2.0 * np.pi, size=count)
        pts = np.stack([rad * np.cos(ang), rad * np.sin(ang), np.zeros(count)], axis=1)
        normals = np.tile([0.0, 0.0, 1.0], (count, 1))
    node_rot = Rotation.from_quat(np.asarray(node.rotation, dtype=np.float64)[[1, 2, 3, 0]])
    return node_rot.apply(pts) + np.asarray(node.center, dtype=np.float64), node_rot.apply(normals)


def _align_z(normals: np.ndarray) -> np.ndarray:
    """wxyz quaternions rotating +z onto each normal."""
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(z, normals)
    s = np.linalg.norm(axis, axis=1)
    angle = np.arctan2(s, normals @ z)
    axis = np.where(s[:, None] > 1e-12, axis / np.maximum(s, 1e-12)[:, None], [1.0, 0.0, 0.0])
    xyzw = Rotation.from_rotvec(axis * angle[:, None]).as_quat()
    return xyzw[:, [3, 0, 1, 2]]


def build_hierarchy(objects: Sequence[ObjectNode]) -> Tuple[SceneHierarchy, List[Tuple[ObjectNode, List[int]]]]:
    hierarchy = SceneHierarchy()
    leaves = []
    node_ids: List[Dict[int, int]] = [{}, {}, {}]
    for leaf, chain in _flatten(objects):
        ids = []
        for level in (2, 1, 0):
            node = chain[level]
            key = id(node)
            if key not in node_ids[level]:
                hierarchy.labels[level].append(node.label)
                hierarchy.parent[level].append(ids[-1] if ids else 0)
                node_ids[level][key] = len(hierarchy.labels[level])
            ids.append(node_ids[level][key])
        leaves.append((leaf, ids[::-1]))
    return hierarchy, leaves


def build_codebook(objects: Sequence[ObjectNode], dim: int, mix: float, seed: int) -> Codebook:
    """
    Whole-level labels and canonical phrases get mutually orthonormal vectors
    (when dim allows); each child is normalize(parent + mix * r) for a random
    unit r, so parts stay close to their whole.
    """
    rng = np.random.default_rng([int(seed), 7])
    wholes = []
    for node in objects:
        if node.label not in wholes:
            wholes.append(node.label)
    anchors = list(CANONICAL_LABELS) + [w for w in wholes if w not in CANONICAL_LABELS]
    if dim >= len(anchors):
        q, _ = np.linalg.qr(rng.normal(size=(dim, len(anchors))))
        base = q.T
    else:
        base = _unit(rng.normal(size=(len(anchors), dim)))
    vectors = {label: base[i] for i, label in enumerate(anchors)}

    def visit(node: ObjectNode, parent_vec: np.ndarray):
        for child in node.children:
            if child.label not in vectors:
                vectors[child.label] = _unit(parent_vec + mix * _unit(rng.normal(size=dim)))
            visit(child, vectors[child.label])

    for node in objects:
        visit(node, vectors[node.label])
    text = {label: v.copy() for label, v in vectors.items() if label not in CANONICAL_LABELS}
    return Codebook(vectors=vectors, text=text)


def ring_cameras(ring: CameraRing) -> List[Camera]:
    """
    Cameras on a ring around look_at; radii span ring.radii and are assigned
    to azimuths with a fixed stride so near and far views alternate.
    """
    count = ring.count
    radii = np.linspace(ring.radii[0], ring.radii[-1], count)
    stride = 7 if count > 7 and np.gcd(7, count) == 1 else 1
    order = (np.arange(count) * stride) % count
    target = np.asarray(ring.look_at, dtype=np.float64)
    cameras = []
    for k in range(count):
        theta = 2.0 * np.pi * k / count
        r = radii[order[k]]
        eye = target + np.array([r * np.cos(theta), r * np.sin(theta), ring.height])
        cameras.append(Camera.look_at(eye, target, ring.image_width, ring.image_height, ring.fov_deg,
                                      near=ring.near, far=ring.far))
    return cameras


def _label_color(label: str) -> np.ndarray:
    h = sum((i + 1) * ord(ch) for i, ch in enumerate(label))
    rng = np.random.default_rng(h)
    return rng.uniform(0.2, 0.9, size=3)


def gen_scene(spec: SceneSpec, seed: Optional[int] = None) -> SceneBundle:
    """
    Sample Gaussians on the leaf primitives (count = area * density, scale
    proportional to the sampling spacing, flat along the surface normal),
    tag each with its (sub-part, part, whole) node ids and place the camera
    ring.

    Raises:
        DataError: empty scene or degenerate primitive
    """
    if not spec.objects:
        raise DataError("scene spec has no objects")
    seed = spec.seed if spec.seed is not None else seed
    if seed is None:
        seed = 0
    rng = np.random.default_rng([int(seed), 1])
    hierarchy, leaves = build_hierarchy(spec.objects)
    spacing = 1.0 / np.sqrt(spec.gaussians_per_unit_area)

    positions, normals, labels, colors = [], [], [], []
    for leaf, ids in leaves:
        pts, nrm = _sample_surface(leaf, spec.gaussians_per_unit_area, rng)
        positions.append(pts)
        normals.append(nrm)
        labels.append(np.tile(np.asarray(ids, dtype=np.uint32), (len(pts), 1)))
        base = _label_color(hierarchy.labels[2][ids[2] - 1])
        tint = _label_color(leaf.label)
        colors.append(np.tile(0.8 * base + 0.2 * tint, (len(pts), 1)))
    positions = np.concatenate(positions)
    normals = np.concatenate(normals)
    n = len(positions)
    scales = np.tile([0.7 * spacing, 0.7 * spacing, 0.15 * spacing], (n, 1))
    field_ = GaussianField.create(
        positions=positions,
        scales=scales,
        rotations=_align_z(normals),
        opacities=np.full(n, spec.opacity),
        colors=np.concatenate(colors),
        feature_dim=spec.feature_dim,
    )
    codebook = build_codebook(spec.objects, spec.codebook_dim, spec.hierarchy_mix, seed)
    cameras = ring_cameras(spec.cameras)
    logger.info("generated %d Gaussians, %d cameras, %d/%d/%d nodes (s/p/w)", n, len(cameras),
                *(len(hierarchy.labels[level]) for level in range(3)))
    return SceneBundle(field_, cameras, np.concatenate(labels), hierarchy, codebook)


def render_labels(output: RenderOutput, gt_labels: np.ndarray) -> np.ndarray:
    """Per-pixel (sub-part, part, whole) ids of the dominant Gaussian; 0 where uncovered."""
    h, w = output.shape
    out = np.zeros((h, w, 3), dtype=np.uint32)
    covered = output.covered
    out[covered] = gt_labels[output.dominant_index[covered].astype(np.int64)]
    return out


def _neighbour_contacts(labels: np.ndarray, region: int) -> Dict[int, int]:
    """Pixels of each other non-zero id 4-adjacent to `region`."""
    mask = labels == region
    ring = ndimage.binary_dilation(mask, structure=FOUR_NEIGHBOURS) & ~mask
    touching = labels[ring]
    ids, counts = np.unique(touching[touching > 0], return_counts=True)
    return {int(i): int(c) for i, c in zip(ids, counts)}


def _prompt_points(prompts: Union[PromptPlan, np.ndarray]) -> np.ndarray:
    if isinstance(prompts, PromptPlan):
        return prompts.points
    return np.asarray(prompts, dtype=np.int64).reshape(-1, 2)


def synth_segment(
    label_render: np.ndarray,
    prompts: Union[PromptPlan, np.ndarray],
    noise: Optional[SegmentConfig] = None,
    seed: int = 0,
    view: int = 0,
    hierarchy: Optional[SceneHierarchy] = None,
) -> GranularityMasks:
    """
    Emit the ground-truth regions hit by at least one prompt at every level.

    Noise: a hit region is dropped with probability p_drop[level]; a region
    holding fewer than merge_min_prompts prompts is merged into its
    most-adjacent kept neighbour with probability p_merge[level].
    """
    noise = noise or SegmentConfig()
    h, w, _ = label_render.shape
    points = _prompt_points(prompts)
    if len(points) == 0:
        logger.warning("view %d: no prompt points, masks are empty", view)
        return GranularityMasks(np.zeros((3, h, w), dtype=np.uint32), [{}, {}, {}])

    maps = np.zeros((3, h, w), dtype=np.uint32)
    tables: List[Dict[int, RegionInfo]] = []
    for level in range(3):
        rng = np.random.default_rng([int(seed), int(view), level])
        gt = label_render[..., level]
        hit = gt[points[:, 1], points[:, 0]]
        hit = hit[hit > 0]
        ids, prompt_counts = np.unique(hit, return_counts=True)
        kept = [int(i) for i in ids if not rng.random() < noise.p_drop[level]]
        counts = {int(i): int(c) for i, c in zip(ids, prompt_counts)}

        parent = {i: i for i in kept}

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        if noise.p_merge[level] > 0 and len(kept) > 1:
            kept_labels = np.where(np.isin(gt, kept), gt, 0)
            for i in kept:
                if counts[i] >= noise.merge_min_prompts or not rng.random() < noise.p_merge[level]:
                    continue
                contacts = _neighbour_contacts(kept_labels, i)
                if not contacts:
                    continue
                target = max(contacts, key=lambda j: (contacts[j], -j))
                a, b = find(i), find(target)
                if a != b:
                    parent[a] = b

        groups = sorted({find(i) for i in kept})
        new_id = {g: k + 1 for k, g in enumerate(groups)}
        lut = np.zeros(int(gt.max(initial=0)) + 1, dtype=np.uint32)
        for i in kept:
            lut[i] = new_id[find(i)]
        maps[level] = lut[gt]
        pixel_counts = np.bincount(maps[level].ravel(), minlength=len(groups) + 1)
        table = {}
        for g in groups:
            label = hierarchy.labels[level][g - 1] if hierarchy is not None else None
            table[new_id[g]] = RegionInfo(int(pixel_counts[new_id[g]]), label)
        tables.append(table)
    return GranularityMasks(maps, tables)


def synth_embed(
    masks: GranularityMasks,
    codebook: Codebook,
    level_noise: Sequence[float] = (0.0, 0.0, 0.0),
    seed: int = 0,
    view: int = 0,
) -> GranularityFeatures:
    """
    Region feature = codebook[label] rotated by angle level_noise[level] toward
    a random direction (drawn per view and region), kept on the unit sphere.

    Raises:
        IngestError: a region has no label (ingested masks)
    """
    tables = []
    for level in range(3):
        rng = np.random.default_rng([int(seed), int(view), 100 + level])
        theta = float(level_noise[level])
        top = max(masks.tables[level], default=0)
        table = np.zeros((top + 1, codebook.dim))
        for rid in sorted(masks.tables[level]):
            info = masks.tables[level][rid]
            if info.label is None:
                raise IngestError(f"level {LEVELS[level]} region {rid} has no label; use ingest() for external masks")
            v = codebook[info.label]
            if theta != 0.0:
                u = rng.normal(size=codebook.dim)
                u -= (u @ v) * v
                u = _unit(u)
                v = np.cos(theta) * v + np.sin(theta) * u
            table[rid] = _unit(v)
        tables.append(table)
    return GranularityFeatures(tables)


def view_stem(view: int) -> str:
    return f"view_{view:03d}"


def export_view(masks: GranularityMasks, features: GranularityFeatures, directory, view: int) -> List[Path]:
    """Write one 16-bit PGM per level and one feature TensorFile per level."""
    directory = Path(directory)
    paths = []
    for level, name in enumerate(LEVELS):
        mask_path = directory / f"{view_stem(view)}_mask_{name}.pgm"
        feat_path = directory / f"{view_stem(view)}_feat_{name}.tensor"
        write_pgm16(mask_path, masks.maps[level])
        write_tensor(feat_path, features.tables[level].astype(np.float32))
        paths += [mask_path, feat_path]
    labels_path = directory / f"{view_stem(view)}_regions.json"
    with open(labels_path, "w", encoding="utf-8") as f:
        json.dump([{str(k): v.label for k, v in sorted(t.items())} for t in masks.tables], f, indent=2)
        f.write("\n")
    paths.append(labels_path)
    return paths


def _find(directory: Path, stem: str) -> Path:
    for suffix in (".pgm", ".png"):
        path = directory / f"{stem}{suffix}"
        if path.exists():
            return path
    return directory / f"{stem}.pgm"


def ingest(mask_files: Sequence, feature_files: Sequence) -> Tuple[GranularityMasks, GranularityFeatures]:
    """
    Read and validate three masks (s, p, w) and three feature tables.

    Feature rows are re-normalized; drift above 1e-3 is reported.

    Raises:
        ShapeMismatchError: mask sizes differ or a table is not 2D
        IngestError: a region id has no feature row
    """
    if len(mask_files) != 3 or len(feature_files) != 3:
        raise IngestError("ingest expects exactly three mask files and three feature files")
    maps = [read_label_image(p) for p in mask_files]
    if len({m.shape for m in maps}) != 1:
        raise ShapeMismatchError(f"mask shapes differ: {[m.shape for m in maps]}")
    tables = []
    for level, path in enumerate(feature_files):
        table = read_tensor(path).astype(np.float64)
        if table.ndim != 2:
            raise ShapeMismatchError(f"{path}: feature table must be 2D, got shape {table.shape}")
        top = int(maps[level].max(initial=0))
        if top >= len(table):
            raise IngestError(f"{path}: region {top} of level {LEVELS[level]} has no feature row")
        used = np.unique(maps[level])
        used = used[used > 0]
        norms = np.linalg.norm(table[used], axis=1)
        if np.any(norms == 0):
            raise IngestError(f"{path}: zero feature for a used region")
        drift = float(np.max(np.abs(norms - 1.0), initial=0.0))
        if drift > DRIFT_WARN:
            logger.warning("%s: feature norms drift by up to %.4f; re-normalizing", path, drift)
        table[used] = table[used] / norms[:, None]
        tables.append(table)
    if len({t.shape[1] for t in tables}) != 1:
        raise ShapeMismatchError("feature tables of different levels have different widths")
    masks = GranularityMasks.from_maps(np.stack(maps))
    return masks, GranularityFeatures(tables)


def ingest_view(directory, view: int) -> Tuple[GranularityMasks, GranularityFeatures]:
    """Ingest the files export_view (or an external tool) wrote for one view."""
    directory = Path(directory)
    stem = view_stem(view)
    masks, features = ingest(
        [_find(directory, f"{stem}_mask_{name}") for name in LEVELS],
        [directory / f"{stem}_feat_{name}.tensor" for name in LEVELS],
    )
    regions = directory / f"{stem}_regions.json"
    if regions.exists():
        with open(regions, "r", encoding="utf-8") as f:
            names = json.load(f)
        for level in range(3):
            for rid, label in names[level].items():
                if int(rid) in masks.tables[level]:
                    masks.tables[level][int(rid)].label = label
    return masks, features


def query_ground_truth(label_render: np.ndarray, hierarchy: SceneHierarchy, label: str):
    """
    GT mask and inclusive box (x0, y0, x1, y1) of a label in one view;
    box is None when the label is not visible.
    """
    level, ids = hierarchy.ids_for_label(label)
    mask = np.isin(label_render[..., level], ids)
    if not mask.any():
        return mask, None
    ys, xs = np.nonzero(mask)
    return mask, (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def region_counts_per_object(masks: GranularityMasks, label_render: np.ndarray, levels=(0, 1)) -> Dict[int, int]:
    """Number of mask regions (summed over `levels`) overlapping each visible whole object."""
    counts = {}
    whole = label_render[..., 2]
    for obj in np.unique(whole):
        if obj == 0:
            continue
        on = whole == obj
        total = 0
        for level in levels:
            ids = np.unique(masks.maps[level][on])
            total += int(np.count_nonzero(ids))
        counts[int(obj)] = total
    return counts


def _node(label, shape, center, extent, children=None) -> ObjectNode:
    return ObjectNode(label=label, shape=shape, center=list(center), extent=list(extent), children=children or [])


SCENE_OBJECTS = ("mug", "lamp", "book", "vase", "clock", "plant", "bowl", "bottle", "teapot", "camera")


def preset_objects() -> List[ObjectNode]:
    """
    Ten objects on a ring; each whole has a base (split into lower and upper
    sub-parts) and a top.
    """
    objects = []
    for k, name in enumerate(SCENE_OBJECTS):
        angle = 2.0 * np.pi * k / len(SCENE_OBJECTS)
        c = np.array([np.cos(angle), np.sin(angle), 0.0])
        hx, hy, hz = 0.18, 0.18, 0.22
        lower = _node(f"{name} base lower", "box", c + [0, 0, -hz / 2], [hx, hy, hz / 2])
        upper = _node(f"{name} base upper", "box", c + [0, 0, hz / 2], [hx, hy, hz / 2])
        base = _node(f"{name} base", "box", c, [hx, hy, hz], [lower, upper])
        top_shape = "sphere" if k % 2 == 0 else "disk"
        top = _node(f"{name} top", top_shape, c + [0, 0, hz + 0.12], [0.12, 0.12, 0.12])
        objects.append(_node(name, "box", c, [hx, hy, hz + 0.24], [base, top]))
    return objects


def scene_a(seed: Optional[int] = None) -> SceneSpec:
    """Ten hierarchical objects, 20 ring views at 128x128, noise-free oracle."""
    return SceneSpec(
        objects=preset_objects(),
        cameras=CameraRing(count=20, radii=[2.5, 5.0], height=1.5, image_width=128, image_height=128),
        seed=seed,
    )


def scene_b(seed: Optional[int] = None) -> SceneSpec:
    """Scene A geometry; pair with scene_b_noise() so only part features are view-consistent."""
    return scene_a(seed)


def scene_b_noise(high: float = 0.8) -> SegmentConfig:
    return SegmentConfig(level_noise=[high, 0.0, high])


def scene_preset(name: str, seed: Optional[int] = None) -> SceneSpec:
    presets = {"a": scene_a, "b": scene_b}
    if name not in presets:
        raise DataError(f"unknown scene preset {name!r}")
    return presets[name](seed)


def save_scene_spec(spec: SceneSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_dict(spec), f, indent=2)
        f.write("\n")


def load_scene_spec(path) -> SceneSpec:
    with open(path, "r", encoding="utf-8") as f:
        return from_dict(SceneSpec, json.load(f), "scene")


def export_masks(masks: GranularityMasks, directory, view: int) -> List[Path]:
    directory = Path(directory)
    paths = []
    for level, name in enumerate(LEVELS):
        path = directory / f"{view_stem(view)}_mask_{name}.pgm"
        write_pgm16(path, masks.maps[level])
        paths.append(path)
    return paths


def export_features(features: GranularityFeatures, directory, view: int) -> List[Path]:
    directory = Path(directory)
    paths = []
    for level, name in enumerate(LEVELS):
        path = directory / f"{view_stem(view)}_feat_{name}.tensor"
        write_tensor(path, features.tables[level].astype(np.float32))
        paths.append(path)
    return paths


def ground_truth(label_render: np.ndarray, hierarchy: SceneHierarchy, queries: Sequence[str]) -> Dict[str, dict]:
    """{query: {"mask": (H, W) bool, "box": (x0, y0, x1, y1) or None}} for one view."""
    out = {}
    for label in queries:
        mask, box = query_ground_truth(label_render, hierarchy, label)
        out[label] = {"mask": mask, "box": box}
    return out


def region_count_cv(masks_per_view: Sequence[GranularityMasks], label_renders: Sequence[np.ndarray],
                    levels=(0, 1)) -> float:
    """
    Mean over objects of the coefficient of variation (std / mean) of the
    object's region count across the views where it is visible.
    """
    per_object: Dict[int, List[int]] = {}
    for masks, labels in zip(masks_per_view, label_renders):
        for obj, count in region_counts_per_object(masks, labels, levels).items():
            per_object.setdefault(obj, []).append(count)
    cvs = []
    for counts in per_object.values():
        counts = np.asarray(counts, dtype=np.float64)
        if len(counts) < 2 or counts.mean() == 0:
            continue
        cvs.append(counts.std() / counts.mean())
    return float(np.mean(cvs)) if cvs else 0.0
