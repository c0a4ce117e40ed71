"""
Procedural 3-task dense benchmark and its evaluation metrics.

Scenes are orthographic renders of 2-5 primitives over a flat background.
Labels, depth and normals all come from one z-buffer pass, so depth edges and
label edges coincide and normals are the analytic surface normals of the
visible primitive.

World frame: the image spans [0, 8] m in x (columns) and y (rows); depth is
the distance from the camera plane in meters, with the background at the far
plane. Normals are camera-facing: (∂z/∂x, ∂z/∂y, 1) normalised.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from mtcp_config import DatasetConfig
from mtcp_errors import DatasetError, ShapeError

logger = logging.getLogger(__name__)

NUM_CLASSES = 6
FAR_PLANE = 10.0
WORLD_SPAN = 8.0
DUMP_MAGIC = b"MTCPDS1"

SHAPE_KINDS = {1: "sphere", 2: "box", 3: "plane", 4: "cylinder", 5: "ellipsoid"}
ALBEDO = np.array(
    [
        [0.55, 0.55, 0.60],  # background
        [0.90, 0.25, 0.20],  # sphere
        [0.20, 0.70, 0.30],  # box
        [0.25, 0.35, 0.90],  # tilted plane
        [0.95, 0.80, 0.20],  # cylinder
        [0.70, 0.30, 0.85],  # ellipsoid
    ]
)
LIGHT = np.array([-0.4, -0.5, 0.77]) / np.linalg.norm([-0.4, -0.5, 0.77])
AMBIENT = 0.25


@dataclass
class SceneSample:
    rgb: np.ndarray  # 3×H×W in [0, 1]
    seg_labels: np.ndarray  # H×W uint8, 0 = background
    depth: np.ndarray  # H×W meters in [1, 10]
    normals: np.ndarray  # 3×H×W unit vectors


@dataclass(frozen=True)
class Primitive:
    label: int
    center: Tuple[float, float]
    depth: float
    # sphere/cylinder: (r,); box/plane: (half_w, half_h[, slope_x, slope_y]); ellipsoid: (rx, ry, rz)
    params: Tuple[float, ...]


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def pixel_grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(size) + 0.5) * (WORLD_SPAN / size)
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    return xs, ys


def surface(prim: Primitive, xs: np.ndarray, ys: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (mask, depth, unnormalised normal 3×H×W) of one primitive."""
    dx = xs - prim.center[0]
    dy = ys - prim.center[1]
    ones = np.ones_like(xs)
    zeros = np.zeros_like(xs)
    kind = SHAPE_KINDS[prim.label]
    if kind == "sphere":
        (r,) = prim.params
        inside = r * r - dx * dx - dy * dy
        mask = inside > 0
        s = np.sqrt(np.maximum(inside, 0.0))
        return mask, prim.depth - s, np.stack([dx, dy, s])
    if kind == "box":
        half_w, half_h = prim.params
        mask = (np.abs(dx) <= half_w) & (np.abs(dy) <= half_h)
        return mask, prim.depth * ones, np.stack([zeros, zeros, ones])
    if kind == "plane":
        half_w, half_h, slope_x, slope_y = prim.params
        mask = (np.abs(dx) <= half_w) & (np.abs(dy) <= half_h)
        return mask, prim.depth + slope_x * dx + slope_y * dy, np.stack([slope_x * ones, slope_y * ones, ones])
    if kind == "cylinder":
        r, half_h = prim.params
        inside = r * r - dx * dx
        mask = (inside > 0) & (np.abs(dy) <= half_h)
        s = np.sqrt(np.maximum(inside, 0.0))
        return mask, prim.depth - s, np.stack([dx, zeros, s])
    rx, ry, rz = prim.params
    q = (dx / rx) ** 2 + (dy / ry) ** 2
    mask = q < 1
    t = np.sqrt(np.maximum(1.0 - q, 0.0))
    return mask, prim.depth - rz * t, np.stack([rz * dx / rx**2, rz * dy / ry**2, t])


def render(primitives: Sequence[Primitive], size: int) -> SceneSample:
    xs, ys = pixel_grid(size)
    labels = np.zeros((size, size), dtype=np.uint8)
    depth = np.full((size, size), FAR_PLANE)
    normals = np.zeros((3, size, size))
    normals[2] = 1.0
    for prim in primitives:
        mask, z, n = surface(prim, xs, ys)
        visible = mask & (z < depth)
        norm = np.linalg.norm(n, axis=0)
        visible &= norm > 0
        labels[visible] = prim.label
        depth[visible] = z[visible]
        normals[:, visible] = n[:, visible] / norm[visible]
    shade = AMBIENT + (1.0 - AMBIENT) * np.clip(np.tensordot(LIGHT, normals, axes=1), 0.0, 1.0)
    rgb = np.clip(ALBEDO[labels].transpose(2, 0, 1) * shade, 0.0, 1.0)
    return SceneSample(rgb, labels, depth, normals)


def sample_primitives(rng: np.random.Generator, min_shapes: int = 2, max_shapes: int = 5) -> List[Primitive]:
    primitives = []
    for _ in range(int(rng.integers(min_shapes, max_shapes + 1))):
        label = int(rng.integers(1, NUM_CLASSES))
        center = (float(rng.uniform(1.0, 7.0)), float(rng.uniform(1.0, 7.0)))
        z = float(rng.uniform(3.0, 8.0))
        kind = SHAPE_KINDS[label]
        if kind == "sphere":
            params: Tuple[float, ...] = (float(rng.uniform(0.8, 1.6)),)
        elif kind == "box":
            params = (float(rng.uniform(0.5, 1.5)), float(rng.uniform(0.5, 1.5)))
        elif kind == "plane":
            params = (
                float(rng.uniform(0.6, 1.5)),
                float(rng.uniform(0.6, 1.5)),
                float(rng.uniform(-0.5, 0.5)),
                float(rng.uniform(-0.5, 0.5)),
            )
        elif kind == "cylinder":
            params = (float(rng.uniform(0.5, 1.2)), float(rng.uniform(0.8, 2.0)))
        else:
            params = (float(rng.uniform(0.7, 1.6)), float(rng.uniform(0.7, 1.6)), float(rng.uniform(0.5, 1.5)))
        primitives.append(Primitive(label, center, z, params))
    return primitives


def generate_scene(
    seed: int, index: int, image_size: int = 64, min_shapes: int = 2, max_shapes: int = 5
) -> SceneSample:
    """Deterministic in (seed, index)."""
    rng = np.random.default_rng([seed, index])
    return render(sample_primitives(rng, min_shapes, max_shapes), image_size)


class SyntheticDataset:
    """Lazily rendered, cached split; validation indices follow the training ones."""

    def __init__(self, config: DatasetConfig, seed: int, split: str = "train"):
        if split not in ("train", "val"):
            raise ValueError(f"split must be 'train' or 'val', got {split!r}")
        self.config = config
        self.seed = seed
        self.split = split
        self.offset = 0 if split == "train" else config.train_count
        self.count = config.train_count if split == "train" else config.val_count
        self._cache: Dict[int, SceneSample] = {}

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> SceneSample:
        if not 0 <= i < self.count:
            raise IndexError(i)
        if i not in self._cache:
            cfg = self.config
            self._cache[i] = generate_scene(self.seed, self.offset + i, cfg.image_size, cfg.min_shapes, cfg.max_shapes)
        return self._cache[i]

    def __iter__(self):
        return (self[i] for i in range(self.count))


# ---------------------------------------------------------------------------
# Dump format
# ---------------------------------------------------------------------------


def write_sample(path: Path, sample: SceneSample) -> None:
    _, height, width = sample.rgb.shape
    payload = b"".join(
        [
            DUMP_MAGIC,
            struct.pack("<II", height, width),
            sample.rgb.astype("<f8").tobytes(),
            sample.seg_labels.astype("<u1").tobytes(),
            sample.depth.astype("<f8").tobytes(),
            sample.normals.astype("<f8").tobytes(),
        ]
    )
    Path(path).write_bytes(payload)


def read_sample(path: Path) -> SceneSample:
    raw = Path(path).read_bytes()
    header = len(DUMP_MAGIC) + 8
    if len(raw) < header or raw[: len(DUMP_MAGIC)] != DUMP_MAGIC:
        raise DatasetError(f"{path}: not an MTCPDS1 sample")
    height, width = struct.unpack_from("<II", raw, len(DUMP_MAGIC))
    pixels = height * width
    expected = header + 8 * 3 * pixels + pixels + 8 * pixels + 8 * 3 * pixels
    if len(raw) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes for {height}x{width}, got {len(raw)}")
    offset = header

    def take(dtype: str, count: int, shape: Tuple[int, ...]) -> np.ndarray:
        nonlocal offset
        array = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
        offset += array.nbytes
        return array

    rgb = take("<f8", 3 * pixels, (3, height, width))
    labels = take("<u1", pixels, (height, width))
    depth = take("<f8", pixels, (height, width))
    normals = take("<f8", 3 * pixels, (3, height, width))
    return SceneSample(rgb.astype(np.float64), labels, depth.astype(np.float64), normals.astype(np.float64))


def dump_dataset(dataset: SyntheticDataset, out_dir: Path) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, sample in enumerate(dataset):
        path = out_dir / f"{dataset.split}_{i:05d}.mtcpds"
        write_sample(path, sample)
        paths.append(path)
    logger.info("wrote %d %s samples to %s", len(paths), dataset.split, out_dir)
    return paths


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def miou(pred_labels: np.ndarray, gt_labels: np.ndarray, num_classes: int = NUM_CLASSES) -> float:
    """Mean IoU over the classes present in the ground truth."""
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ShapeError(f"miou shape mismatch: {pred_labels.shape} vs {gt_labels.shape}")
    scores = []
    for c in range(num_classes):
        gt_c = gt_labels == c
        if not gt_c.any():
            continue
        pred_c = pred_labels == c
        scores.append((gt_c & pred_c).sum() / (gt_c | pred_c).sum())
    return float(np.mean(scores)) if scores else 0.0


def rmse(pred_depth: np.ndarray, gt_depth: np.ndarray) -> float:
    pred_depth = np.asarray(pred_depth, dtype=np.float64)
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    if pred_depth.shape != gt_depth.shape:
        raise ShapeError(f"rmse shape mismatch: {pred_depth.shape} vs {gt_depth.shape}")
    return float(np.sqrt(np.mean((pred_depth - gt_depth) ** 2)))


def mean_angular_error(pred_normals: np.ndarray, gt_normals: np.ndarray, eps: float = 1e-8) -> float:
    """Mean angle in degrees between C-first normal maps (axis 0 is the vector axis)."""
    pred_normals = np.asarray(pred_normals, dtype=np.float64)
    gt_normals = np.asarray(gt_normals, dtype=np.float64)
    if pred_normals.shape != gt_normals.shape:
        raise ShapeError(f"mean_angular_error shape mismatch: {pred_normals.shape} vs {gt_normals.shape}")
    p = pred_normals / np.maximum(np.linalg.norm(pred_normals, axis=0, keepdims=True), eps)
    g = gt_normals / np.maximum(np.linalg.norm(gt_normals, axis=0, keepdims=True), eps)
    cos = np.clip((p * g).sum(axis=0), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


def aggregate_score(metrics: Dict[str, float]) -> Optional[float]:
    """Mean of (mIoU, 1 - RMSE/far_plane, 1 - mErr/90) over the metrics present."""
    terms = []
    if "miou" in metrics:
        terms.append(metrics["miou"])
    if "rmse" in metrics:
        terms.append(1.0 - metrics["rmse"] / FAR_PLANE)
    if "merr" in metrics:
        terms.append(1.0 - metrics["merr"] / 90.0)
    return float(np.mean(terms)) if terms else None
