"""Training targets: depth/dims codecs, Gaussian heatmaps and per-object encodings."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .errors import GeometryError, InputError

DEPTH_OFFSET = 12.5
DEPTH_SCALE = 12.5
MIN_SIGMA = 0.5

# regression channel layout
OFFSET_X, OFFSET_Y, DEPTH, DIM_L, DIM_W, DIM_H, SIN, COS = range(8)
REG_CHANNELS = 8

# (l, w, h) class means in meters
DEFAULT_MEAN_DIMS = {
    "Car": (3.88, 1.63, 1.53),
    "Pedestrian": (0.84, 0.66, 1.76),
    "Cyclist": (1.76, 0.60, 1.74),
}


def decode_depth(x):
    return DEPTH_OFFSET + DEPTH_SCALE * np.asarray(x, dtype=np.float64)


def encode_depth(depth):
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise GeometryError("depth must be positive to encode")
    x = (depth - DEPTH_OFFSET) / DEPTH_SCALE
    if np.any(x > 1.0):
        warnings.warn(
            f"depth above {DEPTH_OFFSET + DEPTH_SCALE} m saturates the depth code",
            RuntimeWarning,
            stacklevel=2,
        )
        x = np.minimum(x, 1.0)
    return float(x) if x.ndim == 0 else x


def decode_dims(delta, mean_dims):
    return np.asarray(mean_dims, dtype=np.float64) * np.exp(np.asarray(delta, dtype=np.float64))


def encode_dims(dims, mean_dims):
    dims = np.asarray(dims, dtype=np.float64)
    mean = np.asarray(mean_dims, dtype=np.float64)
    if np.any(dims <= 0) or np.any(mean <= 0):
        raise InputError("dimensions and class means must be positive")
    return np.log(dims / mean)


# ---------------------------------------------------------------- heatmaps


def gaussian_radius(extent, min_overlap: float = 0.7) -> float:
    """Largest corner displacement keeping IoU >= ``min_overlap`` in all three
    CornerNet configurations (shifted, shrunk, grown box)."""
    w, h = (float(v) for v in extent)
    if w <= 0 or h <= 0:
        raise InputError(f"box extents must be positive, got {extent}")
    if not 0 < min_overlap < 1:
        raise InputError(f"min_overlap must lie in (0, 1), got {min_overlap}")
    o = min_overlap
    s, p = w + h, w * h
    # both corners shifted the same way
    r1 = (s - math.sqrt(s * s - 4 * p * (1 - o) / (1 + o))) / 2
    # both corners moved inwards
    r2 = (2 * s - math.sqrt(4 * s * s - 16 * (1 - o) * p)) / 8
    # both corners moved outwards
    r3 = (-2 * o * s + math.sqrt(4 * o * o * s * s + 16 * o * (1 - o) * p)) / (8 * o)
    return min(r1, r2, r3)


def gaussian_sigma(extent, min_overlap: float = 0.7) -> float:
    r = gaussian_radius(extent, min_overlap)
    return max((2 * r + 1) / 6, MIN_SIGMA)


def splat_heatmap(centers, sigmas, shape) -> np.ndarray:
    """Per-class Gaussian bumps combined by elementwise max.

    ``centers`` holds ``(col, row, class_id)`` integer cells; ``shape`` is
    ``(rows, cols, classes)``.
    """
    rows, cols, n_cls = shape
    heat = np.zeros(shape)
    yy, xx = np.mgrid[0:rows, 0:cols]
    for (cx, cy, cls), sigma in zip(centers, sigmas):
        if not (0 <= cx < cols and 0 <= cy < rows and 0 <= cls < n_cls):
            raise InputError(f"center ({cx}, {cy}) class {cls} outside {shape}")
        bump = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma * sigma))
        bump[cy, cx] = 1.0
        np.maximum(heat[:, :, cls], bump, out=heat[:, :, cls])
    return heat


# ---------------------------------------------------------------- per-object targets


@dataclass(frozen=True)
class TargetConfig:
    stride: int = 4
    interior_downscale: int = 2
    min_overlap: float = 0.7
    classes: tuple[str, ...] = ("Car",)
    mean_dims: tuple[tuple[float, float, float], ...] = (DEFAULT_MEAN_DIMS["Car"],)

    def class_index(self, name: str) -> int:
        return self.classes.index(name)


@dataclass
class CenterTarget:
    cell: tuple[int, int]  # (col, row) on the output grid
    class_id: int
    attributes: np.ndarray  # (8,) regression target
    box: geo.Box3D

    @property
    def offsets(self) -> tuple[float, float]:
        return float(self.attributes[OFFSET_X]), float(self.attributes[OFFSET_Y])


@dataclass
class TargetMaps:
    heatmap: np.ndarray  # (rows, cols, classes)
    centers: list[CenterTarget]
    masks: dict[int, np.ndarray] = field(default_factory=dict)  # object -> interior bool mask
    interior_shape: tuple[int, int] = (0, 0)
    interior_downscale: int = 2

    def flat_cells(self) -> np.ndarray:
        cols = self.heatmap.shape[1]
        return np.array([c.cell[1] * cols + c.cell[0] for c in self.centers], dtype=np.int64)

    def interior_index(self, i: int) -> int:
        col, row = self.centers[i].cell
        ds = self.interior_downscale
        return (row // ds) * self.interior_shape[1] + col // ds


def encode_attributes(box: geo.Box3D, k: geo.CameraIntrinsics, stride: float, mean_dims):
    """``(cell, attributes)`` for a box: the regression target at its center cell."""
    u, v = geo.project_center(box, k)
    px, py = u / stride, v / stride
    cell = (int(math.floor(px)), int(math.floor(py)))
    centroid = box.centroid()
    theta = geo.ry_to_theta(box.ry, centroid)
    attrs = np.empty(REG_CHANNELS)
    attrs[OFFSET_X] = px - cell[0]
    attrs[OFFSET_Y] = py - cell[1]
    attrs[DEPTH] = encode_depth(centroid[2])
    attrs[DIM_L : DIM_H + 1] = encode_dims(box.d, mean_dims)
    attrs[SIN] = math.sin(theta)
    attrs[COS] = math.cos(theta)
    return cell, attrs


def decode_attributes(attrs, cell, k: geo.CameraIntrinsics, stride: float, mean_dims) -> geo.Box3D:
    attrs = np.asarray(attrs, dtype=np.float64)
    depth = float(decode_depth(attrs[DEPTH]))
    if depth <= 0:
        warnings.warn("non-positive decoded depth clamped to 0.1 m", RuntimeWarning, stacklevel=2)
        depth = 0.1
    centroid = geo.recover_center(cell, attrs[[OFFSET_X, OFFSET_Y]], depth, k, stride)
    dims = decode_dims(attrs[DIM_L : DIM_H + 1], mean_dims)
    theta = math.atan2(attrs[SIN], attrs[COS])
    return geo.Box3D.from_centroid(centroid, dims, geo.theta_to_ry(theta, centroid))


def pool_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Max-pool a full-resolution boolean mask by ``factor``."""
    h, w = mask.shape
    if h % factor or w % factor:
        raise InputError(f"mask {mask.shape} not divisible by {factor}")
    return mask.reshape(h // factor, factor, w // factor, factor).any(axis=(1, 3))


def build_targets(
    boxes,
    class_ids,
    k: geo.CameraIntrinsics,
    image_size: tuple[int, int],
    cfg: TargetConfig = TargetConfig(),
    masks: dict[int, np.ndarray] | None = None,
) -> TargetMaps:
    """Encode ground truth for one image of ``image_size = (width, height)``.

    Objects whose projected center leaves the image cannot be supervised and
    are dropped; ``masks`` maps object index to a full-resolution visible mask.
    """
    width, height = image_size
    s = cfg.stride
    rows, cols = height // s, width // s
    ds = cfg.interior_downscale
    centers: list[CenterTarget] = []
    splats, sigmas = [], []
    pooled: dict[int, np.ndarray] = {}
    for idx, (box, cls) in enumerate(zip(boxes, class_ids)):
        if box.centroid()[2] <= 0:
            continue
        cell, attrs = encode_attributes(box, k, s, cfg.mean_dims[cls])
        if not (0 <= cell[0] < cols and 0 <= cell[1] < rows):
            continue
        left, top, right, bottom = geo.box_2d(box, k, image_size)
        extent = (max(right - left, 1e-6) / s, max(bottom - top, 1e-6) / s)
        splats.append((cell[0], cell[1], cls))
        sigmas.append(gaussian_sigma(extent, cfg.min_overlap))
        if masks is not None and idx in masks:
            m = pool_mask(np.asarray(masks[idx], dtype=bool), s * ds)
            if m.any():
                pooled[len(centers)] = m
        centers.append(CenterTarget(cell, cls, attrs, box))
    heat = splat_heatmap(splats, sigmas, (rows, cols, len(cfg.classes)))
    return TargetMaps(heat, centers, pooled, (rows // ds, cols // ds), ds)


def perfect_outputs(targets: TargetMaps) -> tuple[np.ndarray, np.ndarray]:
    """Head outputs a flawless network would emit: the target heatmap and the
    encoded attributes written at every center cell."""
    rows, cols, _ = targets.heatmap.shape
    reg = np.zeros((rows, cols, REG_CHANNELS))
    reg[:, :, COS] = 1.0
    for c in targets.centers:
        reg[c.cell[1], c.cell[0]] = c.attributes
    return targets.heatmap.copy(), reg
