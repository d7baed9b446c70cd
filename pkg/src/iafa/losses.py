"""Center-ness focal loss, corner regression loss, mask focal loss and their sum.

Each loss is a single tape op with a hand-written backward pass.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .errors import ConfigurationError, DimensionError, InputError
from .targets import (
    COS,
    DEPTH,
    DEPTH_OFFSET,
    DEPTH_SCALE,
    DIM_H,
    DIM_L,
    OFFSET_X,
    OFFSET_Y,
    SIN,
    TargetMaps,
)
from .tensor import Tensor, _acc, _record, weighted_sum

PROB_CLAMP = 1e-6
MIN_DEPTH = 0.1


@dataclass(frozen=True)
class LossWeights:
    center: float = 1.0
    reg: float = 1.0
    mask: float = 1.0

    def __post_init__(self):
        w = (self.center, self.reg, self.mask)
        if any(v < 0 for v in w):
            raise ConfigurationError(f"loss weights must be nonnegative, got {w}")
        if not any(w):
            raise ConfigurationError("at least one loss weight must be positive")

    def as_tuple(self) -> tuple[float, float, float]:
        return self.center, self.reg, self.mask


def centerness_focal_loss(pred: Tensor, target: np.ndarray, alpha: float = 2.0, beta: float = 4.0) -> Tensor:
    """Penalty-reduced focal loss over a post-sigmoid heatmap.

    Normalized by the number of positive cells, floored at one.
    """
    if pred.shape != target.shape:
        raise DimensionError(f"heatmap {pred.shape} vs target {target.shape}")
    raw = pred.data
    p = np.clip(raw, PROB_CLAMP, 1 - PROB_CLAMP)
    inside = (raw >= PROB_CLAMP) & (raw <= 1 - PROB_CLAMP)
    pos = target == 1.0
    m = max(int(pos.sum()), 1)
    neg_w = (1.0 - target) ** beta
    logp, log1p = np.log(p), np.log1p(-p)
    terms = np.where(pos, (1 - p) ** alpha * logp, neg_w * p**alpha * log1p)
    loss = -terms.sum() / m

    def backward(g):
        d_pos = -alpha * (1 - p) ** (alpha - 1) * logp + (1 - p) ** alpha / p
        d_neg = neg_w * (alpha * p ** (alpha - 1) * log1p - p**alpha / (1 - p))
        grad = -np.where(pos, d_pos, d_neg) / m
        _acc(pred, g.reshape(-1)[0] * grad * inside)

    return _record(np.array(loss), (pred,), backward)


def decode_corners(attrs: Tensor, cells, k: geo.CameraIntrinsics, stride: float, mean_dims) -> Tensor:
    """Differentiable attributes -> (n, 8, 3) box corners.

    Mirrors ``targets.decode_attributes`` followed by ``geometry.corners_3d``.
    ``cells`` is ``(n, 2)`` of (col, row); ``mean_dims`` is ``(n, 3)``.
    """
    a = attrs.data
    if a.ndim != 2 or a.shape[1] != 8:
        raise DimensionError(f"attributes must be (n, 8), got {a.shape}")
    n = a.shape[0]
    cells = np.asarray(cells, dtype=np.float64).reshape(n, 2)
    mean = np.asarray(mean_dims, dtype=np.float64).reshape(n, 3)
    ki = k.K_inv

    u = stride * (cells[:, 0] + a[:, OFFSET_X])
    v = stride * (cells[:, 1] + a[:, OFFSET_Y])
    z_raw = DEPTH_OFFSET + DEPTH_SCALE * a[:, DEPTH]
    clamped = z_raw < MIN_DEPTH
    if clamped.any():
        warnings.warn("non-positive decoded depth clamped to 0.1 m", RuntimeWarning, stacklevel=2)
    z = np.where(clamped, MIN_DEPTH, z_raw)
    dz = np.where(clamped, 0.0, DEPTH_SCALE)
    rx = ki[0, 0] * u + ki[0, 1] * v + ki[0, 2]
    ry = ki[1, 1] * v + ki[1, 2]
    cx, cy = rx * z, ry * z

    dims = mean * np.exp(a[:, DIM_L : DIM_H + 1])
    s, c = a[:, SIN], a[:, COS]
    q = s * s + c * c
    q_safe = np.where(q > 0, q, 1.0)
    r2 = cx * cx + z * z
    yaw = np.arctan2(s, c) + np.arctan2(cx, z)
    cos_y, sin_y = np.cos(yaw), np.sin(yaw)

    fx = np.tile(geo._FOOT[:, 0], 2)  # (8,)
    fz = np.tile(geo._FOOT[:, 1], 2)
    fy = np.concatenate([np.ones(4), -np.ones(4)])  # bottom below the centroid
    xl = fx[None] * dims[:, 0:1] / 2  # (n, 8)
    zl = fz[None] * dims[:, 1:2] / 2
    yl = fy[None] * dims[:, 2:3] / 2
    out = np.empty((n, 8, 3))
    out[:, :, 0] = cx[:, None] + cos_y[:, None] * xl + sin_y[:, None] * zl
    out[:, :, 1] = cy[:, None] + yl
    out[:, :, 2] = z[:, None] - sin_y[:, None] * xl + cos_y[:, None] * zl

    def backward(g):
        gx, gy, gz = g[:, :, 0], g[:, :, 1], g[:, :, 2]
        g_cx = gx.sum(axis=1)
        g_cy = gy.sum(axis=1)
        g_cz = gz.sum(axis=1)
        # d corner / d yaw
        dpx = -sin_y[:, None] * xl + cos_y[:, None] * zl
        dpz = -cos_y[:, None] * xl - sin_y[:, None] * zl
        g_yaw = (gx * dpx + gz * dpz).sum(axis=1)
        g_l = (gx * cos_y[:, None] * fx / 2 - gz * sin_y[:, None] * fx / 2).sum(axis=1)
        g_w = (gx * sin_y[:, None] * fz / 2 + gz * cos_y[:, None] * fz / 2).sum(axis=1)
        g_h = (gy * fy / 2).sum(axis=1)
        g_cx = g_cx + g_yaw * z / r2
        g_cz = g_cz - g_yaw * cx / r2
        grad = np.zeros_like(a)
        grad[:, OFFSET_X] = g_cx * ki[0, 0] * stride * z
        grad[:, OFFSET_Y] = (g_cx * ki[0, 1] + g_cy * ki[1, 1]) * stride * z
        grad[:, DEPTH] = (g_cx * rx + g_cy * ry + g_cz) * dz
        grad[:, DIM_L] = g_l * dims[:, 0]
        grad[:, DIM_L + 1] = g_w * dims[:, 1]
        grad[:, DIM_H] = g_h * dims[:, 2]
        grad[:, SIN] = np.where(q > 0, g_yaw * c / q_safe, 0.0)
        grad[:, COS] = np.where(q > 0, -g_yaw * s / q_safe, 0.0)
        _acc(attrs, grad)

    return _record(out, (attrs,), backward)


def smooth_l1(pred: Tensor, target: np.ndarray, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1 over every element."""
    if pred.shape != np.shape(target):
        raise DimensionError(f"smooth_l1: {pred.shape} vs {np.shape(target)}")
    diff = pred.data - target
    ad = np.abs(diff)
    quad = ad < beta
    loss = np.where(quad, 0.5 * diff * diff / beta, ad - 0.5 * beta)
    size = max(diff.size, 1)

    def backward(g):
        d = np.where(quad, diff / beta, np.sign(diff))
        _acc(pred, g.reshape(-1)[0] * d / size)

    return _record(np.array(loss.sum() / size), (pred,), backward)


def corners_regression_loss(
    pred_attrs: Tensor, targets: TargetMaps, k: geo.CameraIntrinsics, stride: float, mean_dims_by_class, beta: float = 1.0
) -> Tensor:
    """Smooth-L1 between decoded and ground-truth corners, averaged over
    the 24 coordinates of every object."""
    n = len(targets.centers)
    if pred_attrs.shape != (n, 8):
        raise DimensionError(f"expected ({n}, 8) attributes, got {pred_attrs.shape}")
    if n == 0:
        return Tensor(0.0)
    cells = [c.cell for c in targets.centers]
    mean = [mean_dims_by_class[c.class_id] for c in targets.centers]
    gt = np.stack([geo.corners_3d(c.box) for c in targets.centers])
    return smooth_l1(decode_corners(pred_attrs, cells, k, stride, mean), gt, beta)


def mask_focal_loss(
    g: Tensor,
    center_rows,
    masks,
    alpha: float = 2.0,
    background: bool = False,
) -> Tensor:
    """Focal loss on the relation-map rows of object centers.

    ``masks[j]`` is a flat boolean mask over the ``d`` interior pixels for the
    instance whose center is row ``center_rows[j]`` of ``g``.  With
    ``background`` the non-mask pixels also contribute ``y^a log(1 - y)``.
    """
    G = g.data
    if G.ndim != 2:
        raise DimensionError(f"relation map must be 2-D, got {G.shape}")
    d = G.shape[1]
    rows = np.asarray(center_rows, dtype=np.int64)
    n = len(rows)
    if n == 0:
        return Tensor(0.0)
    fg = np.asarray(masks, dtype=bool).reshape(n, d)
    counts = fg.sum(axis=1)
    if np.any(counts == 0):
        raise InputError("instance masks must be nonempty")
    if rows.min() < 0 or rows.max() >= G.shape[0]:
        raise InputError("center row outside the relation map")
    raw = G[rows]
    y = np.clip(raw, PROB_CLAMP, 1 - PROB_CLAMP)
    inside = (raw >= PROB_CLAMP) & (raw <= 1 - PROB_CLAMP)
    logy, log1y = np.log(y), np.log1p(-y)
    per = np.where(fg, (1 - y) ** alpha * logy, 0.0)
    if background:
        per = per + np.where(fg, 0.0, y**alpha * log1y)
    norm = counts[:, None] * n
    loss = -(per / norm).sum()

    def backward(gr):
        dfg = -alpha * (1 - y) ** (alpha - 1) * logy + (1 - y) ** alpha / y
        d = np.where(fg, dfg, 0.0)
        if background:
            dbg = alpha * y ** (alpha - 1) * log1y - y**alpha / (1 - y)
            d = d + np.where(fg, 0.0, dbg)
        grad = np.zeros_like(G)
        np.add.at(grad, rows, -d / norm * inside)
        _acc(g, gr.reshape(-1)[0] * grad)

    return _record(np.array(loss), (g,), backward)


def total_loss(parts, weights: LossWeights) -> Tensor:
    """``center * L_c + reg * L_r + mask * L_m`` over scalar loss tensors."""
    parts = [p if isinstance(p, Tensor) else Tensor(p) for p in parts]
    if any(not np.isfinite(p.data).all() for p in parts):
        raise InputError("loss parts must be finite")
    return weighted_sum(parts, weights.as_tuple())
