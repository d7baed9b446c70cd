"""Boxes, camera projection, center recovery and rotated-box IoU.

``Box3D.c`` is the KITTI bottom-face center (camera frame: x right, y down,
z forward).  The point the detector anchors on is the volumetric centroid,
``c - (0, h/2, 0)``; :meth:`Box3D.centroid` and :meth:`Box3D.from_centroid`
convert between the two.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError

# corner signs in the box frame: (x, z) around the footprint, counter-clockwise
# seen from above, starting at (+l/2, +w/2)
_FOOT = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=np.float64)


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    out = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    out = np.where(out <= -np.pi, out + 2 * np.pi, out)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class Box3D:
    c: tuple[float, float, float]
    d: tuple[float, float, float]  # (l, w, h)
    ry: float

    def __post_init__(self):
        vals = (*self.c, *self.d, self.ry)
        if not all(math.isfinite(v) for v in vals):
            raise GeometryError(f"non-finite box field in {self}")
        if min(self.d) <= 0:
            raise GeometryError(f"box dimensions must be positive, got {self.d}")
        object.__setattr__(self, "c", tuple(float(v) for v in self.c))
        object.__setattr__(self, "d", tuple(float(v) for v in self.d))
        object.__setattr__(self, "ry", float(self.ry))

    @property
    def l(self) -> float:
        return self.d[0]

    @property
    def w(self) -> float:
        return self.d[1]

    @property
    def h(self) -> float:
        return self.d[2]

    def centroid(self) -> np.ndarray:
        cx, cy, cz = self.c
        return np.array([cx, cy - self.h / 2, cz])

    @classmethod
    def from_centroid(cls, centroid, dims, ry: float) -> "Box3D":
        cx, cy, cz = (float(v) for v in centroid)
        return cls((cx, cy + float(dims[2]) / 2, cz), tuple(dims), ry)

    def y_range(self) -> tuple[float, float]:
        return self.c[1] - self.h, self.c[1]

    def footprint(self) -> np.ndarray:
        """Ground-plane rectangle as a (4, 2) array of (x, z), counter-clockwise."""
        return corners_3d(self)[:4][:, [0, 2]]


@dataclass(frozen=True)
class CameraIntrinsics:
    K: np.ndarray

    def __post_init__(self):
        K = np.array(self.K, dtype=np.float64)
        if K.shape != (3, 3):
            raise GeometryError(f"K must be 3x3, got {K.shape}")
        if K[2, 2] == 0:
            raise GeometryError("K[2, 2] must be nonzero")
        K = K / K[2, 2]
        if K[1, 0] or K[2, 0] or K[2, 1]:
            raise GeometryError("K must be upper triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise GeometryError("focal lengths must be positive")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "K_inv", np.linalg.inv(K))

    @classmethod
    def from_params(cls, fx: float, fy: float, px: float, py: float, skew: float = 0.0):
        return cls(np.array([[fx, skew, px], [0.0, fy, py], [0.0, 0.0, 1.0]]))

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def principal_point(self) -> tuple[float, float]:
        return float(self.K[0, 2]), float(self.K[1, 2])

    def __eq__(self, other):
        return isinstance(other, CameraIntrinsics) and np.array_equal(self.K, other.K)

    def __hash__(self):
        return hash(self.K.tobytes())


def corners_3d(box: Box3D) -> np.ndarray:
    """(8, 3) corners: bottom face then top face, same footprint order."""
    l, w, h = box.d
    c, s = math.cos(box.ry), math.sin(box.ry)
    xl = np.tile(_FOOT[:, 0] * l / 2, 2)
    zl = np.tile(_FOOT[:, 1] * w / 2, 2)
    yl = np.concatenate([np.zeros(4), np.full(4, -h)])
    x = c * xl + s * zl
    z = -s * xl + c * zl
    return np.stack([x, yl, z], axis=1) + np.array(box.c)


def project_points(points: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """(n, 3) camera points to (n, 2) pixels."""
    pts = np.atleast_2d(points)
    if np.any(pts[:, 2] <= 0):
        raise GeometryError("cannot project points with non-positive depth")
    uvw = pts @ k.K.T
    return uvw[:, :2] / uvw[:, 2:3]


def project_center(box: Box3D, k: CameraIntrinsics) -> tuple[float, float]:
    centroid = box.centroid()
    if centroid[2] <= 0:
        raise GeometryError(f"box centroid depth {centroid[2]} is not positive")
    u, v = project_points(centroid, k)[0]
    return float(u), float(v)


def recover_center(cell, offsets, depth: float, k: CameraIntrinsics, stride: float):
    """Back-project ``stride * (cell + offset)`` at ``depth``.

    ``cell`` and ``offsets`` are ``(x, y)`` pairs (column first).
    """
    if not depth > 0:
        raise GeometryError(f"depth must be positive, got {depth}")
    u = stride * (cell[0] + offsets[0])
    v = stride * (cell[1] + offsets[1])
    ray = k.K_inv @ np.array([u, v, 1.0])
    out = ray * depth
    out[2] = depth
    return out


def ry_to_theta(ry: float, c) -> float:
    if c[2] <= 0:
        raise GeometryError("observation angle needs positive depth")
    return wrap_angle(ry - math.atan2(c[0], c[2]))


def theta_to_ry(theta: float, c) -> float:
    if c[2] <= 0:
        raise GeometryError("observation angle needs positive depth")
    return wrap_angle(theta + math.atan2(c[0], c[2]))


# ---------------------------------------------------------------- polygon IoU


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _ccw(poly: np.ndarray) -> np.ndarray:
    x, y = poly[:, 0], poly[:, 1]
    signed = np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))
    return poly if signed >= 0 else poly[::-1]


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: part of ``subject`` inside the convex ``clip``."""
    clip = _ccw(clip)
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_cross_point(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                if sp > 0:
                    out.append(_cross_point(prev, cur, sp, sc))
            prev, sp = cur, sc
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection(a: Box3D, b: Box3D) -> float:
    return polygon_area(clip_polygon(a.footprint(), b.footprint()))


def iou_bev(a: Box3D, b: Box3D) -> float:
    inter = bev_intersection(a, b)
    union = a.l * a.w + b.l * b.w - inter
    if inter <= 0 or union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def iou_3d(a: Box3D, b: Box3D) -> float:
    a0, a1 = a.y_range()
    b0, b1 = b.y_range()
    overlap_h = min(a1, b1) - max(a0, b0)
    if overlap_h <= 0:
        return 0.0
    inter = bev_intersection(a, b) * overlap_h
    union = a.l * a.w * a.h + b.l * b.w * b.h - inter
    if inter <= 0 or union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def box_2d(box: Box3D, k: CameraIntrinsics, image_size=None) -> tuple[float, float, float, float]:
    """Image-plane bounding box of the projected corners, optionally clipped."""
    uv = project_points(corners_3d(box), k)
    left, top = uv.min(axis=0)
    right, bottom = uv.max(axis=0)
    if image_size is not None:
        width, height = image_size
        left, right = np.clip([left, right], 0, width)
        top, bottom = np.clip([top, bottom], 0, height)
    return float(left), float(top), float(right), float(bottom)
