"""KITTI-format labels and calibration, PGM instance masks, synthetic scenes."""
from __future__ import annotations

import colorsys
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from .errors import GenerationError, InputError, ParseError
from .targets import DEFAULT_MEAN_DIMS, TargetConfig, TargetMaps, build_targets

log = logging.getLogger(__name__)

DONT_CARE = "DontCare"


# ---------------------------------------------------------------- labels


@dataclass
class KittiLabel:
    cls: str
    truncation: float
    occlusion: int
    alpha: float
    bbox: tuple[float, float, float, float]  # left, top, right, bottom
    dims: tuple[float, float, float]  # h, w, l
    location: tuple[float, float, float]  # bottom center, camera frame
    rotation_y: float
    score: float | None = None

    @property
    def dont_care(self) -> bool:
        return self.cls == DONT_CARE

    @property
    def height_2d(self) -> float:
        return self.bbox[3] - self.bbox[1]

    def box3d(self) -> geo.Box3D:
        h, w, l = self.dims
        return geo.Box3D(self.location, (l, w, h), self.rotation_y)

    @classmethod
    def from_box(cls, name, box: geo.Box3D, k: geo.CameraIntrinsics, image_size=None,
                 score=None, truncation=0.0, occlusion=0):
        centroid = box.centroid()
        alpha = geo.ry_to_theta(box.ry, centroid)
        bbox = geo.box_2d(box, k, image_size)
        return cls(name, truncation, occlusion, alpha, bbox, (box.h, box.w, box.l), box.c, box.ry, score)


def _parse_line(line: str, lineno: int, source: str | None) -> KittiLabel:
    tok = line.split()
    if len(tok) not in (15, 16):
        raise ParseError(f"expected 15 or 16 fields, got {len(tok)}", lineno, source)
    try:
        nums = [float(t) for t in tok[1:]]
    except ValueError as e:
        raise ParseError(f"unparsable number ({e})", lineno, source) from None
    if not all(math.isfinite(v) for v in nums):
        raise ParseError("non-finite value", lineno, source)
    lab = KittiLabel(
        cls=tok[0],
        truncation=nums[0],
        occlusion=int(nums[1]),
        alpha=nums[2],
        bbox=tuple(nums[3:7]),
        dims=tuple(nums[7:10]),
        location=tuple(nums[10:13]),
        rotation_y=nums[13],
        score=nums[14] if len(nums) == 15 else None,
    )
    left, top, right, bottom = lab.bbox
    if not (right > left and bottom > top):
        raise ParseError(f"degenerate 2D box {lab.bbox}", lineno, source)
    if not lab.dont_care and min(lab.dims) <= 0:
        raise ParseError(f"non-positive dimensions {lab.dims}", lineno, source)
    return lab


def parse_label_file(text: str, source: str | None = None) -> list[KittiLabel]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            out.append(_parse_line(line, lineno, source))
    return out


def _f(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def format_label(lab: KittiLabel, detection: bool = False) -> str:
    if detection:
        head = [lab.cls, "-1", "-1"]
    else:
        head = [lab.cls, _f(lab.truncation), str(int(lab.occlusion))]
    vals = [lab.alpha, *lab.bbox, *lab.dims, *lab.location, lab.rotation_y]
    parts = head + [_f(v) for v in vals]
    if lab.score is not None:
        parts.append(f"{lab.score:.6f}")
    return " ".join(parts)


def write_label_file(labels, detection: bool = False) -> str:
    return "".join(format_label(lab, detection) + "\n" for lab in labels)


def read_labels(path) -> list[KittiLabel]:
    path = Path(path)
    return parse_label_file(path.read_text(encoding="utf-8"), str(path))


# ---------------------------------------------------------------- calibration


def parse_calib(text: str, source: str | None = None) -> geo.CameraIntrinsics:
    """Camera matrix from the left 3x3 block of ``P2`` (translation ignored)."""
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.startswith("P2:"):
            try:
                vals = [float(t) for t in line[3:].split()]
            except ValueError:
                raise ParseError("unparsable P2 entry", lineno, source) from None
            if len(vals) != 12:
                raise ParseError(f"P2 needs 12 numbers, got {len(vals)}", lineno, source)
            P = np.array(vals).reshape(3, 4)
            try:
                return geo.CameraIntrinsics(P[:, :3])
            except geo.GeometryError as e:
                raise ParseError(str(e), lineno, source) from None
    raise ParseError("no P2 row", None, source)


def format_calib(k: geo.CameraIntrinsics) -> str:
    P = np.zeros((3, 4))
    P[:, :3] = k.K
    row = " ".join(f"{v:.12e}" for v in P.reshape(-1))
    lines = [f"P{i}: {row}" for i in range(4)]
    lines.append("R0_rect: " + " ".join(f"{v:.12e}" for v in np.eye(3).reshape(-1)))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- PGM masks


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise InputError(f"PGM images are single channel, got {img.shape}")
    data = np.clip(img, 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    """``image`` is (h, w, 3) in [0, 1]."""
    data = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


_PNM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    pos = 0
    fields = []
    for _ in range(4):
        m = _PNM_TOKEN.match(buf, pos)
        if not m:
            raise ParseError("truncated PGM header", source=str(path))
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise ParseError(f"not a binary PGM (magic {fields[0]!r})", source=str(path))
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}", source=str(path))
    pos += 1  # single whitespace byte after maxval
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).copy()


def load_instance_masks(mask_dir, labels, image_size=None) -> dict[int, np.ndarray]:
    """Boolean masks keyed by label index, from ``index.json`` + PGM files.

    ``image_size`` is ``(width, height)``; when given, every mask must match it.
    """
    mask_dir = Path(mask_dir)
    index_path = mask_dir / "index.json"
    if not index_path.exists():
        raise InputError(f"{index_path}: missing mask index")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    out: dict[int, np.ndarray] = {}
    for name, obj in sorted(index.items()):
        if not isinstance(obj, int) or not 0 <= obj < len(labels):
            raise InputError(f"{name}: object index {obj} not in label file ({len(labels)} objects)")
        img = read_pgm(mask_dir / name)
        if image_size is not None and img.shape != (image_size[1], image_size[0]):
            raise InputError(f"{name}: mask {img.shape[::-1]} does not match image {tuple(image_size)}")
        if not np.isin(img, (0, 255)).all():
            raise InputError(f"{name}: mask values must be 0 or 255")
        mask = img == 255
        if not mask.any():
            raise InputError(f"{name}: empty instance mask")
        out[obj] = mask
    return out


def write_instance_masks(mask_dir, masks: dict[int, np.ndarray]) -> None:
    mask_dir = Path(mask_dir)
    mask_dir.mkdir(parents=True, exist_ok=True)
    index = {}
    for obj, mask in sorted(masks.items()):
        name = f"{obj:03d}.pgm"
        write_pgm(mask_dir / name, np.where(mask, 255, 0))
        index[name] = obj
    (mask_dir / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- synthetic scenes


@dataclass(frozen=True)
class SceneConfig:
    width: int = 128
    height: int = 48
    focal: float = 80.0
    principal: tuple[float, float] = (64.0, 16.0)
    camera_height: float = 1.65
    object_count: tuple[int, int] = (2, 4)
    depth_range: tuple[float, float] = (4.0, 24.0)
    dims_jitter: float = 0.1
    occlusion_pairs: int = 0  # rear objects whose center must land on a nearer object
    min_visible: int = 12  # pixels
    margin: float = 4.0  # keep projected centers this far from the border
    cls: str = "Car"
    targets: TargetConfig = TargetConfig()

    def intrinsics(self) -> geo.CameraIntrinsics:
        return geo.CameraIntrinsics.from_params(self.focal, self.focal, *self.principal)


@dataclass
class SyntheticScene:
    seed: int
    config: SceneConfig
    intrinsics: geo.CameraIntrinsics
    boxes: list[geo.Box3D]
    classes: list[str]
    image: np.ndarray  # (h, w, 3) in [0, 1]
    masks: list[np.ndarray]  # full-resolution visible masks
    hull_masks: list[np.ndarray]
    targets: TargetMaps = field(repr=False)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.config.width, self.config.height

    def labels(self) -> list[KittiLabel]:
        out = []
        w, h = self.image_size
        for i, (box, name) in enumerate(zip(self.boxes, self.classes)):
            hull = self.hull_masks[i].sum()
            vis = self.masks[i].sum()
            frac = 1.0 - vis / hull if hull else 1.0
            occ = 0 if frac < 0.1 else 1 if frac < 0.5 else 2
            out.append(KittiLabel.from_box(name, box, self.intrinsics, (w, h),
                                           truncation=_truncation(box, self.intrinsics, (w, h)),
                                           occlusion=occ))
        return out


def _truncation(box, k, image_size) -> float:
    uv = geo.project_points(geo.corners_3d(box), k)
    from scipy.spatial import ConvexHull

    hull = uv[ConvexHull(uv).vertices]
    w, h = image_size
    rect = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64)
    total = geo.polygon_area(hull)
    inside = geo.polygon_area(geo.clip_polygon(hull, rect))
    return float(min(max(1.0 - inside / total, 0.0), 1.0)) if total > 0 else 1.0


# face shading factors: -x, +x, -y (top), +y (bottom), -z, +z in the box frame
_SHADE = np.array([[0.70, 0.85], [1.00, 0.40], [0.75, 0.60]])


def pixel_rays(k: geo.CameraIntrinsics, width: int, height: int) -> np.ndarray:
    """(h, w, 3) ray directions through pixel centers, z component 1."""
    vv, uu = np.mgrid[0:height, 0:width] + 0.5
    pix = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    return pix @ k.K_inv.T


def ray_box_hits(rays: np.ndarray, box: geo.Box3D):
    """Entry distance along each ray (``inf`` on a miss) and the entry face id."""
    c, s = math.cos(box.ry), math.sin(box.ry)
    R = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    centroid = box.centroid()
    origin = R.T @ (-centroid)
    d = rays @ R  # rows are R^T d
    half = np.array([box.l, box.h, box.w]) / 2
    d = np.where(np.abs(d) < 1e-12, 1e-12, d)
    t1 = (-half - origin) / d
    t2 = (half - origin) / d
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_near = tmin.max(axis=-1)
    t_far = tmax.min(axis=-1)
    axis = tmin.argmax(axis=-1)
    # entering through the face whose outward normal opposes the ray
    sign = (np.take_along_axis(d, axis[..., None], -1)[..., 0] < 0).astype(int)
    hit = (t_near <= t_far) & (t_far > 0)
    return np.where(hit, t_near, np.inf), axis * 2 + sign


def render(k, width, height, boxes, albedos):
    """Painter-free z-buffer render; returns image, per-object visible and full masks."""
    rays = pixel_rays(k, width, height)
    py = k.principal_point[1]
    rows = np.arange(height)[:, None] + 0.5
    ground = np.where(rows < py, 0.72, 0.30 + 0.35 * (rows - py) / max(height - py, 1))
    image = np.broadcast_to(ground[..., None] * np.array([0.85, 0.9, 1.0]), (height, width, 3)).copy()
    depth = np.full((height, width), np.inf)
    owner = np.full((height, width), -1)
    faces = np.zeros((height, width), dtype=int)
    hulls = []
    for i, box in enumerate(boxes):
        t, face = ray_box_hits(rays, box)
        hulls.append(np.isfinite(t))
        nearer = t < depth
        depth = np.where(nearer, t, depth)
        owner = np.where(nearer, i, owner)
        faces = np.where(nearer, face, faces)
    for i, albedo in enumerate(albedos):
        sel = owner == i
        shade = _SHADE.reshape(-1)[faces[sel]]
        image[sel] = shade[:, None] * np.asarray(albedo)[None]
    visible = [owner == i for i in range(len(boxes))]
    return image, visible, hulls


def misaligned_pairs(scene: SyntheticScene) -> list[tuple[int, int]]:
    """``(i, j)`` where object ``i``'s projected center lies in ``j``'s visible mask."""
    out = []
    h, w = scene.config.height, scene.config.width
    for i, box in enumerate(scene.boxes):
        u, v = geo.project_center(box, scene.intrinsics)
        r, c = int(math.floor(v)), int(math.floor(u))
        if not (0 <= r < h and 0 <= c < w):
            continue
        for j, m in enumerate(scene.masks):
            if j != i and m[r, c]:
                out.append((i, j))
    return out


def _sample_box(rng, cfg: SceneConfig, depth, u=None) -> geo.Box3D:
    mean = np.array(DEFAULT_MEAN_DIMS.get(cfg.cls, DEFAULT_MEAN_DIMS["Car"]))
    dims = mean * (1 + cfg.dims_jitter * rng.uniform(-1, 1, 3))
    if u is None:
        u = rng.uniform(cfg.margin, cfg.width - cfg.margin)
    cx = (u - cfg.principal[0]) * depth / cfg.focal
    ry = rng.uniform(-math.pi, math.pi)
    return geo.Box3D((cx, cfg.camera_height, depth), tuple(dims), ry)


def _distinct_albedos(rng, n):
    hues = []
    while len(hues) < n:
        hue = rng.uniform()
        if all(min(abs(hue - o), 1 - abs(hue - o)) > 0.08 for o in hues):
            hues.append(hue)
    return [colorsys.hsv_to_rgb(hh, rng.uniform(0.55, 0.9), rng.uniform(0.7, 1.0)) for hh in hues]


def _valid(cfg: SceneConfig, k, boxes, visible) -> bool:
    seen = set()
    heads = []
    rows, cols = cfg.height // cfg.targets.stride, cfg.width // cfg.targets.stride
    for i, box in enumerate(boxes):
        corners = geo.corners_3d(box)
        if corners[:, 2].min() < 0.5:
            return False
        u, v = geo.project_center(box, k)
        if not (cfg.margin <= u < cfg.width - cfg.margin and 0 <= v < cfg.height):
            return False
        ds = cfg.targets.stride * cfg.targets.interior_downscale
        cell = (int(u // ds), int(v // ds))
        if cell in seen:
            return False
        seen.add(cell)
        # equal unit peaks in touching head cells cannot both survive 3x3 peak extraction
        head = (int(u // cfg.targets.stride), int(v // cfg.targets.stride))
        if any(max(abs(head[0] - o[0]), abs(head[1] - o[1])) <= 1 for o in heads):
            return False
        heads.append(head)
        if not (0 <= int(u // cfg.targets.stride) < cols and 0 <= int(v // cfg.targets.stride) < rows):
            return False
        if visible[i].sum() < cfg.min_visible:
            return False
        for other in boxes[:i]:
            if geo.iou_bev(box, other) > 0:
                return False
    return True


def generate_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> SyntheticScene:
    """Deterministic occluded street scene; all randomness flows from ``seed``."""
    lo, hi = cfg.object_count
    d0, d1 = cfg.depth_range
    if not (1 <= lo <= hi) or not (0 < d0 < d1) or 2 * cfg.occlusion_pairs > hi:
        raise GenerationError(f"invalid scene configuration {cfg}")
    k = cfg.intrinsics()
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        n = int(rng.integers(max(lo, 2 * cfg.occlusion_pairs), hi + 1))
        boxes = []
        pairs = []
        for _p in range(cfg.occlusion_pairs):
            if d1 - d0 < 4:
                raise GenerationError("depth range too narrow for occlusion pairs")
            z_rear = rng.uniform(max(d0 + 4, d0 + (d1 - d0) / 2), d1)
            rear = _sample_box(rng, cfg, z_rear)
            u_rear, _ = geo.project_center(rear, k)
            z_front = rng.uniform(d0, z_rear - 3)
            half_px = 0.5 * cfg.focal * 1.6 / z_front
            front = _sample_box(rng, cfg, z_front, u_rear + rng.uniform(-0.6, 0.6) * half_px)
            pairs.append((len(boxes), len(boxes) + 1))
            boxes += [rear, front]
        while len(boxes) < n:
            boxes.append(_sample_box(rng, cfg, rng.uniform(d0, d1)))
        albedos = _distinct_albedos(rng, len(boxes))
        image, visible, hulls = render(k, cfg.width, cfg.height, boxes, albedos)
        if not _valid(cfg, k, boxes, visible):
            continue
        scene = SyntheticScene(seed, cfg, k, boxes, [cfg.cls] * len(boxes), image, visible, hulls, None)
        if pairs and not set(pairs) <= set(misaligned_pairs(scene)):
            continue
        cls_ids = [cfg.targets.class_index(c) for c in scene.classes]
        scene.targets = build_targets(boxes, cls_ids, k, scene.image_size, cfg.targets,
                                      dict(enumerate(visible)))
        if len(scene.targets.centers) != len(boxes):
            continue
        return scene
    raise GenerationError(f"could not place objects for seed {seed} after 1000 attempts")


def generate_dataset(n: int, seed: int, cfg: SceneConfig = SceneConfig()) -> list[SyntheticScene]:
    """``n`` scenes with per-scene seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [generate_scene(int(s), cfg) for s in seeds]


def write_dataset(scenes, root, with_masks: bool = True) -> list[str]:
    """Write scenes in the KITTI-style layout; returns the frame ids."""
    root = Path(root)
    for sub in ("label_2", "calib", "image_2"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    frames = []
    for i, scene in enumerate(scenes):
        frame = f"{i:06d}"
        frames.append(frame)
        (root / "label_2" / f"{frame}.txt").write_text(write_label_file(scene.labels()), encoding="utf-8")
        (root / "calib" / f"{frame}.txt").write_text(format_calib(scene.intrinsics), encoding="utf-8")
        write_ppm(root / "image_2" / f"{frame}.ppm", scene.image)
        if with_masks:
            write_instance_masks(root / "masks" / frame, dict(enumerate(scene.masks)))
    return frames
