"""Stride-4 center-point detector with an optional IAFA branch, and its trainer."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import losses as L
from . import tensor as T
from .attention import IafaConfig, RelationMap, iafa_forward, mask_mass
from .attention import init_params as init_iafa
from .errors import ConfigurationError, DimensionError, DivergenceError
from .targets import REG_CHANNELS, DEPTH, TargetConfig, TargetMaps, decode_attributes, pool_mask
from .tensor import Adam, ParamRegistry, Tape, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectorConfig:
    width: int = 128
    height: int = 48
    stages: tuple[tuple[int, int], ...] = ((16, 2), (32, 2), (64, 1), (64, 1))  # (channels, stride)
    head_channels: int = 256
    targets: TargetConfig = TargetConfig()
    iafa: IafaConfig = IafaConfig()
    score_threshold: float = 0.25
    top_k: int = 100
    heat_bias: float = -2.19  # initial heatmap response ~0.1

    def __post_init__(self):
        if self.width % 8 or self.height % 8:
            raise ConfigurationError(f"input {self.width}x{self.height} must be divisible by 8")
        if math.prod(s for _, s in self.stages) != self.stride:
            raise ConfigurationError("backbone strides must multiply to the output stride")
        if self.stages[-1][0] != self.iafa.channels:
            raise ConfigurationError("backbone width must equal the IAFA channel count")

    @property
    def stride(self) -> int:
        return self.targets.stride

    @property
    def n_classes(self) -> int:
        return len(self.targets.classes)

    @property
    def output_shape(self) -> tuple[int, int]:
        return self.height // self.stride, self.width // self.stride


@dataclass
class HeadOutputs:
    heatmap: Tensor  # (rows, cols, classes), post-sigmoid
    regression: Tensor  # (rows, cols, 8), tanh on the depth channel
    relation: RelationMap | None = None
    features: Tensor | None = None


@dataclass
class Detection:
    box: geo.Box3D
    cls: int
    score: float
    cell: tuple[int, int] = (0, 0)


# ---------------------------------------------------------------- 3x3 convolution


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Zero-padded 3x3 convolution; ``weight`` is (3, 3, c_in, c_out)."""
    h, w, cin = x.shape
    if weight.shape[:3] != (3, 3, cin):
        raise DimensionError(f"conv3x3 weight {weight.shape} vs input {x.shape}")
    cout = weight.shape[3]
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    xp = np.pad(x.data, ((1, 1), (1, 1), (0, 0)))
    taps = [(ky, kx) for ky in range(3) for kx in range(3)]
    cols = np.concatenate(
        [xp[ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] for ky, kx in taps], axis=-1
    ).reshape(ho * wo, 9 * cin)
    W = weight.data.reshape(9 * cin, cout)
    out = (cols @ W + bias.data).reshape(ho, wo, cout)

    def backward(g):
        G = g.reshape(ho * wo, cout)
        T._acc(weight, (cols.T @ G).reshape(weight.shape))
        T._acc(bias, G.sum(axis=0))
        if x.requires_grad:
            gc = (G @ W.T).reshape(ho, wo, 9, cin)
            gp = np.zeros_like(xp)
            for i, (ky, kx) in enumerate(taps):
                gp[ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += gc[:, :, i]
            x.accumulate(gp[1:-1, 1:-1])

    return T._record(out, (x, weight, bias), backward)


# ---------------------------------------------------------------- parameters


def init_params(cfg: DetectorConfig, seed: int = 0) -> ParamRegistry:
    rng = np.random.default_rng(seed)
    reg = ParamRegistry()
    cin = 3
    for i, (cout, _) in enumerate(cfg.stages):
        reg.add(f"backbone.{i}.w", rng.normal(0, math.sqrt(2.0 / (9 * cin)), (3, 3, cin, cout)), decay=True)
        reg.add(f"backbone.{i}.b", np.zeros(cout))
        cin = cout
    init_iafa(cfg.iafa, rng, reg)
    hc = cfg.head_channels
    for head, width in (("heat", cfg.n_classes), ("reg", REG_CHANNELS)):
        reg.add(f"{head}.conv1.w", rng.normal(0, math.sqrt(2.0 / cin), (cin, hc)), decay=True)
        reg.add(f"{head}.conv1.b", np.zeros(hc))
        reg.add(f"{head}.conv2.w", rng.normal(0, 0.01, (hc, width)), decay=True)
        reg.add(f"{head}.conv2.b", np.full(width, cfg.heat_bias) if head == "heat" else np.zeros(width))
    return reg


# ---------------------------------------------------------------- forward / decode


def backbone(image: Tensor, params: ParamRegistry, cfg: DetectorConfig) -> Tensor:
    x = image
    for i, (_, stride) in enumerate(cfg.stages):
        x = T.relu(conv3x3(x, params[f"backbone.{i}.w"], params[f"backbone.{i}.b"], stride))
    return x


def _head(x: Tensor, params: ParamRegistry, name: str) -> Tensor:
    y = T.relu(T.conv1x1(x, params[f"{name}.conv1.w"], params[f"{name}.conv1.b"]))
    return T.conv1x1(y, params[f"{name}.conv2.w"], params[f"{name}.conv2.b"])


def forward(image, params: ParamRegistry, cfg: DetectorConfig, use_iafa: bool = True) -> HeadOutputs:
    img = image if isinstance(image, Tensor) else Tensor(image)
    if img.shape != (cfg.height, cfg.width, 3):
        raise DimensionError(f"image {img.shape} does not match ({cfg.height}, {cfg.width}, 3)")
    x = T.add(img, Tensor(np.full(img.shape, -0.5)))
    feats = backbone(x, params, cfg)
    relation = None
    if use_iafa:
        feats, relation = iafa_forward(feats, params, cfg.iafa)
    heat = T.sigmoid(_head(feats, params, "heat"))
    reg = T.tanh_channel(_head(feats, params, "reg"), DEPTH)
    return HeadOutputs(heat, reg, relation, feats)


def _peaks(heat: np.ndarray) -> np.ndarray:
    """Cells equal to their 3x3 neighborhood max; plateaus keep the lowest flat index."""
    rows, cols = heat.shape
    pad = np.pad(heat, 1, constant_values=-np.inf)
    keep = np.ones_like(heat, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == dx == 0:
                continue
            nb = pad[1 + dy : 1 + dy + rows, 1 + dx : 1 + dx + cols]
            earlier = dy < 0 or (dy == 0 and dx < 0)
            keep &= (heat > nb) if earlier else (heat >= nb)
    return keep


def decode(outputs: HeadOutputs, k: geo.CameraIntrinsics, cfg: DetectorConfig) -> list[Detection]:
    heat = outputs.heatmap.data if isinstance(outputs.heatmap, Tensor) else np.asarray(outputs.heatmap)
    reg = outputs.regression.data if isinstance(outputs.regression, Tensor) else np.asarray(outputs.regression)
    rows, cols, n_cls = heat.shape
    cands = []
    for c in range(n_cls):
        hm = heat[:, :, c]
        keep = _peaks(hm) & (hm > cfg.score_threshold)
        for flat in np.flatnonzero(keep):
            cands.append((-hm.flat[flat], c, int(flat)))
    cands.sort()
    dets = []
    for neg_score, c, flat in cands[: cfg.top_k]:
        row, col = divmod(flat, cols)
        box = decode_attributes(reg[row, col], (col, row), k, cfg.stride, cfg.targets.mean_dims[c])
        dets.append(Detection(box, c, -neg_score, (col, row)))
    return dets


# ---------------------------------------------------------------- losses


@dataclass
class LossParts:
    center: Tensor
    reg: Tensor
    mask: Tensor
    total: Tensor

    def values(self) -> tuple[float, float, float, float]:
        return tuple(t.item() for t in (self.center, self.reg, self.mask, self.total))


def compute_losses(
    outputs: HeadOutputs,
    targets: TargetMaps,
    k: geo.CameraIntrinsics,
    cfg: DetectorConfig,
    weights: L.LossWeights,
    mask_background: bool = False,
) -> LossParts:
    center = L.centerness_focal_loss(outputs.heatmap, targets.heatmap)
    attrs = T.gather_pixels(outputs.regression, targets.flat_cells())
    reg = L.corners_regression_loss(attrs, targets, k, cfg.stride, cfg.targets.mean_dims)
    mask = Tensor(0.0)
    if outputs.relation is not None and targets.masks:
        idx = sorted(targets.masks)
        rows = [targets.interior_index(i) for i in idx]
        masks = [targets.masks[i].reshape(-1) for i in idx]
        mask = L.mask_focal_loss(outputs.relation.affinity, rows, masks, background=mask_background)
    total = L.total_loss((center, reg, mask), weights)
    return LossParts(center, reg, mask, total)


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 2.5e-4
    l1: float = 1e-7
    seed: int = 0
    use_iafa: bool = True
    weights: L.LossWeights = L.LossWeights()
    drops: tuple[float, float] = (0.5, 0.75)  # fractions of the run where lr /= 10
    mask_background: bool = True

    def lr_at(self, step: int) -> float:
        factor = sum(step >= int(f * self.steps) for f in self.drops)
        return self.lr * 0.1**factor


@dataclass
class TrainResult:
    params: ParamRegistry
    curve: list[tuple[int, float, float, float, float]] = field(default_factory=list)

    def epoch_means(self, epoch_len: int) -> list[tuple[float, float, float, float]]:
        arr = np.array([row[1:] for row in self.curve])
        return [tuple(arr[i : i + epoch_len].mean(axis=0)) for i in range(0, len(arr), epoch_len)]


def train(scenes, cfg: DetectorConfig, tcfg: TrainConfig, params: ParamRegistry | None = None,
          callback=None) -> TrainResult:
    """Adam, batch size 1, scenes visited in a seeded order each epoch."""
    if not scenes:
        raise ConfigurationError("training needs at least one scene")
    params = params if params is not None else init_params(cfg, tcfg.seed)
    opt = Adam(l1=tcfg.l1)
    rng = np.random.default_rng(tcfg.seed)
    order: list[int] = []
    result = TrainResult(params)
    for step in range(tcfg.steps):
        if not order:
            order = list(rng.permutation(len(scenes)))
        scene = scenes[order.pop()]
        with Tape() as tape:
            out = forward(scene.image, params, cfg, tcfg.use_iafa)
            parts = compute_losses(out, scene.targets, scene.intrinsics, cfg, tcfg.weights, tcfg.mask_background)
            vals = parts.values()
            if not all(math.isfinite(v) for v in vals):
                raise DivergenceError(step)
            tape.backward(parts.total)
        for p in params:
            if p.tensor.grad is None:
                p.tensor.grad = np.zeros_like(p.tensor.data)
        opt.step(params, tcfg.lr_at(step))
        result.curve.append((step, *vals))
        if callback is not None:
            callback(step, vals)
    return result


def predict(scene, params: ParamRegistry, cfg: DetectorConfig, use_iafa: bool = True):
    out = forward(scene.image, params, cfg, use_iafa)
    return out, decode(out, scene.intrinsics, cfg)


def match_iou(dets: list[Detection], boxes, classes=None) -> list[float]:
    """Best 3D IoU of any same-class detection, per ground-truth box."""
    out = []
    for i, gt in enumerate(boxes):
        best = 0.0
        for d in dets:
            if classes is None or d.cls == classes[i]:
                best = max(best, geo.iou_3d(d.box, gt))
        out.append(best)
    return out


def mean_train_iou(scenes, params: ParamRegistry, cfg: DetectorConfig, use_iafa: bool = True) -> float:
    ious = []
    for scene in scenes:
        _, dets = predict(scene, params, cfg, use_iafa)
        cls = [cfg.targets.class_index(c) for c in scene.classes]
        ious.extend(match_iou(dets, scene.boxes, cls))
    return float(np.mean(ious)) if ious else 0.0


def occluders(scene) -> dict[int, int]:
    """Map each occluded object to the object hiding most of its hull."""
    out = {}
    for i, hull in enumerate(scene.hull_masks):
        hidden = hull & ~scene.masks[i]
        best, best_px = -1, 0
        for j, m in enumerate(scene.masks):
            px = int((hidden & m).sum())
            if j != i and px > best_px:
                best, best_px = j, px
        if best >= 0:
            out[i] = best
    return out


def resolvable_occlusions(scene, cfg: DetectorConfig) -> dict[int, bool]:
    """Whether each occluded object's pooled mask has a cell its occluder's lacks.

    When it does not, no attention row can put more mass on the object than on
    the occluder, so the comparison in ``occlusion_attention`` is lost by construction.
    """
    factor = cfg.stride * scene.targets.interior_downscale
    return {i: bool((pool_mask(scene.masks[i], factor) & ~pool_mask(scene.masks[j], factor)).any())
            for i, j in sorted(occluders(scene).items())}


def occlusion_attention(scene, params: ParamRegistry, cfg: DetectorConfig) -> list[tuple[int, int, float, float]]:
    """``(object, occluder, own_mass, occluder_mass)`` for every occluded object.

    Masses are the attention row at the object's center summed over the
    interior-resolution masks of the object and of its occluder.
    """
    out = forward(scene.image, params, cfg, use_iafa=True)
    g = out.relation
    targets = scene.targets
    if len(targets.centers) != len(scene.boxes):
        raise DimensionError("scene targets do not cover every object")
    factor = cfg.stride * targets.interior_downscale
    rows = []
    for i, j in sorted(occluders(scene).items()):
        center = targets.interior_index(i)
        own = pool_mask(scene.masks[i], factor)
        occ = pool_mask(scene.masks[j], factor)
        rows.append((i, j, mask_mass(g, center, own), mask_mass(g, center, occ)))
    return rows
