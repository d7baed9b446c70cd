"""Instance-aware feature aggregation: relation map and enhanced features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import ParamRegistry, Tensor


@dataclass(frozen=True)
class IafaConfig:
    channels: int = 64
    expansion: int = 4
    downscale: int = 2
    groups: int = 8
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("channels", "expansion", "downscale", "groups"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.hidden % self.groups:
            raise ConfigurationError(
                f"{self.hidden} expanded channels not divisible by {self.groups} groups"
            )

    @property
    def hidden(self) -> int:
        return self.channels * self.expansion


@dataclass
class RelationMap:
    """Row-stochastic ``(d, d)`` map; row ``i`` is pixel ``i``'s attention.

    ``affinity`` keeps the sigmoid scores before row normalization; each entry
    is an independent probability that pixel ``j`` belongs with pixel ``i``,
    which is what mask supervision reads.
    """

    G: Tensor
    shape: tuple[int, int]  # interior (rows, cols)
    affinity: Tensor | None = None

    @property
    def d(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def values(self) -> np.ndarray:
        return self.G.data


def init_params(cfg: IafaConfig, rng: np.random.Generator, registry: ParamRegistry | None = None, prefix: str = "iafa") -> ParamRegistry:
    reg = registry if registry is not None else ParamRegistry()
    c, hid = cfg.channels, cfg.hidden
    for branch in ("a", "b"):
        p = f"{prefix}.{branch}"
        reg.add(f"{p}.conv1.w", rng.normal(0, np.sqrt(2.0 / c), (c, hid)), decay=True)
        reg.add(f"{p}.conv1.b", np.zeros(hid))
        reg.add(f"{p}.gn.scale", np.ones(hid))
        reg.add(f"{p}.gn.shift", np.zeros(hid))
        # std hid^-3/4 gives relation logits of roughly unit variance at init
        reg.add(f"{p}.conv2.w", rng.normal(0, hid**-0.75, (hid, hid)), decay=True)
        reg.add(f"{p}.conv2.b", np.zeros(hid))
    reg.add(f"{prefix}.alpha", np.zeros(1))
    return reg


def branch_ab(x: Tensor, params: ParamRegistry, cfg: IafaConfig, branch: str, prefix: str = "iafa") -> Tensor:
    """conv1x1 (C -> 4C), ReLU, group norm, conv1x1 (4C -> 4C)."""
    if x.data.ndim != 3 or x.shape[2] != cfg.channels:
        raise DimensionError(f"branch expects (h, w, {cfg.channels}), got {x.shape}")
    p = f"{prefix}.{branch}"
    y = T.conv1x1(x, params[f"{p}.conv1.w"], params[f"{p}.conv1.b"])
    y = T.relu(y)
    y = T.group_norm(y, cfg.groups, params[f"{p}.gn.scale"], params[f"{p}.gn.shift"], cfg.eps)
    return T.conv1x1(y, params[f"{p}.conv2.w"], params[f"{p}.conv2.b"])


def relation_map(f1: Tensor, f2: Tensor) -> RelationMap:
    if f1.shape != f2.shape or f1.data.ndim != 3:
        raise DimensionError(f"relation map inputs differ: {f1.shape} vs {f2.shape}")
    h, w, c = f1.shape
    a = T.reshape(f1, (h * w, c))
    b = T.reshape(f2, (h * w, c))
    logits = T.matmul(a, T.transpose(b))
    return RelationMap(T.sigmoid_row_normalize(logits), (h, w), T.sigmoid(logits))


def aggregate(g: RelationMap, x: Tensor) -> Tensor:
    h, w, c = x.shape
    if g.d != h * w or g.G.shape != (h * w, h * w):
        raise DimensionError(f"relation map of {g.G.shape} cannot aggregate {x.shape}")
    flat = T.reshape(x, (h * w, c))
    return T.reshape(T.matmul(g.G, flat), (h, w, c))


def iafa_forward(f_backbone: Tensor, params: ParamRegistry, cfg: IafaConfig, prefix: str = "iafa"):
    """Return ``(enhanced, relation_map)``; ``enhanced = f + alpha * up(G @ down(f))``."""
    if f_backbone.data.ndim != 3 or f_backbone.shape[2] != cfg.channels:
        raise DimensionError(f"expected (H, W, {cfg.channels}), got {f_backbone.shape}")
    H, W, _ = f_backbone.shape
    s = cfg.downscale
    if H % s or W % s:
        raise ConfigurationError(f"feature map {H}x{W} not divisible by {s}")
    h, w = H // s, W // s
    small = T.resample_bilinear(f_backbone, h, w) if s > 1 else f_backbone
    f1 = branch_ab(small, params, cfg, "a", prefix)
    f2 = branch_ab(small, params, cfg, "b", prefix)
    g = relation_map(f1, f2)
    agg = aggregate(g, small)
    if s > 1:
        agg = T.resample_bilinear(agg, H, W)
    enhanced = T.add(f_backbone, T.scale(agg, params[f"{prefix}.alpha"]))
    return enhanced, g


def attention_row_for_center(g: RelationMap, center: int) -> np.ndarray:
    if not 0 <= center < g.d:
        raise DimensionError(f"center index {center} outside 0..{g.d - 1}")
    return g.values[center].reshape(g.shape).copy()


def mask_mass(g: RelationMap, center: int, mask: np.ndarray) -> float:
    """Attention mass that ``center``'s row puts inside ``mask``."""
    row = attention_row_for_center(g, center)
    return float(row[np.asarray(mask, dtype=bool).reshape(g.shape)].sum())
