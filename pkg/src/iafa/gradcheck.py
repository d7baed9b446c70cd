"""Randomized finite-difference checks for every differentiable op."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention as A
from . import losses as L
from . import tensor as T
from .detector import conv3x3
from .geometry import CameraIntrinsics, Box3D
from .targets import CenterTarget, TargetMaps, encode_attributes
from .tensor import Tape, Tensor

# a case builds (loss_fn, tensors_to_check); loss_fn() re-runs the forward pass
Case = tuple[Callable[[], Tensor], list[Tensor]]


def _leaf(rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _project(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(out * weights)`` as a tape op."""
    val = np.array((out.data * weights).sum())
    return T._record(val, (out,), lambda g: T._acc(out, g.reshape(-1)[0] * weights))


def _projected(rng, fn):
    weights = {}

    def loss():
        out = fn()
        if "w" not in weights:
            weights["w"] = rng.normal(size=out.shape)
        return _project(out, weights["w"])

    return loss


def _away_from_zero(rng, shape, gap=1e-3):
    x = rng.uniform(-1, 1, shape)
    return np.where(np.abs(x) < gap, gap * np.sign(x + 1e-300) * 2, x)


def case_matmul(rng) -> Case:
    m, k, n = rng.integers(1, 6, 3)
    a, b = _leaf(rng, (m, k)), _leaf(rng, (k, n))
    return _projected(rng, lambda: T.matmul(a, b)), [a, b]


def case_conv1x1(rng) -> Case:
    h, w, ci, co = rng.integers(1, 5, 4)
    x, wt, b = _leaf(rng, (h, w, ci)), _leaf(rng, (ci, co)), _leaf(rng, (co,))
    return _projected(rng, lambda: T.conv1x1(x, wt, b)), [x, wt, b]


def case_relu(rng) -> Case:
    x = Tensor(_away_from_zero(rng, tuple(rng.integers(1, 5, 3))), requires_grad=True)
    return _projected(rng, lambda: T.relu(x)), [x]


def case_sigmoid(rng) -> Case:
    x = _leaf(rng, tuple(rng.integers(1, 5, 3)), -4, 4)
    return _projected(rng, lambda: T.sigmoid(x)), [x]


def case_tanh_channel(rng) -> Case:
    shape = tuple(rng.integers(1, 4, 2)) + (8,)
    x = _leaf(rng, shape, -2, 2)
    return _projected(rng, lambda: T.tanh_channel(x, 2)), [x]


def case_group_norm(rng) -> Case:
    groups = int(rng.integers(1, 5))
    c = groups * int(rng.integers(1, 4))
    h, w = rng.integers(1, 4, 2)
    if h * w * (c // groups) < 2:
        w = 2
    x = _leaf(rng, (h, w, c), -2, 2)
    gam, bet = _leaf(rng, (c,), 0.5, 1.5), _leaf(rng, (c,))
    return _projected(rng, lambda: T.group_norm(x, groups, gam, bet)), [x, gam, bet]


def case_resample(rng) -> Case:
    h, w = rng.integers(1, 6, 2)
    oh, ow = rng.integers(1, 7, 2)
    x = _leaf(rng, (h, w, int(rng.integers(1, 3))))
    return _projected(rng, lambda: T.resample_bilinear(x, int(oh), int(ow))), [x]


def case_row_normalize(rng) -> Case:
    # a single column normalizes to a constant, leaving nothing to check
    a = _leaf(rng, (int(rng.integers(1, 6)), int(rng.integers(2, 6))), 0.05, 1.0)
    return _projected(rng, lambda: T.row_normalize(a)), [a]


def case_sigmoid_row_normalize(rng) -> Case:
    s = _leaf(rng, (int(rng.integers(1, 6)), int(rng.integers(2, 6))), -4.0, 4.0)
    return _projected(rng, lambda: T.sigmoid_row_normalize(s)), [s]


def case_scale(rng) -> Case:
    x, s = _leaf(rng, tuple(rng.integers(1, 4, 3))), _leaf(rng, (1,))
    return _projected(rng, lambda: T.scale(x, s)), [x, s]


def case_conv3x3(rng) -> Case:
    h, w = rng.integers(2, 6, 2)
    ci, co = rng.integers(1, 4, 2)
    stride = int(rng.integers(1, 3))
    x, wt, b = _leaf(rng, (h, w, ci)), _leaf(rng, (3, 3, ci, co)), _leaf(rng, (co,))
    return _projected(rng, lambda: conv3x3(x, wt, b, stride)), [x, wt, b]


def _small_iafa(rng, downscale=2):
    cfg = A.IafaConfig(channels=2, expansion=4, downscale=downscale, groups=8)
    params = A.init_params(cfg, rng)
    for p in params:
        p.tensor.data = p.tensor.data + rng.normal(0, 0.1, p.tensor.shape)
    params["iafa.alpha"].data[:] = rng.uniform(0.5, 1.5)
    return cfg, params


def case_branch_ab(rng) -> Case:
    cfg, params = _small_iafa(rng)
    x = _leaf(rng, (2, 3, cfg.channels))
    ts = [x] + [params[n] for n in params.names() if n.startswith("iafa.a.")]
    return _projected(rng, lambda: A.branch_ab(x, params, cfg, "a")), ts


def case_relation_map(rng) -> Case:
    f1, f2 = _leaf(rng, (2, 2, 4)), _leaf(rng, (2, 2, 4))
    return _projected(rng, lambda: A.relation_map(f1, f2).G), [f1, f2]


def case_iafa(rng) -> Case:
    cfg, params = _small_iafa(rng)
    x = _leaf(rng, (4, 4, cfg.channels))
    ts = [x] + [p.tensor for p in params]
    return _projected(rng, lambda: A.iafa_forward(x, params, cfg)[0]), ts


def case_centerness(rng) -> Case:
    shape = tuple(rng.integers(2, 5, 2)) + (int(rng.integers(1, 3)),)
    target = rng.uniform(0, 0.9, shape)
    target.flat[rng.choice(target.size, size=min(2, target.size), replace=False)] = 1.0
    pred = _leaf(rng, shape, 0.02, 0.98)
    return (lambda: L.centerness_focal_loss(pred, target)), [pred]


_K = CameraIntrinsics.from_params(80.0, 78.0, 64.0, 16.0, skew=0.5)


def _random_targets(rng, n):
    centers = []
    for _ in range(n):
        z = rng.uniform(5, 20)
        box = Box3D((rng.uniform(-4, 4), 1.6, z), tuple(rng.uniform(1, 4, 3)), rng.uniform(-np.pi, np.pi))
        cell, attrs = encode_attributes(box, _K, 4, (3.9, 1.6, 1.5))
        centers.append(CenterTarget(cell, 0, attrs, box))
    return TargetMaps(np.zeros((1, 1, 1)), centers)


def case_corners_loss(rng) -> Case:
    n = int(rng.integers(1, 4))
    targets = _random_targets(rng, n)
    true = np.stack([c.attributes for c in targets.centers])
    attrs = Tensor(true + rng.normal(0, 0.15, true.shape), requires_grad=True)
    return (lambda: L.corners_regression_loss(attrs, targets, _K, 4, [(3.9, 1.6, 1.5)])), [attrs]


def case_mask_loss(rng) -> Case:
    cfg, params = _small_iafa(rng, downscale=1)
    x = _leaf(rng, (3, 3, cfg.channels))
    d = 9
    n = int(rng.integers(1, 3))
    rows = rng.choice(d, size=n, replace=False)
    masks = rng.uniform(size=(n, d)) < 0.4
    masks[np.arange(n), rows] = True
    background = bool(rng.integers(0, 2))

    def loss():
        f1 = A.branch_ab(x, params, cfg, "a")
        f2 = A.branch_ab(x, params, cfg, "b")
        g = A.relation_map(f1, f2)
        return L.mask_focal_loss(g.affinity, rows, masks, background=background)

    ts = [x] + [p.tensor for p in params if p.name != "iafa.alpha"]
    return loss, ts


def case_smooth_l1(rng) -> Case:
    shape = tuple(rng.integers(1, 4, 2))
    pred = Tensor(_away_from_zero(rng, shape) * 2, requires_grad=True)
    target = np.zeros(shape)
    # keep |pred - target| away from the smooth-L1 transition
    pred.data = np.where(np.abs(np.abs(pred.data) - 1) < 1e-3, pred.data * 1.1, pred.data)
    return (lambda: L.smooth_l1(pred, target)), [pred]


CASES: dict[str, Callable] = {
    "matmul": case_matmul,
    "conv1x1": case_conv1x1,
    "relu": case_relu,
    "sigmoid": case_sigmoid,
    "tanh_channel": case_tanh_channel,
    "group_norm": case_group_norm,
    "resample_bilinear": case_resample,
    "row_normalize": case_row_normalize,
    "sigmoid_row_normalize": case_sigmoid_row_normalize,
    "scale": case_scale,
    "conv3x3": case_conv3x3,
    "branch_ab": case_branch_ab,
    "relation_map": case_relation_map,
    "iafa_forward": case_iafa,
    "centerness_focal_loss": case_centerness,
    "corners_regression_loss": case_corners_loss,
    "mask_focal_loss": case_mask_loss,
    "smooth_l1": case_smooth_l1,
}


def check_case(loss_fn, tensors, rng, max_coords: int = 24, h: float = 1e-6) -> float:
    """Worst norm-wise relative error over ``tensors`` (random coordinate subsets)."""
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        size = t.data.size
        idx = np.arange(size) if size <= max_coords else rng.choice(size, max_coords, replace=False)
        numeric = T.numerical_grad(lambda: loss_fn().item(), t.data, idx, h)
        worst = max(worst, T.relative_error(analytic.reshape(-1)[idx], numeric))
    return worst


@dataclass
class OpReport:
    op: str
    trials: int
    worst: float
    worst_seed: int


def run_suite(seed: int = 0, trials: int = 100, ops=None) -> list[OpReport]:
    reports = []
    for i, name in enumerate(ops or CASES):
        worst, worst_seed = 0.0, seed
        for trial in range(trials):
            trial_seed = seed * 1_000_003 + i * 10_007 + trial
            rng = np.random.default_rng(trial_seed)
            loss_fn, tensors = CASES[name](rng)
            err = check_case(loss_fn, tensors, rng)
            if err >= worst:
                worst, worst_seed = err, trial_seed
        reports.append(OpReport(name, trials, worst, worst_seed))
    return reports
