import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iafa import geometry as geo
from iafa import losses as L
from iafa import targets as TG
from iafa.errors import ConfigurationError, InputError
from iafa.gradcheck import CASES, check_case
from iafa.tensor import Tape, Tensor

from oracles import brute_force_radius

K = geo.CameraIntrinsics.from_params(80.0, 80.0, 64.0, 16.0)
MEAN = TG.DEFAULT_MEAN_DIMS["Car"]


# ---------------------------------------------------------------- codecs


def test_depth_codec_values():
    assert TG.decode_depth(0.0) == 12.5
    assert TG.decode_depth(1.0) == 25.0 and TG.decode_depth(-1.0) == 0.0
    grid = np.linspace(-1, 1, 201)[1:]  # depth 0 cannot be encoded
    assert np.max(np.abs(TG.encode_depth(TG.decode_depth(grid)) - grid)) < 1e-12


def test_depth_encode_saturates_with_warning():
    with pytest.warns(RuntimeWarning):
        assert TG.encode_depth(30.0) == 1.0


def test_dims_codec():
    np.testing.assert_array_equal(TG.decode_dims(np.zeros(3), MEAN), MEAN)
    np.testing.assert_allclose(TG.decode_dims(np.full(3, math.log(2)), MEAN), 2 * np.array(MEAN), rtol=1e-15)
    d = np.array([4.1, 1.7, 1.2])
    assert np.max(np.abs(TG.decode_dims(TG.encode_dims(d, MEAN), MEAN) - d)) < 1e-12
    with pytest.raises(InputError):
        TG.encode_dims([1.0, 0.0, 1.0], MEAN)


# ---------------------------------------------------------------- heatmap


def test_sigma_floor_and_errors():
    assert TG.gaussian_sigma((1e-4, 1e-4)) == 0.5
    with pytest.raises(InputError):
        TG.gaussian_radius((0, 3))


@pytest.mark.parametrize("extent", [(10, 10), (3, 7), (25, 4), (1.5, 1.5)])
def test_radius_matches_brute_force(extent):
    r = TG.gaussian_radius(extent, 0.7)
    assert abs(r - brute_force_radius(*extent, 0.7)) < 1e-4


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 50), st.floats(0.1, 50))
def test_sigma_monotone(w, h):
    assert TG.gaussian_sigma((2 * w, 2 * h)) >= TG.gaussian_sigma((w, h))


def test_splat_examples():
    heat = TG.splat_heatmap([(3, 2, 0)], [1.5], (6, 8, 1))
    assert heat[2, 3, 0] == 1.0
    assert heat[2, 3 + 1, 0] == pytest.approx(math.exp(-1 / (2 * 1.5**2)))
    # a point at distance sigma
    h2 = TG.splat_heatmap([(2, 2, 0)], [1.0], (5, 5, 1))
    assert h2[2, 3, 0] == pytest.approx(math.exp(-0.5), abs=1e-15)
    with pytest.raises(InputError):
        TG.splat_heatmap([(8, 0, 0)], [1.0], (6, 8, 1))


def test_splat_overlap_is_max_not_sum():
    a = TG.splat_heatmap([(2, 3, 0)], [2.0], (7, 9, 1))
    b = TG.splat_heatmap([(6, 3, 0)], [1.2], (7, 9, 1))
    both = TG.splat_heatmap([(2, 3, 0), (6, 3, 0)], [2.0, 1.2], (7, 9, 1))
    np.testing.assert_array_equal(both, np.maximum(a, b))
    rev = TG.splat_heatmap([(6, 3, 0), (2, 3, 0)], [1.2, 2.0], (7, 9, 1))
    np.testing.assert_array_equal(both, rev)


# ---------------------------------------------------------------- targets


def _boxes(rng, n):
    """Random in-frame cars with distinct center cells (one target per cell)."""
    while True:
        boxes = _raw_boxes(rng, n)
        cells = {TG.encode_attributes(b, K, 4, MEAN)[0] for b in boxes}
        if len(cells) == n:
            return boxes


def _raw_boxes(rng, n):
    out = []
    for _ in range(n):
        z = rng.uniform(5, 24)
        u = rng.uniform(8, 120)
        x = (u - 64) * z / 80
        out.append(geo.Box3D((x, 1.65, z), tuple(np.array(MEAN) * rng.uniform(0.9, 1.1, 3)), rng.uniform(-3, 3)))
    return out


def test_target_invariants():
    rng = np.random.default_rng(0)
    boxes = _boxes(rng, 4)
    masks = {i: np.zeros((48, 128), bool) for i in range(4)}
    for i in range(4):
        masks[i][8 * i : 8 * i + 4, 10:20] = True
    t = TG.build_targets(boxes, [0] * 4, K, (128, 48), TG.TargetConfig(), masks)
    assert t.heatmap.shape == (12, 32, 1)
    assert np.all((t.heatmap >= 0) & (t.heatmap <= 1))
    for c in t.centers:
        assert t.heatmap[c.cell[1], c.cell[0], c.class_id] == 1.0
        assert 0 <= c.offsets[0] < 1 and 0 <= c.offsets[1] < 1
    assert t.interior_shape == (6, 16)
    assert all(m.shape == (6, 16) and m.any() for m in t.masks.values())


def test_pool_mask_is_any():
    m = np.zeros((8, 8), bool)
    m[5, 2] = True
    p = TG.pool_mask(m, 4)
    assert p.tolist() == [[False, False], [True, False]]


@pytest.mark.slow
def test_perfect_outputs_decode_exactly():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        boxes = _boxes(rng, 3)
        t = TG.build_targets(boxes, [0] * 3, K, (128, 48))
        _, reg = TG.perfect_outputs(t)
        for c in t.centers:
            box = TG.decode_attributes(reg[c.cell[1], c.cell[0]], c.cell, K, 4, MEAN)
            worst = max(worst, np.max(np.abs(geo.corners_3d(box) - geo.corners_3d(c.box))))
    assert worst < 1e-9


def test_decode_clamps_negative_depth():
    attrs = np.zeros(8)
    attrs[TG.COS] = 1.0
    attrs[TG.DEPTH] = -1.5
    with pytest.warns(RuntimeWarning):
        box = TG.decode_attributes(attrs, (3, 3), K, 4, MEAN)
    assert box.centroid()[2] == pytest.approx(0.1)


# ---------------------------------------------------------------- losses


def test_centerness_near_perfect():
    target = np.zeros((4, 5, 1))
    target[1, 2, 0] = 1.0
    pred = np.where(target == 1, 1 - 1e-6, 1e-6)
    assert L.centerness_focal_loss(Tensor(pred), target).item() < 1e-4


def test_centerness_single_positive_half():
    target = np.zeros((1, 1, 1)) + 1.0
    val = L.centerness_focal_loss(Tensor(np.full((1, 1, 1), 0.5)), target).item()
    assert val == pytest.approx(-(0.5**2) * math.log(0.5), abs=1e-15)


def test_centerness_gradients():
    for trial in range(20):
        rng = np.random.default_rng(300 + trial)
        loss, tensors = CASES["centerness_focal_loss"](rng)
        assert check_case(loss, tensors, rng) < 1e-5


def _targets_for(boxes):
    return TG.build_targets(boxes, [0] * len(boxes), K, (128, 48))


def test_corners_loss_zero_at_truth():
    t = _targets_for(_boxes(np.random.default_rng(2), 3))
    attrs = np.stack([c.attributes for c in t.centers])
    assert L.corners_regression_loss(Tensor(attrs), t, K, 4, [MEAN]).item() < 1e-20


def test_corners_loss_one_metre_shift():
    box = geo.Box3D((0.5, 1.65, 10.0), MEAN, 0.4)
    t = _targets_for([box])
    shifted = geo.Box3D((1.5, 1.65, 10.0), MEAN, 0.4)
    _, attrs = TG.encode_attributes(shifted, K, 4, MEAN)
    u, v = geo.project_center(shifted, K)
    cell = t.centers[0].cell
    attrs[TG.OFFSET_X] = u / 4 - cell[0]
    attrs[TG.OFFSET_Y] = v / 4 - cell[1]
    val = L.corners_regression_loss(Tensor(attrs[None]), t, K, 4, [MEAN]).item()
    assert val == pytest.approx(1 / 6, abs=1e-12)


def test_corners_loss_gradients():
    for trial in range(20):
        rng = np.random.default_rng(400 + trial)
        loss, tensors = CASES["corners_regression_loss"](rng)
        assert check_case(loss, tensors, rng) < 1e-4


def test_mask_loss_examples():
    g = np.full((4, 4), 1e-6)
    fg = np.zeros((1, 4), bool)
    fg[0, [1, 2]] = True
    g[0, [1, 2]] = 1 - 1e-6
    assert L.mask_focal_loss(Tensor(g), [0], fg).item() < 1e-5
    assert L.mask_focal_loss(Tensor(g), [0], fg, background=True).item() < 1e-5
    half = np.full((2, 2), 0.5)
    one = np.array([[True, False]])
    assert L.mask_focal_loss(Tensor(half), [0], one).item() == pytest.approx(-(0.5**2) * math.log(0.5))
    with pytest.raises(InputError):
        L.mask_focal_loss(Tensor(half), [0], np.zeros((1, 2), bool))


def test_mask_loss_gradients_reach_branches():
    for trial in range(10):
        rng = np.random.default_rng(500 + trial)
        loss, tensors = CASES["mask_focal_loss"](rng)
        assert check_case(loss, tensors, rng) < 1e-4


def test_total_loss_weights():
    a, b, c = Tensor(1.5), Tensor(0.25), Tensor(2.0)
    assert L.total_loss((a, b, c), L.LossWeights(1, 0, 0)).item() == 1.5
    assert L.total_loss((a, b, c), L.LossWeights(1, 1, 1)).item() == 3.75
    k = 3.0
    assert L.total_loss((a, b, c), L.LossWeights(k, 2 * k, k)).item() == pytest.approx(
        k * L.total_loss((a, b, c), L.LossWeights(1, 2, 1)).item()
    )
    with pytest.raises(ConfigurationError):
        L.LossWeights(1, -1, 0)
    with pytest.raises(ConfigurationError):
        L.LossWeights(0, 0, 0)
    with pytest.raises(InputError):
        L.total_loss((Tensor(float("nan")), b, c), L.LossWeights())


def test_losses_nonnegative_random():
    rng = np.random.default_rng(7)
    for _ in range(20):
        target = rng.uniform(0, 0.9, (3, 4, 1))
        target[0, 0, 0] = 1
        assert L.centerness_focal_loss(Tensor(rng.uniform(0.01, 0.99, (3, 4, 1))), target).item() >= 0
        g = rng.uniform(0.01, 0.99, (5, 5))
        fg = (rng.uniform(size=(1, 5)) < 0.5) | np.eye(5, dtype=bool)[1:2]
        assert L.mask_focal_loss(Tensor(g), [1], fg, background=True).item() >= 0


def test_smooth_l1_transition():
    v = L.smooth_l1(Tensor(np.array([[0.5, 2.0]])), np.zeros((1, 2))).item()
    assert v == pytest.approx((0.125 + 1.5) / 2)
    for trial in range(10):
        rng = np.random.default_rng(600 + trial)
        loss, tensors = CASES["smooth_l1"](rng)
        assert check_case(loss, tensors, rng) < 1e-6


def test_gradient_zero_outside_clamp():
    target = np.zeros((1, 2, 1))
    target[0, 0, 0] = 1
    pred = Tensor(np.array([[[1.0], [0.0]]]), requires_grad=True)
    with Tape() as tape, warnings.catch_warnings():
        warnings.simplefilter("error")
        loss = L.centerness_focal_loss(pred, target)
    tape.backward(loss)
    np.testing.assert_array_equal(pred.grad, 0.0)
