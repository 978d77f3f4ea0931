import math

import numpy as np
import pytest

from bcp_lab import autodiff as ad
from bcp_lab.loss import LossConfig, bcp_loss, per_voxel_ce, seg_loss, soft_seg_loss, weighted_dice
from bcp_lab.maskgen import Mask, gen_zero_centered
from bcp_lab.mixer import one_hot


def _probs(rng, shape):
    return ad.softmax_channels(ad.const(rng.normal(size=shape)))


def _perfect(y, K):
    return ad.const(one_hot(y, K, axis=1))


def test_ce_values():
    y = np.array([[[0, 1]]])
    q = ad.const(np.array([[[[1.0, math.exp(-1)]], [[0.0, 1 - math.exp(-1)]]]]).reshape(1, 2, 1, 2))
    # channel 0 holds q(class 0), channel 1 holds q(class 1)
    ce = per_voxel_ce(q, y).values
    assert ce.shape == (1, 1, 1, 2)
    assert ce[0, 0, 0, 0] == pytest.approx(0.0)
    assert ce[0, 0, 0, 1] == pytest.approx(-math.log(1 - math.exp(-1)))


def test_ce_is_minus_log_target_probability():
    q = ad.const(np.array([1 - math.exp(-1), math.exp(-1)]).reshape(1, 2, 1, 1))
    ce = per_voxel_ce(q, np.array([[[1]]]))
    assert ce.item() == pytest.approx(1.0)


def test_ce_label_shape_mismatch():
    with pytest.raises(ValueError):
        per_voxel_ce(ad.const(np.full((1, 2, 2, 2), 0.5)), np.zeros((1, 3, 2), int))


def test_ce_class_out_of_range():
    with pytest.raises(ValueError):
        per_voxel_ce(ad.const(np.full((1, 2, 1, 1), 0.5)), np.array([[[2]]]))


def test_ce_gradients(gradcheck):
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 3, 3, 3))
    y = rng.integers(0, 3, size=(2, 3, 3))
    fn = lambda z: ad.reduce_mean(per_voxel_ce(ad.softmax_channels(z), y))
    assert gradcheck(fn, {"z": logits}) < 1e-5


def test_dice_perfect_is_zero():
    y = np.random.default_rng(1).integers(0, 3, size=(2, 6, 6))
    assert weighted_dice(_perfect(y, 3), y).item() < 1e-6


def test_dice_uniform_prediction_closed_form():
    K, V = 3, 64
    y = np.ones((1, 8, 8), dtype=np.int64)
    q = ad.const(np.full((1, K, 8, 8), 1.0 / K))
    eps = 1e-5

    class1 = 1 - (2 * V / K + eps) / (V / K + V + eps)
    class2 = 1 - (0 + eps) / (V / K + 0 + eps)
    expected = (class1 + class2) / 2
    assert weighted_dice(q, y, eps=eps).item() == pytest.approx(expected, rel=1e-12)
    assert class1 == pytest.approx(1 - 2 / (K + 1), abs=1e-6)


def test_dice_hard_weights_equal_cropped_dice():
    rng = np.random.default_rng(2)
    q = _probs(rng, (1, 3, 8, 8))
    y = rng.integers(0, 3, size=(1, 8, 8))
    w = np.zeros((1, 1, 8, 8))
    w[..., 2:6, 1:5] = 1.0

    full = weighted_dice(q, y, w).item()
    cropped = weighted_dice(ad.const(q.values[..., 2:6, 1:5]), y[..., 2:6, 1:5]).item()
    assert full == pytest.approx(cropped, rel=1e-12)


def test_dice_zero_weights_contribute_nothing():
    rng = np.random.default_rng(3)
    q = _probs(rng, (1, 3, 4, 4))
    y = rng.integers(0, 3, size=(1, 4, 4))
    assert weighted_dice(q, y, np.zeros((1, 1, 4, 4))).item() == 0.0


def test_negative_weights_rejected():
    q = ad.const(np.full((1, 2, 2, 2), 0.5))
    with pytest.raises(ValueError):
        weighted_dice(q, np.zeros((1, 2, 2), int), -np.ones((1, 1, 2, 2)))


def _random_case(seed, shape=(2, 3, 8, 8)):
    rng = np.random.default_rng(seed)
    B, K, H, W = shape
    return (
        _probs(rng, shape),
        _probs(rng, shape),
        rng.integers(0, K, size=(B, H, W)),
        rng.integers(0, K, size=(B, H, W)),
    )


def test_total_is_sum_of_directions():
    q_in, q_out, y_in, y_out = _random_case(0)
    mask = gen_zero_centered((8, 8), 2 / 3)
    report = bcp_loss(q_in, q_out, y_in, y_out, mask, LossConfig())

    assert report.l_all == report.l_in + report.l_out
    assert report.total.item() == report.l_all
    assert report.is_finite()


def test_directions_recomputed_independently():
    q_in, q_out, y_in, y_out = _random_case(1)
    mask = gen_zero_centered((8, 8), 0.5)
    cfg = LossConfig(alpha=0.5)
    report = bcp_loss(q_in, q_out, y_in, y_out, mask, cfg)

    m = mask.bits.astype(np.float64)
    w_in = np.broadcast_to(m + 0.5 * (1 - m), (2, 1, 8, 8))
    w_out = np.broadcast_to((1 - m) + 0.5 * m, (2, 1, 8, 8))

    assert report.l_in == pytest.approx(seg_loss(q_in, y_in, w_in, cfg).item(), rel=1e-12)
    assert report.l_out == pytest.approx(seg_loss(q_out, y_out, w_out, cfg).item(), rel=1e-12)


def test_perfect_predictions():
    rng = np.random.default_rng(4)
    y_in = rng.integers(0, 3, size=(2, 8, 8))
    y_out = rng.integers(0, 3, size=(2, 8, 8))
    mask = gen_zero_centered((8, 8), 2 / 3)
    report = bcp_loss(_perfect(y_in, 3), _perfect(y_out, 3), y_in, y_out, mask)
    assert report.l_all < 1e-6


def test_alpha_one_is_unweighted():
    q_in, q_out, y_in, y_out = _random_case(5)
    mask = gen_zero_centered((8, 8), 2 / 3)
    cfg = LossConfig(alpha=1.0)
    report = bcp_loss(q_in, q_out, y_in, y_out, mask, cfg)

    assert report.l_in == seg_loss(q_in, y_in, None, cfg).item()
    assert report.l_out == seg_loss(q_out, y_out, None, cfg).item()


def test_all_ones_mask_has_no_pseudo_region_in_x_in():
    q_in, q_out, y_in, y_out = _random_case(6)
    ones = Mask.ones((8, 8))
    a = bcp_loss(q_in, q_out, y_in, y_out, ones, LossConfig(alpha=0.5))
    b = bcp_loss(q_in, q_out, y_in, y_out, ones, LossConfig(alpha=1.5))
    assert a.l_in == pytest.approx(b.l_in, rel=1e-12)


def test_raw_ce_is_alpha_invariant_when_pseudo_region_is_perfect():
    rng = np.random.default_rng(7)
    mask = gen_zero_centered((8, 8), 0.5)
    y_in = rng.integers(0, 3, size=(1, 8, 8))
    q = rng.dirichlet(np.ones(3), size=(1, 8, 8)).transpose(0, 3, 1, 2)
    # exact one-hot on the pseudo-labeled (M = 0) voxels
    zero = ~mask.bits.astype(bool)
    q[:, :, zero] = one_hot(y_in, 3, axis=1)[:, :, zero]
    q_in = ad.const(q)

    lo = bcp_loss(q_in, None, y_in, None, mask, LossConfig(alpha=0.5))
    hi = bcp_loss(q_in, None, y_in, None, mask, LossConfig(alpha=1.5))
    assert lo.breakdown["ce_raw_in"] == pytest.approx(hi.breakdown["ce_raw_in"], rel=1e-12)
    # l_in is normalized by mean(w) and depends on alpha
    assert lo.l_in != pytest.approx(hi.l_in, rel=1e-6)


def test_missing_direction_is_zero():
    q_in, _, y_in, _ = _random_case(8)
    report = bcp_loss(q_in, None, y_in, None, gen_zero_centered((8, 8), 0.5))
    assert report.l_out == 0.0
    assert report.l_all == report.l_in


def test_bcp_loss_gradients(gradcheck):
    rng = np.random.default_rng(9)
    z_in = rng.normal(size=(2, 3, 4, 4))
    z_out = rng.normal(size=(2, 3, 4, 4))
    y_in = rng.integers(0, 3, size=(2, 4, 4))
    y_out = rng.integers(0, 3, size=(2, 4, 4))
    mask = gen_zero_centered((4, 4), 0.5)

    def fn(a, b):
        return bcp_loss(ad.softmax_channels(a), ad.softmax_channels(b), y_in, y_out, mask).total

    assert gradcheck(fn, {"a": z_in, "b": z_out}) < 1e-5


def test_soft_targets_match_hard_for_one_hot():
    rng = np.random.default_rng(10)
    q = _probs(rng, (1, 3, 4, 4))
    y = rng.integers(0, 3, size=(1, 4, 4))
    hard = seg_loss(q, y).item()
    soft = soft_seg_loss(q, one_hot(y, 3, axis=1)).item()
    assert soft == pytest.approx(hard, rel=1e-12)


@pytest.mark.parametrize("bad", [dict(alpha=0.0), dict(dice_weight=0.0, ce_weight=0.0), dict(ce_weight=-1.0)])
def test_loss_config_validation(bad):
    with pytest.raises(ValueError):
        LossConfig(**bad)
