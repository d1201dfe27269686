import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fovealseg import events
from fovealseg.losses import LossConfig, area_weighted_focal_loss, dice_loss, total_loss
from oracles import dice_sum, focal_sum


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def test_dice_perfect_and_disjoint():
    tgt = np.zeros((1, 32, 32))
    tgt[0, 5:9, 5:9] = 1
    assert float(dice_loss(t(tgt), t(tgt))) < 1e-6
    a = np.zeros((2, 4, 4)); a[0] = 1
    b = np.zeros((2, 4, 4)); b[1] = 1
    assert float(dice_loss(t(a), t(b))) == pytest.approx(1 - 1e-6 / (32 + 1e-6), abs=1e-12)


def test_dice_half_covered():
    tgt = np.zeros((1, 4, 4)); tgt[0, :2, :] = 1  # 8 IOI pixels
    pred = np.zeros((1, 4, 4)); pred[0, 0, :] = 1  # 4 of them
    expected = 1 - (2 * 4 + 1e-6) / (4 + 8 + 1e-6)
    assert float(dice_loss(t(pred), t(tgt))) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(1 / 3, abs=1e-6)
    assert dice_sum(pred, tgt, 1e-6) == pytest.approx(expected, abs=1e-12)


def test_focal_worked_example():
    fg = np.zeros((1, 4, 4)); fg[0, 0, :] = 1
    pred = np.full((1, 4, 4), 0.5)
    val = float(area_weighted_focal_loss(t(pred), t(fg), 2.0))
    assert val == pytest.approx(2 * 0.25 * math.log(2), abs=1e-12)
    assert val == pytest.approx(0.3466, abs=1e-3)
    assert focal_sum(pred, fg, 2.0) == pytest.approx(val, abs=1e-12)


def test_focal_confident_and_weights():
    fg = np.zeros((1, 4, 4)); fg[0, 1, 1] = 1
    pred = np.where(fg > 0, 1 - 1e-7, 1e-7)
    assert float(area_weighted_focal_loss(t(pred), t(fg))) < 1e-5
    # gamma 0, p_t = 1/e everywhere: each pixel contributes weight * 1
    pred = np.where(fg > 0, 1 / math.e, 1 - 1 / math.e)
    assert float(area_weighted_focal_loss(t(pred), t(fg), 0.0)) == pytest.approx(2.0, abs=1e-9)


def test_focal_empty_ioi_counts():
    events.reset()
    pred = np.full((1, 4, 4), 0.2)
    val = float(area_weighted_focal_loss(t(pred), t(np.zeros((1, 4, 4)))))
    assert val == pytest.approx(focal_sum(pred, np.zeros((1, 4, 4)), 2.0), abs=1e-12)
    assert events.counters["focal_empty_ioi"] == 1


def test_total_loss_cases():
    fg = np.zeros((1, 4, 4)); fg[0, 0, :] = 1
    pred = np.full((1, 4, 4), 0.5)
    d = float(dice_loss(t(pred), t(fg)))
    assert float(total_loss(t(pred), t(fg), LossConfig(lam=0.0))) == d
    assert float(total_loss(t(fg), t(fg))) < 1e-5
    tgt = np.zeros((1, 4, 4)); tgt[0, :2, :] = 1
    p2 = np.zeros((1, 4, 4)); p2[0, 0, :] = 1
    combined = float(dice_loss(t(p2), t(tgt))) + float(area_weighted_focal_loss(t(pred), t(fg)))
    assert combined == pytest.approx(0.6800, abs=1e-3)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        dice_loss(torch.zeros(1, 4, 4), torch.zeros(1, 4, 5))


def _random_case(rng, C=3, h=8, w=8):
    cls = rng.integers(C)
    fg = rng.random((h, w)) < rng.uniform(0.05, 0.6)
    target = np.zeros((C, h, w)); target[cls] = fg
    bm = rng.random((h, w))
    cvec = rng.dirichlet(np.ones(C))
    pred = cvec[:, None, None] * bm[None]
    return pred, target, cls


def test_multichannel_matches_oracle():
    rng = np.random.default_rng(11)
    for _ in range(50):
        pred, target, cls = _random_case(rng)
        fg = target[cls]
        # p_t of background is 1 - sum_c pred, so the IOI-probability view uses sum_c pred there
        p_view = np.where(fg > 0, pred[cls], pred.sum(0))
        assert float(area_weighted_focal_loss(t(pred), t(target))) == pytest.approx(
            focal_sum(p_view, fg, 2.0), abs=1e-9)
        assert float(dice_loss(t(pred), t(target))) == pytest.approx(dice_sum(pred, target, 1e-6), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_nonnegative_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    pred, target, _ = _random_case(rng)
    base = float(total_loss(t(pred), t(target)))
    assert base >= 0
    perm = rng.permutation(64)
    pp = pred.reshape(3, 64)[:, perm].reshape(3, 8, 8)
    tp = target.reshape(3, 64)[:, perm].reshape(3, 8, 8)
    assert float(total_loss(t(pp), t(tp))) == pytest.approx(base, abs=1e-12)


def test_focal_weight_sum_is_two():
    rng = np.random.default_rng(2)
    fg = (rng.random((1, 8, 8)) < 0.3).astype(float)
    # with gamma 0 and p_t = 1/e the loss equals the total weight
    pred = np.where(fg > 0, 1 / math.e, 1 - 1 / math.e)
    assert float(area_weighted_focal_loss(t(pred), t(fg), 0.0)) == pytest.approx(2.0, abs=1e-9)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    for _ in range(5):
        pred, target, _ = _random_case(rng)
        pred = np.clip(pred, 0.02, 0.98)
        x = t(pred).requires_grad_(True)
        total_loss(x, t(target)).backward()
        g = x.grad.numpy()
        step = 1e-4
        for idx in map(tuple, rng.integers(0, [3, 8, 8], size=(20, 3))):
            hi, lo = pred.copy(), pred.copy()
            hi[idx] += step
            lo[idx] -= step
            fd = (float(total_loss(t(hi), t(target))) - float(total_loss(t(lo), t(target)))) / (2 * step)
            assert abs(fd - g[idx]) <= 1e-3 * max(abs(fd), abs(g[idx]), 1e-8) + 1e-9


def test_batched_is_mean_of_samples():
    rng = np.random.default_rng(9)
    cases = [_random_case(rng) for _ in range(4)]
    P = t(np.stack([c[0] for c in cases]))
    T = t(np.stack([c[1] for c in cases]))
    each = [float(total_loss(t(c[0]), t(c[1]))) for c in cases]
    assert float(total_loss(P, T)) == pytest.approx(np.mean(each), abs=1e-12)
