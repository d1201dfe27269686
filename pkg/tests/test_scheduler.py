import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fovealseg.data import SyntheticSpec, generate_synthetic_sequence
from fovealseg.gaze import GazePoint
from fovealseg.scheduler import (
    FIXTURES, CostModel, Decision, OracleSegmenter, SchedulerConfig, SchedulerState, fixture,
    frame_difference, gaze_in_mask, run_trace, step,
)

COSTS = CostModel(fsnet=1000, nd=50_000, reuse=10, displacement=1)


def cfg(**kw):
    return SchedulerConfig(costs=COSTS, **kw)


def const_model(mask, label=0):
    calls = []

    def fn(frame, gaze):
        calls.append(1)
        return mask, label
    fn.calls = calls
    return fn


# ----------------------------------------------------------------- frame_difference


def test_frame_difference_examples():
    z = np.zeros((4, 4, 3))
    assert frame_difference(z, z) == 0.0
    assert frame_difference(z, np.ones_like(z)) == 1.0
    half = z.copy()
    half[:2] = 0.5
    assert frame_difference(half, z) == pytest.approx(0.25)


def test_frame_difference_shape_mismatch():
    with pytest.raises(ValueError):
        frame_difference(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_frame_difference_matches_summation(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((5, 6, 3)), rng.random((5, 6, 3))
    total = sum(abs(a[i, j, c] - b[i, j, c]) for i in range(5) for j in range(6) for c in range(3))
    assert frame_difference(a, b) == pytest.approx(total / a.size, abs=1e-12)


# ----------------------------------------------------------------- gaze_in_mask


def test_gaze_in_mask_examples():
    M = np.zeros((10, 10), bool)
    M[2:6, 2:6] = True
    assert gaze_in_mask(GazePoint.from_pixel(3, 3, 10, 10), M)
    assert not gaze_in_mask(GazePoint.from_pixel(3, 3, 10, 10), np.zeros_like(M))
    outside = GazePoint.from_pixel(3, 6, 10, 10)  # one pixel right of the boundary
    assert gaze_in_mask(outside, M, radius=2)
    assert not gaze_in_mask(outside, M, radius=0)
    assert not gaze_in_mask(GazePoint.from_pixel(3, 9, 10, 10), M, radius=2)


@given(st.integers(0, 2**31 - 1), st.integers(0, 3))
@settings(max_examples=40, deadline=None)
def test_gaze_in_mask_matches_disk_oracle(seed, r):
    rng = np.random.default_rng(seed)
    M = rng.random((9, 11)) < 0.05
    i, j = int(rng.integers(9)), int(rng.integers(11))
    g = GazePoint.from_pixel(i, j, 9, 11)
    ref = any(M[a, b] for a in range(9) for b in range(11) if (a - i) ** 2 + (b - j) ** 2 <= r * r)
    assert gaze_in_mask(g, M, r) == ref


# ----------------------------------------------------------------- step


def test_cold_start_runs_and_fills_buffers():
    M = np.ones((4, 4), bool)
    d, out, s = step(SchedulerState(), np.zeros((4, 4, 3)), GazePoint(0.5, 0.5), const_model(M), cfg())
    assert d.kind is Decision.RUN_INITIAL and d.flops_charged == COSTS.fsnet
    assert out[0] is M and s.F_init is not None and s.g_last == GazePoint(0.5, 0.5)


def warm(M=None):
    M = np.ones((4, 4), bool) if M is None else M
    F = np.full((4, 4, 3), 0.5)
    return SchedulerState(F, GazePoint(0.5, 0.5), (M, 0)), F


def test_saccade_skips_and_only_moves_gaze():
    s, F = warm()
    model = const_model(None)
    d, out, s2 = step(s, F, GazePoint(0.5, 1.0), model, cfg())
    assert d.kind is Decision.SKIP_SACCADE and out is None and not model.calls
    assert d.flops_charged == COSTS.displacement
    assert s2.F_init is s.F_init and s2.M_last is s.M_last and s2.g_last == GazePoint(0.5, 1.0)


def test_frame_change_runs_new_segment_and_replaces_F_init():
    s, F = warm()
    F2 = F + 0.05
    d, _, s2 = step(s, F2, GazePoint(0.5, 0.5), const_model(np.ones((4, 4), bool)), cfg())
    assert d.kind is Decision.RUN_NEW_SEGMENT and np.array_equal(s2.F_init, F2)
    assert d.flops_charged == COSTS.reuse + COSTS.fsnet


def test_reuse_returns_buffer_unchanged():
    s, F = warm()
    model = const_model(None)
    d, out, s2 = step(s, F, GazePoint(0.5, 0.55), model, cfg())
    assert d.kind is Decision.REUSE and out is s.M_last and s2 is s and not model.calls
    assert d.flops_charged == COSTS.reuse


def test_gaze_leaving_mask_reruns_without_touching_F_init():
    M = np.zeros((4, 4), bool)
    M[0, 0] = True
    s, F = warm(M)
    new = (np.ones((4, 4), bool), 2)
    d, out, s2 = step(s, F, GazePoint(0.55, 0.55), lambda f, g: new, cfg(radius=0))
    assert d.kind is Decision.RUN_NEW_GAZE and out is new
    assert s2.F_init is s.F_init and s2.M_last is new and s2.g_last == GazePoint(0.55, 0.55)


def test_model_failure_leaves_state_intact():
    s, F = warm()

    def boom(frame, gaze):
        raise RuntimeError("model failed")
    with pytest.raises(RuntimeError):
        step(s, F + 0.2, GazePoint(0.5, 0.5), boom, cfg())
    assert np.array_equal(s.F_init, F)


def test_state_invariant():
    with pytest.raises(ValueError):
        SchedulerState(None, None, (np.ones((2, 2), bool), 0))


def test_config_validation():
    with pytest.raises(ValueError):
        SchedulerConfig(alpha=0.0)
    with pytest.raises(ValueError):
        SchedulerConfig(beta=-1.0)


# ----------------------------------------------------------------- fixtures and reports


@pytest.mark.parametrize("name", FIXTURES)
def test_fixtures_produce_expected_decisions(name):
    fx = fixture(name)
    r = run_trace(fx.frames, fx.trace, fx.segmenter)
    assert r.kinds == fx.expected


def test_all_reuse_invokes_model_once_and_ratio():
    fx = fixture("all_reuse")
    r = run_trace(fx.frames, fx.trace, fx.segmenter)
    c = CostModel.default()
    assert fx.segmenter.calls == 1
    assert r.ns_ratio == pytest.approx(10 * c.fsnet / (c.fsnet + 9 * c.reuse))
    assert r.ns_ratio > 5


def test_all_saccade_charges_displacement_only():
    fx = fixture("all_saccade", T=20)
    r = run_trace(fx.frames, fx.trace, fx.segmenter, cfg())
    assert r.total_flops == COSTS.fsnet + 19 * COSTS.displacement


def test_reuse_masks_equal_fresh_runs():
    fx = fixture("segment_change", T=12)
    r = run_trace(fx.frames, fx.trace, fx.segmenter)
    for t, d in enumerate(r.decisions):
        if d.kind is Decision.REUSE:
            fresh = fx.segmenter(fx.frames[t], fx.trace[t])
            assert np.array_equal(r.masks[t][0], fresh[0]) and r.masks[t][1] == fresh[1]


def test_report_json_accounting_and_purity():
    seq = generate_synthetic_sequence(SyntheticSpec(), 5, 90)
    a = run_trace(seq.frames, seq.trace, OracleSegmenter.for_sequence(seq), cfg())
    b = run_trace(seq.frames, seq.trace, OracleSegmenter.for_sequence(seq), cfg())
    assert a.to_json() == b.to_json()
    d = json.loads(a.to_json())
    assert d["total_flops"] == sum(f["flops"] for f in d["frames"])
    assert isinstance(d["total_flops"], int) and d["frames"][0] == {"t": 0, "decision": "RUN_INITIAL", "flops": 1000}
    assert d["ns_flops"] == 1000 * 90 and d["nd_flops"] == 50_000 * 90


def test_length_mismatch():
    fx = fixture("all_reuse")
    with pytest.raises(ValueError):
        run_trace(fx.frames[:-1], fx.trace, fx.segmenter)


def test_oracle_background_gaze_is_empty():
    fx = fixture("all_reuse")
    scene = fx.segmenter.scenes[0]
    bg = np.argwhere(scene.instance_index_map() < 0)[0]
    mask, label = fx.segmenter(fx.frames[0], GazePoint.from_pixel(*bg, *scene.hw))
    assert not mask.any() and label == -1


@given(st.integers(0, 50), st.floats(0.005, 0.2), st.floats(0.005, 0.2))
@settings(max_examples=15, deadline=None)
def test_monotone_in_thresholds(seed, lo, hi):
    lo, hi = min(lo, hi), max(lo, hi)
    seq = generate_synthetic_sequence(SyntheticSpec(height=16, width=16, max_extent=7, min_extent=4), seed, 40)
    seg = OracleSegmenter.for_sequence(seq)

    def counts(**kw):
        return run_trace(seq.frames, seq.trace, seg, cfg(**kw)).counts()
    assert counts(beta=hi)["RUN_NEW_SEGMENT"] <= counts(beta=lo)["RUN_NEW_SEGMENT"]
    assert counts(alpha=hi)["SKIP_SACCADE"] <= counts(alpha=lo)["SKIP_SACCADE"]
