import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mtsb import analysis
from mtsb.analysis import (
    MS_PER_MIN, N_FINAL, NeighborhoodNotVisited, coupling_from_linger, final_distances, g_grid,
    is_contracting, linger_durations, linger_time, period, period_from_times, poincare_map,
    record_from_crossings,
)
from mtsb.integrate import Trajectory, detect_crossings
from mtsb.model import CellParams


@pytest.fixture(scope="module")
def rec8(params, traj8):
    return poincare_map(params, traj=traj8)


def test_record_invariants(rec8):
    assert rec8.points.shape == (rec8.n, 2)
    assert rec8.n >= N_FINAL + 1
    d = np.linalg.norm(np.diff(rec8.points[-6:], axis=0), axis=1)
    assert d.size == 5
    assert rec8.max_dist == d.max()
    np.testing.assert_allclose(rec8.fixed_point, rec8.points[-6:].mean(axis=0), rtol=0, atol=0)
    if rec8.stable:
        assert rec8.max_dist < 1e-6 and rec8.contracting


def test_crossings_after_transient(rec8):
    assert np.all(rec8.times >= analysis.TRANSIENT_MIN * MS_PER_MIN)
    assert rec8.total_crossings >= rec8.n


def test_points_lie_on_section(params, traj8, rec8):
    ev = [e for e in detect_crossings(traj8, ("v", -59.0), 1) if e.t >= 20 * MS_PER_MIN]
    assert len(ev) == rec8.n
    for e, pt in zip(ev, rec8.points):
        assert abs(e.state[0] + 59.0) < 1e-6
        np.testing.assert_array_equal(pt, e.state[[2, 3]])


def test_g8_fixed_point_stable(rec8):
    assert rec8.stable
    assert abs(rec8.fixed_point[0] - 0.073) <= 0.01
    assert abs(rec8.fixed_point[1] - 0.467) <= 0.01


def test_period_identity(rec8):
    t = rec8.times[-6:]
    assert period(rec8) * 5 * MS_PER_MIN == pytest.approx(t[-1] - t[0], rel=1e-15)


def test_period_arithmetic():
    assert period_from_times([0.0, 343_000.0]) == pytest.approx(5.716666666666667, rel=1e-15)
    with pytest.raises(ValueError):
        period_from_times([1.0])


def test_insufficient_crossings_flag():
    rec = record_from_crossings(8.0, [1.0, 2.0, 3.0], [[0.1, 0.4]] * 3)
    assert rec.flag == "insufficient crossings"
    assert not rec.stable


def test_last_point_estimator():
    pts = np.column_stack([np.linspace(0, 1, 8), np.zeros(8)])
    rec = record_from_crossings(8.0, np.arange(8.0), pts, estimator="last")
    assert rec.fixed_point == (1.0, 0.0)


def test_contracting_and_noise_floor():
    assert is_contracting(np.array([5e-7, 4e-7, 3e-7, 2e-7, 1e-7]))
    assert not is_contracting(np.array([5e-7, 6e-7, 3e-7, 2e-7, 1e-7]))
    # once at the noise floor the distances may jitter
    assert is_contracting(np.array([1e-9, 1e-11, 3e-13, 5e-13, 1e-13]))


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=7, max_size=20))
def test_stable_implies_small_and_contracting(pts):
    rec = record_from_crossings(8.0, np.arange(len(pts), dtype=float) * 1e5, pts)
    d = final_distances(np.array(pts))
    assert rec.max_dist == d.max()
    assert rec.stable == (rec.max_dist < 1e-6 and rec.contracting)


def test_determinism(params):
    a = poincare_map(params, t_span_min=30.0, transient_min=0.0)
    b = poincare_map(params, t_span_min=30.0, transient_min=0.0)
    np.testing.assert_array_equal(a.times, b.times)
    np.testing.assert_array_equal(a.points, b.points)
    assert a.as_dict() == b.as_dict()


def test_g_grid():
    np.testing.assert_allclose(g_grid(7, 13, 0.5), np.arange(7, 13.01, 0.5))
    assert len(g_grid(6, 15, 0.1)) == 91
    with pytest.raises(ValueError):
        g_grid(7, 13, 0)


# ---------------------------------------------------------------- linger time

def _box_trajectory():
    """Synthetic orbit that sits at the centre for 3 s of each 10 s cycle."""
    t = np.arange(0, 40_000.0, 10.0)
    phase = t % 10_000
    v = np.where((phase > 2_000) & (phase < 5_000), -60.0, -75.0)
    v = np.where((phase >= 50) & (phase < 100), -50.0, v)  # one upward crossing of -59 per cycle
    states = np.column_stack([v, np.full_like(t, 0.1), np.full_like(t, 0.45), np.full_like(t, 80.0)])
    return Trajectory(t, states, np.zeros_like(states), ("v", "x", "y", "z"), states[-1])


def test_linger_durations_synthetic():
    tr = _box_trajectory()
    center = [-60.0, 0.1, 0.45, 80.0]
    d = linger_durations(tr, center, radius=1.0, scales=(5.0, 0.02, 0.05, 5.0))
    assert len(d) == 3
    for x in d:
        assert 2_980 <= x <= 3_000


def test_linger_not_visited():
    tr = _box_trajectory()
    with pytest.raises(NeighborhoodNotVisited):
        linger_durations(tr, [0.0, 1.0, 1.0, 0.0], radius=1.0)
    with pytest.raises(ValueError):
        linger_durations(tr, [-60, 0.1, 0.45, 80], radius=0.0)


def test_linger_nondecreasing_in_radius(params, traj8, psp8):
    vals = [linger_time(params, psp8, r, traj=traj8) for r in (1.5, 2.0, 3.0)]
    assert vals[0] <= vals[1] <= vals[2]


def test_linger_calibration_at_g7():
    q = CellParams(G=7.0)
    from mtsb.singular import find_psp
    t = linger_time(q, find_psp(q, classify=False))
    assert t == pytest.approx(35_000, rel=0.05)


# ---------------------------------------------------------------- coupling

def test_coupling_identity():
    assert coupling_from_linger(35_000) == 0.005
    assert coupling_from_linger(5_000) == pytest.approx(0.035, rel=1e-15)


@given(st.floats(1.0, 1e6), st.floats(1e-4, 1.0), st.floats(1.0, 1e6))
def test_coupling_inverse_proportional(t, k_ref, t_ref):
    k = coupling_from_linger(t, (k_ref, t_ref))
    assert k * t == pytest.approx(k_ref * t_ref, rel=1e-14)
    assert coupling_from_linger(2 * t, (k_ref, t_ref)) == pytest.approx(k / 2, rel=1e-14)


def test_coupling_rejects_nonpositive():
    with pytest.raises(ValueError):
        coupling_from_linger(0.0)


# ---------------------------------------------------------------- half-step sweep

@pytest.fixture(scope="module")
def half_sweep(params):
    return {e.G: e.record for e in analysis.sweep_G(params, (7.0, 13.0), 0.5)}


def test_sweep_complete(half_sweep):
    assert sorted(half_sweep) == list(g_grid(7, 13, 0.5))
    assert all(r is not None for r in half_sweep.values())


def test_sweep_stable_windows_included(half_sweep):
    for G in (7.5, 8.0, 8.5, 9.0, 9.5, 10.0, 10.5, 12.0, 12.5):
        assert half_sweep[G].stable, G


def test_sweep_fixed_point_trend(half_sweep):
    ys = [half_sweep[G].fixed_point[1] for G in sorted(half_sweep)]
    assert np.all(np.diff(ys) < 0)
    xs = [half_sweep[G].fixed_point[0] for G in sorted(half_sweep)]
    assert 0.06 <= min(xs) and max(xs) <= 0.10


def test_sweep_stable_max_dist_band(half_sweep):
    d = [r.max_dist for r in half_sweep.values() if r.stable]
    assert max(d) < 1e-7


def test_sweep_crossing_counts(half_sweep):
    for G, r in half_sweep.items():
        assert 8 <= r.total_crossings <= 15, G


def test_period_decreasing_on_half_grid(half_sweep):
    """The period decreases with glucose across [7, 13]."""
    per = [half_sweep[G].period_minutes for G in sorted(half_sweep)]
    assert np.all(np.diff(per) < 0), per
