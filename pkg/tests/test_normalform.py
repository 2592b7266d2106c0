import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtsb import normalform as nf
from mtsb.model import CellParams, DomainError
from mtsb.normalform import (
    BUNDLE_FIELDS, COEFF_NAMES, ChartK3State, NormalFormCoeffs, PartialBundle, PartialsMismatch,
    analytic_partials, chart_scaling, coeffs, compare_blowup, compute_partials, cross_check,
    derivative_order, k3_rhs, special_solution, special_solution_residual, y3_oracle_report,
)

from mp_oracle import Oracle


@pytest.fixture(scope="module")
def bundle(psp8, params):
    return compute_partials(psp8, params)


@pytest.fixture(scope="module")
def computed(bundle):
    return coeffs(bundle)


@pytest.fixture(scope="module")
def mp_partials(psp8):
    o = Oracle()
    return o.shifted_partials([mp.mpf(float(c)) for c in psp8.location])


def oracle_coeffs(d):
    """Coefficient formulas evaluated on the high-precision partials."""
    hvv, hx, hy = d["h_vv"], d["h_x"], d["h_y"]
    return dict(
        H_XX=d["h_xx"] / (hvv * hx ** 2), H_VX=-2 * d["h_vx"] / (hvv * hx), H_VY=2 * d["h_vy"] / (hvv * hy),
        H_VVV=2 * d["h_vvv"] / (3 * hvv ** 2), H_XXX=-2 * d["h_xxx"] / (3 * hvv ** 2 * hx ** 3),
        F_V=-hx * d["f_v"], F_X=d["f_x"], F_Z=-hvv * hx * d["f_z"] * d["g2_0"] / 2,
        F_VV=-hx * d["f_vv"] / hvv, F_VVV=-2 * hx * d["f_vvv"] / (3 * hvv ** 2),
        G_10=hvv * hy * d["g1_0"] / 2, G_1X=-hy * d["g1_x"] / hx, G_1Y=d["g1_y"],
        G_1XX=hy * d["g1_xx"] / (hvv * hx ** 2), G_1XXX=-2 * hy * d["g1_xxx"] / (3 * hvv ** 2 * hx ** 3),
        G_2X=-2 * d["g2_x"] / (hvv * hx * d["g2_0"]), G_2Z=d["g2_z"],
    )


# ---------------------------------------------------------------- partials

def test_bundle_fields_complete():
    assert len(BUNDLE_FIELDS) == 23 == len(set(BUNDLE_FIELDS))
    assert set(BUNDLE_FIELDS) == {f.name for f in __import__("dataclasses").fields(PartialBundle)}


def test_exact_partials(bundle, params):
    assert bundle.g2_z == -7.463
    assert bundle.g1_y == -1.0
    assert bundle.f_x == -16.0
    assert bundle.f_z == params.d3
    assert bundle.g2_x == params.k1


def test_partials_match_oracle(bundle, mp_partials):
    for k, v in mp_partials.items():
        assert bundle[k] == pytest.approx(float(v), rel=1e-10, abs=1e-300), k


def test_fd_cross_check(bundle, psp8, params):
    err = cross_check(bundle, psp8.location, params)
    for k, e in err.items():
        limit = 1e-3 if derivative_order(k) == 3 else 1e-5
        assert e <= limit, (k, e)


def test_mismatch_guard(psp8, params, monkeypatch):
    real = nf.analytic_partials

    def broken(s, p):
        b = real(s, p)
        return __import__("dataclasses").replace(b, h_vx=b.h_vx * 1.01)

    monkeypatch.setattr(nf, "analytic_partials", broken)
    with pytest.raises(PartialsMismatch):
        compute_partials(psp8, params)


def test_derivative_order():
    assert derivative_order("h_vvv") == 3
    assert derivative_order("g1_xx") == 2
    assert derivative_order("g2_0") == 0


@settings(max_examples=20, deadline=None)
@given(st.floats(-70, -45), st.floats(60, 120))
def test_partials_fd_agreement_on_C1(v, z):
    from mtsb.geometry import point_on_C1
    p = CellParams()
    s = point_on_C1(v, z, p)
    err = cross_check(analytic_partials(s, p), s, p)
    for k, e in err.items():
        limit = 1e-3 if derivative_order(k) == 3 else 1e-5
        assert e <= limit, (k, e)


# ---------------------------------------------------------------- coefficients

def test_coefficients_match_oracle(computed, mp_partials):
    ref = oracle_coeffs(mp_partials)
    for k in COEFF_NAMES:
        assert getattr(computed, k) == pytest.approx(float(ref[k]), rel=1e-9), k


def test_identities_exact(computed):
    assert computed.b1 == computed.F_V
    assert computed.b2 == computed.F_Z
    assert computed.b3 == computed.F_X
    assert computed.b4 == -computed.G_1X
    assert computed.b5 == computed.G_1Y
    assert computed.lam == -computed.G_10


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=17, max_size=17))
def test_identities_hold_for_any_values(vals):
    c = NormalFormCoeffs(*vals)
    d = c.as_dict()
    assert (d["b1"], d["b2"], d["b3"], d["b4"], d["b5"], d["lambda_"]) == (
        c.F_V, c.F_Z, c.F_X, -c.G_1X, c.G_1Y, -c.G_10)


def test_hvx_hvy_antisymmetry(computed):
    assert computed.H_VX == pytest.approx(-computed.H_VY, rel=1e-3)


def test_fz_correction(bundle, computed):
    """F_Z follows from rescaling x and z; the inverted variant is far off in magnitude."""
    assert computed.F_Z == pytest.approx(-bundle.h_vv * bundle.h_x * bundle.f_z * bundle.g2_0 / 2)
    assert abs(nf.F_Z_as_printed(bundle) / computed.F_Z) > 1e9


def test_coeff_guards(bundle):
    import dataclasses
    for name in ("h_vv", "h_x", "g2_0", "h_y"):
        with pytest.raises(DomainError, match="non-degeneracy"):
            coeffs(dataclasses.replace(bundle, **{name: 0.0}))


def test_reference_roundtrip():
    c = NormalFormCoeffs.reference()
    assert c.F_V == 1.266e-4
    assert NormalFormCoeffs.from_mapping(c.as_dict()) == c
    assert [r[0] for r in c.rows()][:17] == list(COEFF_NAMES)


# ---------------------------------------------------------------- chart K3

def _core(c, s):
    """The r3 = 0 core of the chart field."""
    return np.array([-s.x3 + s.v3 ** 2, c.b1 * s.v3, s.delta3 * (-s.lambda3 - c.b4 * s.x3), s.delta3])


@settings(deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 2), st.floats(-1, 1))
def test_k3_core(v, x, y, z, d3, l3):
    c = NormalFormCoeffs.reference()
    s = ChartK3State(v, x, y, z, 0.0, d3, l3)
    np.testing.assert_allclose(k3_rhs(s, c), _core(c, s), rtol=1e-14, atol=1e-14)


def test_k3_origin():
    c = NormalFormCoeffs.reference()
    s = ChartK3State(0, 0, 1.3, 2.0, 0.0, 0.4, 0.02)
    np.testing.assert_allclose(k3_rhs(s, c), [0, 0, -0.4 * 0.02, 0.4], atol=1e-18)


def test_k3_zero_coefficients_regression():
    """With every higher-order coefficient zero the r3 > 0 field collapses to the core."""
    vals = dict.fromkeys(COEFF_NAMES, 0.0)
    vals.update(F_V=0.3, G_1X=-2.0)
    c = NormalFormCoeffs.from_mapping(vals)
    s = ChartK3State(0.7, -0.2, 0.1, 0.5, 0.01, 0.4, 0.02)
    np.testing.assert_array_equal(k3_rhs(s, c)[2:], _core(c, s)[2:])
    expected = np.array([-0.2 * -1 + 0.49 + 0.01 * 0.01 * 0.1, 0.3 * 0.7, 0.4 * (-0.02 + 2.0 * 0.2), 0.4])
    np.testing.assert_allclose(k3_rhs(s, c), expected, rtol=1e-14)


def test_chart_state_validation():
    with pytest.raises(ValueError):
        ChartK3State(0, 0, 0, 0, r3=-1.0)


def test_special_solution_at_zero():
    c = NormalFormCoeffs.reference()
    np.testing.assert_allclose(special_solution(c, 0.5, 0.01, 3.0, 0.0), [0, -c.b1 / 2, 0, 3.0])


@pytest.mark.parametrize("which", ["reference", "computed"])
def test_special_solution_identity(which, computed):
    c = NormalFormCoeffs.reference() if which == "reference" else computed
    t = np.linspace(-10, 10, 1000)
    res = special_solution_residual(c, 0.46, 9e-4, 1.0, t)
    assert np.max(np.abs(res[:, :2])) <= 1e-12
    assert np.max(np.abs(res[:, 2:])) <= 1e-12


def test_y3_oracle_report():
    c = NormalFormCoeffs.reference()
    rep = y3_oracle_report(c, 0.46, 9e-4)
    assert rep["y3_consistent"]
    assert rep["samples"] == 1001
    assert rep["y3_cubic_coefficient"] == -c.b1 ** 2 * c.b4 / 12


def test_y3_oracle_symbolic():
    """Independent check: integrate dy3 along the parabola with mpmath quadrature."""
    c = NormalFormCoeffs.reference()
    d3, l3 = 0.46, 9e-4
    b1, b4 = c.b1, c.b4
    for t in (-3.0, 1.0, 7.5):
        q = mp.quad(lambda s: d3 * (-l3 - b4 * (b1 ** 2 / 4 * s ** 2 - b1 / 2)), [0, t])
        assert special_solution(c, d3, l3, 0.0, t)[2] == pytest.approx(float(q), rel=1e-12)


def test_separatrix_tracking_at_r3_zero(params):
    c = NormalFormCoeffs.reference()
    run = compare_blowup(c, [0.0], (-5.0, 500.0), ic_offset=np.zeros(4), p=params, samples=2001)[0]
    assert not run.escaped
    assert np.max(np.abs(run.states - run.special)) <= 1e-6


def test_compare_blowup_validation(params):
    c = NormalFormCoeffs.reference()
    with pytest.raises(ValueError):
        compare_blowup(c, [1.0], p=params)
    with pytest.raises(ValueError):
        compare_blowup(c, [0.0], (5.0, -5.0), p=params)


def test_blowup_rows_schema(params):
    c = NormalFormCoeffs.reference()
    run = compare_blowup(c, [0.0], (-5.0, 5.0), p=params, samples=11)[0]
    rows = list(run.rows())
    assert len(rows) == 22
    assert {r[-1] for r in rows} == {"special", "perturbed"}
    assert all(len(r) == 7 for r in rows)


def test_chart_parameters(params):
    c = NormalFormCoeffs.reference()
    r = math.sqrt(params.eps)
    d3, l3 = nf.chart_parameters(c, r, params)
    assert d3 == pytest.approx(params.delta / r)
    assert l3 == pytest.approx(1e-4 / params.eps)
    with pytest.raises(ValueError):
        nf.chart_parameters(c, 0.0, params)


# ---------------------------------------------------------------- scaling

def test_time_factor(bundle, params):
    sc = chart_scaling(params.eps, bundle)
    assert sc.t == pytest.approx(51.6191, rel=1e-6)


def test_scaling_factors_match_oracle(bundle, mp_partials, params):
    sc = chart_scaling(params.eps, bundle)
    d, e = mp_partials, mp.mpf(params.eps)
    r = mp.sqrt(e)
    want = dict(v=2 * r / d["h_vv"], x=-2 * e / (d["h_vv"] * d["h_x"]), y=2 * e ** 2 / (d["h_vv"] * d["h_y"]),
                z=e * d["g2_0"])
    for k, w in want.items():
        assert getattr(sc, k) == pytest.approx(float(w), rel=1e-9), k


@settings(max_examples=100)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=4, max_size=4))
def test_scaling_roundtrip(vals):
    b = analytic_partials(np.array([-60.4, 1.4e-4, 0.0945, 0.4667, 84.72]), CellParams())
    sc = chart_scaling(3.753e-4, b)
    back = sc.to_chart(sc.to_shifted(vals))
    np.testing.assert_allclose(back, vals, rtol=1e-12, atol=1e-300)


def test_scaling_requires_positive_eps(bundle):
    with pytest.raises(ValueError):
        chart_scaling(0.0, bundle)
