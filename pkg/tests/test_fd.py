import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mtsb import fd


@given(st.floats(-3, 3))
def test_first_derivative_of_exp(x):
    est, err = fd.derivative(math.exp, x, 1, scale=1.0)
    assert est == pytest.approx(math.exp(x), rel=1e-9)


@pytest.mark.parametrize("order", [1, 2, 3])
def test_sine_derivatives(order):
    x = 0.7
    exact = [math.cos, lambda t: -math.sin(t), lambda t: -math.cos(t)][order - 1](x)
    est, _ = fd.derivative(math.sin, x, order, scale=1.0)
    assert est == pytest.approx(exact, rel=1e-7)


def test_polynomial_exact():
    # Richardson-extrapolated central differences are exact for low-degree polynomials
    f = lambda x: 2 * x ** 3 - x ** 2 + 5
    assert fd.derivative(f, 1.5, 3, scale=1.0)[0] == pytest.approx(12.0, rel=1e-8)
    assert fd.derivative(f, 1.5, 2, scale=1.0)[0] == pytest.approx(16.0, rel=1e-9)


def test_mixed_partial():
    f = lambda x, y: math.sin(x) * math.exp(2 * y)
    est = fd.partial(f, (0.3, 0.2), (1, 1), scales=(1.0, 1.0))
    assert est == pytest.approx(2 * math.cos(0.3) * math.exp(0.4), rel=1e-8)
    assert fd.partial(f, (0.3, 0.2), (0, 0)) == f(0.3, 0.2)


def test_jacobian():
    F = lambda q: np.array([q[0] ** 2 * q[1], math.sin(q[1])])
    J = fd.jacobian(F, [1.2, 0.4], scales=[1.0, 1.0])
    np.testing.assert_allclose(J, [[2 * 1.2 * 0.4, 1.44], [0.0, math.cos(0.4)]], rtol=1e-9, atol=1e-12)


def test_unsupported_order():
    with pytest.raises((ValueError, KeyError)):
        fd.derivative(math.sin, 0.0, 4)
