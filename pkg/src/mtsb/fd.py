"""Central finite differences with Richardson extrapolation.

Used as the independent check on the analytic partial derivatives.  All
stencils are second-order accurate in the step, so two Richardson levels
(factors 4 and 16) lift them to sixth order.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

# relative base steps per derivative order; higher orders need wider stencils
# to keep cancellation error below truncation error
BASE_STEP = {1: 1e-3, 2: 1e-2, 3: 2e-2}


def _stencil(f: Callable[[float], float], x: float, h: float, order: int) -> float:
    if order == 1:
        return (f(x + h) - f(x - h)) / (2 * h)
    if order == 2:
        return (f(x + h) - 2 * f(x) + f(x - h)) / (h * h)
    if order == 3:
        return (f(x + 2 * h) - 2 * f(x + h) + 2 * f(x - h) - f(x - 2 * h)) / (2 * h ** 3)
    raise ValueError(f"unsupported derivative order {order}")


def step_for(x: float, order: int, scale: float | None = None) -> float:
    ref = abs(x) if scale is None else scale
    return BASE_STEP[order] * max(ref, 1e-6)


def derivative(
    f: Callable[[float], float], x: float, order: int = 1, h: float | None = None,
    scale: float | None = None,
) -> tuple[float, float]:
    """Return ``(estimate, error_estimate)`` for the ``order``-th derivative at ``x``."""
    h = step_for(x, order, scale) if h is None else h
    d = [_stencil(f, x, h / 2 ** i, order) for i in range(3)]
    r1 = [(4 * d[i + 1] - d[i]) / 3 for i in range(2)]
    r2 = (16 * r1[1] - r1[0]) / 15
    return r2, abs(r2 - r1[1])


def partial(
    f: Callable[..., float], point: Sequence[float], counts: Sequence[int],
    scales: Sequence[float] | None = None,
) -> float:
    """Mixed partial derivative; ``counts[i]`` is the order in argument ``i``.

    Mixed partials are computed by nesting one-dimensional Richardson
    derivatives, innermost over the last differentiated argument.
    """
    point = [float(v) for v in point]
    axes = [(i, c) for i, c in enumerate(counts) if c]
    if not axes:
        return float(f(*point))
    scales = scales or [None] * len(point)

    def nested(level: int, pt: list[float]) -> float:
        i, c = axes[level]

        def g(xi: float) -> float:
            q = list(pt)
            q[i] = xi
            if level + 1 == len(axes):
                return float(f(*q))
            return nested(level + 1, q)

        return derivative(g, pt[i], c, scale=scales[i])[0]

    return nested(0, point)


def jacobian(F: Callable[[np.ndarray], np.ndarray], x, scales=None) -> np.ndarray:
    """Jacobian of a vector function by Richardson-extrapolated central differences."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        def g(xi, i=i):
            q = x.copy()
            q[i] = xi
            return np.asarray(F(q), dtype=float)
        sc = None if scales is None else scales[i]
        cols.append(derivative(g, x[i], 1, scale=sc)[0])
    return np.column_stack(cols)
