"""Critical manifolds C and C1, the fold curve L, and manifold meshes."""

from __future__ import annotations

import dataclasses
import warnings
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import brentq

from .model import CellParams, DomainError, gate_U, gate_X, gate_Y, gate_Z


class FastPartials(NamedTuple):
    """First partials of h1, h2, f at a state (the ones the slow flow needs)."""

    h1v: float
    h1u: float
    h1x: float
    h1y: float
    h2v: float
    h2u: float
    fv: float
    fx: float
    fz: float


def _logistic_slope(sig, s):
    return sig * (1.0 - sig) / s


def dU_dx(x, p: CellParams):
    U = gate_U(x, p)
    return 5.0 * U * (1.0 - U) / x


def fast_partials(s, p: CellParams) -> FastPartials:
    v, u, x, y, _ = (float(c) for c in s)
    X = gate_X(v, p)
    U = gate_U(x, p)
    dX = _logistic_slope(X, p.s1)
    dY = _logistic_slope(gate_Y(v, p), p.s2)
    return FastPartials(
        h1v=-(p.a1 * (dX * (v - p.a2) + X) + p.a3 * u + p.a4 * U + p.a5 * y),
        h1u=-p.a3 * (v - p.a6),
        h1x=-p.a4 * dU_dx(x, p) * (v - p.a6),
        h1y=-p.a5 * (v - p.a6),
        h2v=p.a7 * dY,
        h2u=-p.a7,
        fv=-p.d1 * (dX * (v - p.a2) + X),
        fx=-p.d2,
        fz=p.d3,
    )


def residual_C(s, p: CellParams) -> tuple[float, float]:
    """``(r1, r2)``: the h1 = 0 relation with u = Y(v), and u - Y(v)."""
    v, u, x, y, _ = (float(c) for c in s)
    if x == 0:
        raise DomainError("Hill function singular at zero concentration (x must be > 0)")
    Yv = float(gate_Y(v, p))
    r1 = p.a1 * float(gate_X(v, p)) * (v - p.a2) + (p.a3 * Yv + p.a4 * float(gate_U(x, p)) + p.a5 * y) * (v - p.a6)
    return r1, u - Yv


def solve_y_on_C(v, x, p: CellParams):
    """The y that puts ``(v, Y(v), x, y)`` on C."""
    v = np.asarray(v, dtype=float)
    if np.any(v == p.a6):
        raise DomainError(f"y on C is singular at v = a6 = {p.a6}")
    return (
        -(p.a1 * gate_X(v, p) * (v - p.a2)) / (p.a5 * (v - p.a6))
        - (p.a3 / p.a5) * gate_Y(v, p)
        - (p.a4 / p.a5) * gate_U(x, p)
    )


def x_on_C1(v, z, p: CellParams):
    """The x with f(v, x, z) = 0."""
    return (p.d3 * np.asarray(z, dtype=float) - p.d1 * gate_X(v, p) * (v - p.a2)) / p.d2


def z_on_C1(v, x, p: CellParams):
    return (p.d2 * np.asarray(x, dtype=float) + p.d1 * gate_X(v, p) * (v - p.a2)) / p.d3


def residual_C1(s, p: CellParams) -> float:
    v, _, x, _, z = (float(c) for c in s)
    if x == 0:
        raise DomainError("Hill function singular at zero concentration (x must be > 0)")
    return x - float(x_on_C1(v, z, p))


def point_on_C(v: float, x: float, z: float, p: CellParams) -> np.ndarray:
    return np.array([v, float(gate_Y(v, p)), x, float(solve_y_on_C(v, x, p)), z])


def point_on_C1(v: float, z: float, p: CellParams) -> np.ndarray:
    """The C1 point over the ``(v, z)`` chart."""
    x = float(x_on_C1(v, z, p))
    if x <= 0:
        raise DomainError(f"C1 chart gives x = {x} <= 0 at v={v}, z={z}")
    return point_on_C(v, x, z, p)


def fold_residual(s, p: CellParams, tol: float = 1e-6) -> float:
    """``det D_(v,u)(h1, h2)``; zero exactly on the fold curve L."""
    r1, r2 = residual_C(s, p)
    d = fast_partials(s, p)
    if max(abs(r1) / max(1.0, abs(p.a1 * (s[0] - p.a2))), abs(r2)) > tol:
        warnings.warn("fold_residual evaluated off the critical manifold", RuntimeWarning, stacklevel=2)
    return d.h1v * d.h2u - d.h1u * d.h2v


def fold_scale(s, p: CellParams) -> float:
    """Magnitude of the two products making up the fold determinant."""
    d = fast_partials(s, p)
    return max(abs(d.h1v * d.h2u), abs(d.h1u * d.h2v))


@dataclasses.dataclass(frozen=True)
class ManifoldSample:
    kind: str
    axes: tuple[str, str]
    grid: tuple[np.ndarray, np.ndarray]
    points: np.ndarray  # (n1, n2, 5); NaN rows at flagged nodes
    residual: np.ndarray  # (n1, n2)
    flagged: np.ndarray  # (n1, n2) bool

    @property
    def empty(self) -> bool:
        return self.points.size == 0

    def rows(self):
        """Flattened ``(axis1, axis2, v, u, x, y, z, residual)`` rows."""
        a, b = np.meshgrid(*self.grid, indexing="ij")
        return np.column_stack([a.ravel(), b.ravel(), self.points.reshape(-1, 5), self.residual.ravel()])


_AXES = {"C": ("v", "x"), "C1": ("v", "z")}


def sample_manifold(
    p: CellParams,
    kind: str = "C",
    ranges: Sequence[tuple[float, float]] = ((-75.0, -20.0), (0.05, 0.3)),
    resolution: int | tuple[int, int] = 50,
) -> ManifoldSample:
    """Mesh C over ``(v, x)`` or C1 over ``(v, z)``.

    On C the z coordinate is taken from the f = 0 relation, i.e. it shows where
    C1 sits inside C.  Nodes where the explicit solve is undefined are flagged.
    """
    if kind not in _AXES:
        raise ValueError(f"kind must be one of {sorted(_AXES)}")
    n1, n2 = (resolution, resolution) if np.isscalar(resolution) else resolution
    if n1 < 2 or n2 < 2:
        raise ValueError("resolution must be >= 2")
    (lo1, hi1), (lo2, hi2) = ranges
    if not all(np.isfinite([lo1, hi1, lo2, hi2])):
        raise ValueError("ranges must be finite")
    if hi1 <= lo1 or hi2 <= lo2:
        e = np.empty((0, 0))
        return ManifoldSample(kind, _AXES[kind], (np.empty(0), np.empty(0)), np.empty((0, 0, 5)), e, e.astype(bool))
    g1 = np.linspace(lo1, hi1, n1)
    g2 = np.linspace(lo2, hi2, n2)
    pts = np.full((n1, n2, 5), np.nan)
    res = np.full((n1, n2), np.nan)
    flagged = np.zeros((n1, n2), dtype=bool)
    for i, a in enumerate(g1):
        for j, b in enumerate(g2):
            try:
                if kind == "C":
                    s = point_on_C(a, b, float(z_on_C1(a, b, p)), p)
                    r = max(abs(c) for c in residual_C(s, p))
                else:
                    s = point_on_C1(a, b, p)
                    r = max(max(abs(c) for c in residual_C(s, p)), abs(residual_C1(s, p)))
            except DomainError:
                flagged[i, j] = True
                continue
            if not np.all(np.isfinite(s)):
                flagged[i, j] = True
                continue
            pts[i, j] = s
            res[i, j] = r
    return ManifoldSample(kind, _AXES[kind], (g1, g2), pts, res, flagged)


def fold_curve(sample: ManifoldSample, p: CellParams) -> np.ndarray:
    """Points of L where the fold determinant changes sign along the v axis.

    Each bracket found on the mesh is refined by a root solve along v with the
    second chart coordinate held fixed.  Returns an (m, 5) array.
    """
    if sample.empty:
        return np.empty((0, 5))
    g1, g2 = sample.grid
    out = []
    for j, b in enumerate(g2):
        def det_at(v):
            s = point_on_C(v, b, float(z_on_C1(v, b, p)), p) if sample.kind == "C" else point_on_C1(v, b, p)
            d = fast_partials(s, p)
            return d.h1v * d.h2u - d.h1u * d.h2v

        vals = []
        for i, a in enumerate(g1):
            vals.append(np.nan if sample.flagged[i, j] else det_at(a))
        vals = np.asarray(vals)
        for i in range(len(g1) - 1):
            va, vb = vals[i], vals[i + 1]
            if np.isfinite(va) and np.isfinite(vb) and va * vb < 0:
                v_root = brentq(det_at, g1[i], g1[i + 1], xtol=1e-12)
                s = point_on_C(v_root, b, float(z_on_C1(v_root, b, p)), p) if sample.kind == "C" else point_on_C1(v_root, b, p)
                out.append(s)
    return np.array(out) if out else np.empty((0, 5))
