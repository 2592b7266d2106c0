"""Single-cell and network vector fields of the three-time-scale beta-cell model.

State layout for one cell is ``(v, u, x, y, z)``: membrane potential (mV),
K+ gating, cytosolic Ca2+ (uM), ADP/ATP-like slow variable and the ER
variable.  Time is in ms throughout.

The hot paths (``cell_rhs``, ``network_rhs``) are numba-compiled and take a
packed float64 parameter vector (see :meth:`CellParams.as_array`) so that the
integrator can call them without Python overhead.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from numba import njit


class DomainError(ValueError):
    """Raised when a state or parameter falls outside the model's domain."""


PARAM_NAMES = (
    "a1", "a2", "a3", "a4", "a5", "a6", "a7",
    "v1", "v2", "s1", "s2", "s3",
    "d1", "d2", "d3", "k1", "k2",
    "p_r", "k_r", "K_d", "eps", "delta", "G",
)
_IX = {name: i for i, name in enumerate(PARAM_NAMES)}

# index constants for the jitted kernels
A1, A2, A3, A4, A5, A6, A7 = range(7)
V1, V2, S1, S2, S3 = range(7, 12)
D1, D2, D3, K1, K2 = range(12, 17)
PR, KR, KD, EPS, DELTA, GLU = range(17, 23)


@dataclasses.dataclass(frozen=True)
class CellParams:
    """Parameters of one cell; defaults are the published G = 8 mM set."""

    a1: float = 0.226
    a2: float = 25.0
    a3: float = 0.566038
    a4: float = 0.00189
    a5: float = 0.0943
    a6: float = -75.0
    a7: float = 0.0625
    v1: float = -20.0
    v2: float = -16.0
    s1: float = 12.0
    s2: float = 5.0
    s3: float = 0.1
    d1: float = 0.144
    d2: float = 16.0
    d3: float = 0.013
    k1: float = 5977.6
    k2: float = 7.463
    p_r: float = 1.75
    k_r: float = 58.0
    K_d: float = 0.3
    eps: float = 3.753e-4
    delta: float = 0.0089
    G: float = 8.0

    def __post_init__(self):
        for name in PARAM_NAMES:
            value = getattr(self, name)
            if not math.isfinite(value):
                raise DomainError(f"parameter {name} is not finite: {value!r}")
        for name in ("s1", "s2", "s3", "k_r", "K_d", "eps", "delta"):
            if getattr(self, name) <= 0:
                raise DomainError(f"parameter {name} must be positive, got {getattr(self, name)}")

    def replace(self, **changes) -> "CellParams":
        unknown = set(changes) - set(PARAM_NAMES)
        if unknown:
            raise KeyError(f"unknown parameter(s): {', '.join(sorted(unknown))}")
        return dataclasses.replace(self, **changes)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in PARAM_NAMES], dtype=np.float64)

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @property
    def x_half(self) -> float:
        """Ca2+ level at which the ADP/ATP gate is half open, (G - p_r)/k_r."""
        return (self.G - self.p_r) / self.k_r


class CellState(NamedTuple):
    v: float
    u: float
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)


@dataclasses.dataclass(frozen=True)
class NetworkParams:
    """All-to-all diffusively coupled population of (possibly different) cells."""

    cells: tuple[CellParams, ...]
    k: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        if len(self.cells) < 1:
            raise DomainError("network needs at least one cell")
        if not (math.isfinite(self.k) and self.k >= 0):
            raise DomainError(f"coupling strength must be finite and >= 0, got {self.k}")

    @property
    def N(self) -> int:
        return len(self.cells)

    @classmethod
    def homogeneous(cls, n: int, k: float = 0.0, cell: CellParams | None = None) -> "NetworkParams":
        return cls(cells=(cell or CellParams(),) * n, k=k)

    def with_k(self, k: float) -> "NetworkParams":
        return dataclasses.replace(self, k=k)

    def with_G(self, G: float) -> "NetworkParams":
        return dataclasses.replace(self, cells=tuple(c.replace(G=G) for c in self.cells))

    def as_array(self) -> np.ndarray:
        return np.stack([c.as_array() for c in self.cells])


# ---------------------------------------------------------------------------
# parameter files

def load_params(path: str | Path, base: CellParams | None = None) -> CellParams:
    """Read a ``name = value`` parameter file (``#`` starts a comment)."""
    return (base or CellParams()).replace(**parse_param_text(Path(path).read_text()))


def parse_param_text(text: str) -> dict[str, float]:
    values: dict[str, float] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'name = value', got {raw!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in _IX:
            raise KeyError(f"line {lineno}: unknown parameter {key!r}")
        try:
            values[key] = float(value)
        except ValueError:
            raise ValueError(f"line {lineno}: value for {key!r} is not a number: {value!r}") from None
    return values


def format_params(p: CellParams) -> str:
    return "".join(f"{name} = {getattr(p, name)!r}\n" for name in PARAM_NAMES)


# ---------------------------------------------------------------------------
# gating functions (numpy-aware, public)

def gate_X(v, p: CellParams):
    """Steady-state Ca2+ channel activation (Boltzmann in v)."""
    return 1.0 / (1.0 + np.exp((p.v1 - np.asarray(v, dtype=float)) / p.s1))


def gate_Y(v, p: CellParams):
    """Steady-state K+ activation (Boltzmann in v)."""
    return 1.0 / (1.0 + np.exp((p.v2 - np.asarray(v, dtype=float)) / p.s2))


def gate_Z(x, p: CellParams):
    """Steady-state ADP/ATP level (Boltzmann in x, centred at (G - p_r)/k_r)."""
    return 1.0 / (1.0 + np.exp((p.x_half - np.asarray(x, dtype=float)) / p.s3))


def gate_U(x, p: CellParams):
    """Ca2+-activated K+ gate, Hill form of order 5. Only defined for x > 0."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise DomainError("Hill function singular at zero concentration (x must be > 0)")
    return 1.0 / (1.0 + (p.K_d / x) ** 5)


# ---------------------------------------------------------------------------
# jitted kernels

@njit(cache=True)
def _cell_terms(v, u, x, y, z, p):
    Xv = 1.0 / (1.0 + math.exp((p[V1] - v) / p[S1]))
    Yv = 1.0 / (1.0 + math.exp((p[V2] - v) / p[S2]))
    Zx = 1.0 / (1.0 + math.exp(((p[GLU] - p[PR]) / p[KR] - x) / p[S3]))
    if x > 0.0:
        Ux = 1.0 / (1.0 + (p[KD] / x) ** 5)
    else:
        Ux = math.nan
    h1 = -(p[A1] * Xv * (v - p[A2]) + (p[A3] * u + p[A4] * Ux + p[A5] * y) * (v - p[A6]))
    h2 = p[A7] * (Yv - u)
    f = -p[D1] * Xv * (v - p[A2]) - p[D2] * x + p[D3] * z
    g1 = Zx - y
    g2 = p[K1] * x - p[K2] * z
    return h1, h2, f, g1, g2


@njit(cache=True)
def cell_rhs(t, s, p):
    """Right-hand side of one cell; ``p`` is ``CellParams.as_array()``."""
    h1, h2, f, g1, g2 = _cell_terms(s[0], s[1], s[2], s[3], s[4], p)
    out = np.empty(5)
    out[0] = h1
    out[1] = h2
    out[2] = p[EPS] * f
    out[3] = p[EPS] * p[DELTA] * g1
    out[4] = p[EPS] * p[DELTA] * g2
    return out


@njit(cache=True)
def network_rhs(t, s, args):
    """Right-hand side of the coupled network.

    ``args = (P, k)`` with ``P`` of shape (N, n_params); the state is cell-major,
    ``[v_1, u_1, x_1, y_1, z_1, v_2, ...]``.
    """
    P, k = args
    n = P.shape[0]
    out = np.empty(5 * n)
    vsum = 0.0
    for i in range(n):
        vsum += s[5 * i]
    for i in range(n):
        j = 5 * i
        p = P[i]
        h1, h2, f, g1, g2 = _cell_terms(s[j], s[j + 1], s[j + 2], s[j + 3], s[j + 4], p)
        if k != 0.0:
            h1 += (k / n) * (vsum - n * s[j])
        out[j] = h1
        out[j + 1] = h2
        out[j + 2] = p[EPS] * f
        out[j + 3] = p[EPS] * p[DELTA] * g1
        out[j + 4] = p[EPS] * p[DELTA] * g2
    return out


# ---------------------------------------------------------------------------
# public, validated wrappers

def _check_state(s, width: int = 5) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (width,):
        raise ValueError(f"expected a state of length {width}, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise DomainError(f"non-finite state {s}")
    return s


def _warn_gate(u: float) -> None:
    if not (0.0 <= u <= 1.0):
        warnings.warn(f"gating variable u={u} outside [0, 1]", RuntimeWarning, stacklevel=3)


def rhs_single(s, p: CellParams) -> np.ndarray:
    """Per-ms derivative ``(h1, h2, eps f, eps delta g1, eps delta g2)`` of one cell."""
    s = _check_state(s)
    if s[2] <= 0:
        raise DomainError("Hill function singular at zero concentration (x must be > 0)")
    _warn_gate(s[1])
    return cell_rhs(0.0, s, p.as_array())


def rhs_network(ns, netp: NetworkParams) -> np.ndarray:
    """Derivative of the stacked network state (shape (5N,) or (N, 5))."""
    ns = np.asarray(ns, dtype=np.float64)
    shape = ns.shape
    flat = ns.reshape(-1)
    if flat.size != 5 * netp.N:
        raise ValueError(f"state holds {flat.size / 5:g} cells but the network has {netp.N}")
    if not np.all(np.isfinite(flat)):
        raise DomainError("non-finite network state")
    if np.any(flat[2::5] <= 0):
        raise DomainError("Hill function singular at zero concentration (x must be > 0)")
    return network_rhs(0.0, flat, (netp.as_array(), float(netp.k))).reshape(shape)


def h1(v, u, x, y, p: CellParams):
    return -(p.a1 * gate_X(v, p) * (v - p.a2) + (p.a3 * u + p.a4 * gate_U(x, p) + p.a5 * y) * (v - p.a6))


def h2(v, u, p: CellParams):
    return p.a7 * (gate_Y(v, p) - u)


def f_int(v, x, z, p: CellParams):
    """Intermediate (Ca2+) equation without the eps factor."""
    return -p.d1 * gate_X(v, p) * (v - p.a2) - p.d2 * x + p.d3 * z


def g1(x, y, p: CellParams):
    return gate_Z(x, p) - y


def g2(x, z, p: CellParams):
    return p.k1 * x - p.k2 * z


def rhs_reduced4(s4, psp, p: CellParams) -> np.ndarray:
    """4D vector field in coordinates centred at a pseudo-singular point.

    ``u`` is slaved to its quasi-steady state ``Y(v_p + v)``; returns
    ``(h, eps f, eps delta g1, eps delta g2)`` evaluated at the shifted state.
    ``psp`` is anything with a ``location`` 5-vector or a plain 5-vector.
    """
    s4 = _check_state(s4, 4)
    loc = np.asarray(getattr(psp, "location", psp), dtype=float)
    vp, _, xp, yp, zp = loc
    v, x, y, z = s4 + np.array([vp, xp, yp, zp])
    if x <= 0:
        raise DomainError("Hill function singular at zero concentration (x + x_p must be > 0)")
    hh = h1(v, gate_Y(v, p), x, y, p)
    return np.array([
        hh,
        p.eps * f_int(v, x, z, p),
        p.eps * p.delta * g1(x, y, p),
        p.eps * p.delta * g2(x, z, p),
    ])


DEFAULT_IC = CellState(v=-60.0, u=0.0, x=0.09, y=0.45, z=80.0)
