"""Normal-form coefficients at a PSP and the chart-K3 blow-up dynamics.

Partials are taken of the shifted, u-eliminated system

    ĥ(v, x, y)  = h1(v_p + v, Y(v_p + v), x_p + x, y_p + y)
    f̂(v, x, z)  = f(v_p + v, x_p + x, z_p + z)
    ĝ1(x, y), ĝ2(x, z)   likewise

at the origin.  Closed-form derivatives are the source of truth; a
Richardson finite-difference pass guards them against formula slips.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Mapping, Sequence

import numpy as np
from numba import njit

from . import fd
from .integrate import IntegrationError, IntegratorConfig, integrate
from .model import CellParams, DomainError, gate_U, gate_X, gate_Y, gate_Z


class PartialsMismatch(RuntimeError):
    pass


def _logistic_derivs(sig, s):
    """First three derivatives of a logistic gate with slope parameter ``s``."""
    q = sig * (1.0 - sig)
    return q / s, q * (1.0 - 2.0 * sig) / s ** 2, q * (1.0 - 6.0 * sig + 6.0 * sig * sig) / s ** 3


def _hill_derivs(x, p: CellParams):
    """First three derivatives of the order-5 Hill gate."""
    U = float(gate_U(x, p))
    d1 = 5.0 * U * (1.0 - U) / x
    P = U * (1.0 - U) * (20.0 - 50.0 * U)
    dP = (1.0 - 2.0 * U) * (20.0 - 50.0 * U) - 50.0 * U * (1.0 - U)
    d2 = P / x ** 2
    d3 = dP * d1 / x ** 2 - 2.0 * P / x ** 3
    return U, d1, d2, d3


BUNDLE_FIELDS = (
    "h_v", "h_u", "h_x", "h_y", "h_vv", "h_vx", "h_vy", "h_xx", "h_vvv", "h_xxx",
    "f_v", "f_x", "f_z", "f_vv", "f_vvv",
    "g1_0", "g1_x", "g1_y", "g1_xx", "g1_xxx",
    "g2_0", "g2_x", "g2_z",
)


@dataclasses.dataclass(frozen=True)
class PartialBundle:
    h_v: float
    h_u: float
    h_x: float
    h_y: float
    h_vv: float
    h_vx: float
    h_vy: float
    h_xx: float
    h_vvv: float
    h_xxx: float
    f_v: float
    f_x: float
    f_z: float
    f_vv: float
    f_vvv: float
    g1_0: float
    g1_x: float
    g1_y: float
    g1_xx: float
    g1_xxx: float
    g2_0: float
    g2_x: float
    g2_z: float

    def __getitem__(self, key: str) -> float:
        return getattr(self, key)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def analytic_partials(s, p: CellParams) -> PartialBundle:
    """Closed-form partials of ĥ, f̂, ĝ1, ĝ2 at the state ``s`` (the shift origin)."""
    v, _, x, y, z = (float(c) for c in s)
    if x <= 0:
        raise DomainError("Hill function singular at zero concentration (x must be > 0)")
    X = float(gate_X(v, p))
    Yg = float(gate_Y(v, p))
    Zg = float(gate_Z(x, p))
    X1, X2, X3 = _logistic_derivs(X, p.s1)
    Y1, Y2, Y3 = _logistic_derivs(Yg, p.s2)
    Z1, Z2, Z3 = _logistic_derivs(Zg, p.s3)
    U, U1, U2, U3 = _hill_derivs(x, p)
    va2, va6 = v - p.a2, v - p.a6

    # A(v) = a1 X (v - a2) + a3 Y (v - a6) collects the v-only part of -ĥ
    A1 = p.a1 * (X1 * va2 + X) + p.a3 * (Y1 * va6 + Yg)
    A2 = p.a1 * (X2 * va2 + 2 * X1) + p.a3 * (Y2 * va6 + 2 * Y1)
    A3 = p.a1 * (X3 * va2 + 3 * X2) + p.a3 * (Y3 * va6 + 3 * Y2)
    return PartialBundle(
        h_v=-(A1 + p.a4 * U + p.a5 * y),
        h_u=-p.a3 * va6,
        h_x=-p.a4 * U1 * va6,
        h_y=-p.a5 * va6,
        h_vv=-A2,
        h_vx=-p.a4 * U1,
        h_vy=-p.a5,
        h_xx=-p.a4 * U2 * va6,
        h_vvv=-A3,
        h_xxx=-p.a4 * U3 * va6,
        f_v=-p.d1 * (X1 * va2 + X),
        f_x=-p.d2,
        f_z=p.d3,
        f_vv=-p.d1 * (X2 * va2 + 2 * X1),
        f_vvv=-p.d1 * (X3 * va2 + 3 * X2),
        g1_0=Zg - y,
        g1_x=Z1,
        g1_y=-1.0,
        g1_xx=Z2,
        g1_xxx=Z3,
        g2_0=p.k1 * x - p.k2 * z,
        g2_x=p.k1,
        g2_z=-p.k2,
    )


def _shifted_functions(s, p: CellParams):
    vp, _, xp, yp, zp = (float(c) for c in s)

    def hh(v, x, y):
        V = vp + v
        return -(p.a1 * gate_X(V, p) * (V - p.a2)
                 + (p.a3 * gate_Y(V, p) + p.a4 * gate_U(xp + x, p) + p.a5 * (yp + y)) * (V - p.a6))

    def ff(v, x, z):
        V = vp + v
        return -p.d1 * gate_X(V, p) * (V - p.a2) - p.d2 * (xp + x) + p.d3 * (zp + z)

    def gg1(x, y):
        return gate_Z(xp + x, p) - (yp + y)

    def gg2(x, z):
        return p.k1 * (xp + x) - p.k2 * (zp + z)

    return hh, ff, gg1, gg2


# (function, derivative counts) for each bundle entry
_FD_SPEC = {
    "h_v": ("h", (1, 0, 0)), "h_x": ("h", (0, 1, 0)), "h_y": ("h", (0, 0, 1)),
    "h_vv": ("h", (2, 0, 0)), "h_vx": ("h", (1, 1, 0)), "h_vy": ("h", (1, 0, 1)),
    "h_xx": ("h", (0, 2, 0)), "h_vvv": ("h", (3, 0, 0)), "h_xxx": ("h", (0, 3, 0)),
    "f_v": ("f", (1, 0, 0)), "f_x": ("f", (0, 1, 0)), "f_z": ("f", (0, 0, 1)),
    "f_vv": ("f", (2, 0, 0)), "f_vvv": ("f", (3, 0, 0)),
    "g1_x": ("g1", (1, 0)), "g1_y": ("g1", (0, 1)), "g1_xx": ("g1", (2, 0)), "g1_xxx": ("g1", (3, 0)),
    "g2_x": ("g2", (1, 0)), "g2_z": ("g2", (0, 1)),
}


def fd_partials(s, p: CellParams) -> dict:
    """Finite-difference estimates of the bundle entries (``h_u`` and values at 0 excluded)."""
    hh, ff, gg1, gg2 = _shifted_functions(s, p)
    funcs = {"h": hh, "f": ff, "g1": gg1, "g2": gg2}
    # step scales per coordinate: v on the gate widths (wide enough that roundoff
    # stays small in nested mixed differences), x on the Hill/Z width, y and z O(1)
    vs = 50.0
    xs = 2.0 * min(p.s3, float(s[2]))
    sc = {"h": (vs, xs, 1.0), "f": (vs, xs, 1.0), "g1": (xs, 1.0), "g2": (xs, 1.0)}
    out = {}
    for name, (fn, counts) in _FD_SPEC.items():
        out[name] = fd.partial(funcs[fn], [0.0] * len(counts), counts, sc[fn])
    return out


def cross_check(bundle: PartialBundle, s, p: CellParams) -> dict:
    """Relative analytic-vs-FD disagreement for every checked partial."""
    est = fd_partials(s, p)
    return {k: abs(bundle[k] - e) / max(abs(bundle[k]), 1e-300) for k, e in est.items()}


def derivative_order(name: str) -> int:
    return len(name.split("_")[1]) if "_" in name and name.split("_")[1] != "0" else 0


def compute_partials(psp, p: CellParams, *, check: bool = True,
                     tol: float = 1e-4, tol_third: float = 1e-3) -> PartialBundle:
    """Partials at a PSP (or any state), with the finite-difference guard."""
    s = np.asarray(getattr(psp, "location", psp), dtype=float)
    b = analytic_partials(s, p)
    if check:
        bad = {k: e for k, e in cross_check(b, s, p).items()
               if e > (tol_third if derivative_order(k) == 3 else tol)}
        if bad:
            raise PartialsMismatch(f"analytic and finite-difference partials disagree: {bad}")
    return b


COEFF_NAMES = (
    "H_XX", "H_VX", "H_VY", "H_VVV", "H_XXX", "F_V", "F_X", "F_Z", "F_VV", "F_VVV",
    "G_10", "G_1X", "G_1Y", "G_1XX", "G_1XXX", "G_2X", "G_2Z",
)
THIRD_ORDER = ("H_XXX", "G_1XXX", "F_VVV")

# published coefficient values at the G = 8 PSP
REFERENCE_COEFFS = {
    "H_XX": -3.42120e6, "H_VX": -4.99657e1, "H_VY": 4.99657e1, "H_VVV": 1.15445e1,
    "H_XXX": 3.58420e13, "F_V": 1.26600e-4, "F_X": -1.60000e1, "F_Z": -5.37860e-6,
    "F_VV": 2.93710e-3, "F_VVV": 3.76990e-2, "G_10": -1.00000e-4, "G_1X": -7.66910e2,
    "G_1Y": -1.0, "G_1XX": 2.20800e7, "G_1XXX": 1.68630e14, "G_2X": -1.44480e7,
    "G_2Z": -7.46300,
}


@dataclasses.dataclass(frozen=True)
class NormalFormCoeffs:
    H_XX: float
    H_VX: float
    H_VY: float
    H_VVV: float
    H_XXX: float
    F_V: float
    F_X: float
    F_Z: float
    F_VV: float
    F_VVV: float
    G_10: float
    G_1X: float
    G_1Y: float
    G_1XX: float
    G_1XXX: float
    G_2X: float
    G_2Z: float

    @property
    def b1(self):
        return self.F_V

    @property
    def b2(self):
        return self.F_Z

    @property
    def b3(self):
        return self.F_X

    @property
    def b4(self):
        return -self.G_1X

    @property
    def b5(self):
        return self.G_1Y

    @property
    def lam(self):
        return -self.G_10

    @classmethod
    def from_mapping(cls, m: Mapping[str, float]) -> "NormalFormCoeffs":
        return cls(**{k: float(m[k]) for k in COEFF_NAMES})

    @classmethod
    def reference(cls) -> "NormalFormCoeffs":
        return cls.from_mapping(REFERENCE_COEFFS)

    def as_dict(self, extended: bool = True) -> dict:
        d = {k: getattr(self, k) for k in COEFF_NAMES}
        if extended:
            d.update(b1=self.b1, b2=self.b2, b3=self.b3, b4=self.b4, b5=self.b5, lambda_=self.lam)
        return d

    def rows(self):
        return [(k.rstrip("_"), v) for k, v in self.as_dict().items()]

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in COEFF_NAMES])


def coeffs(b: PartialBundle) -> NormalFormCoeffs:
    """Normal-form coefficients from the partial bundle.

    F_Z is ``-ĥ_vv ĥ_x f̂_z ĝ2(0) / 2``: with X = -(ĥ_vv ĥ_x / 2) x and
    Z = z / ĝ2(0), the z-term of dX/dt picks up exactly this factor.
    """
    for name, val in (("h_vv", b.h_vv), ("h_x", b.h_x), ("g2(0)", b.g2_0), ("h_y", b.h_y)):
        if val == 0 or not math.isfinite(val):
            raise DomainError(f"normal form undefined: non-degeneracy condition {name} != 0 fails")
    hvv, hx, hy = b.h_vv, b.h_x, b.h_y
    return NormalFormCoeffs(
        H_XX=b.h_xx / (hvv * hx ** 2),
        H_VX=-2 * b.h_vx / (hvv * hx),
        H_VY=2 * b.h_vy / (hvv * hy),
        H_VVV=2 * b.h_vvv / (3 * hvv ** 2),
        H_XXX=-2 * b.h_xxx / (3 * hvv ** 2 * hx ** 3),
        F_V=-hx * b.f_v,
        F_X=b.f_x,
        F_Z=-hvv * hx * b.f_z * b.g2_0 / 2,
        F_VV=-hx * b.f_vv / hvv,
        F_VVV=-2 * hx * b.f_vvv / (3 * hvv ** 2),
        G_10=hvv * hy * b.g1_0 / 2,
        G_1X=-hy * b.g1_x / hx,
        G_1Y=b.g1_y,
        G_1XX=hy * b.g1_xx / (hvv * hx ** 2),
        G_1XXX=-2 * hy * b.g1_xxx / (3 * hvv ** 2 * hx ** 3),
        G_2X=-2 * b.g2_x / (hvv * hx * b.g2_0),
        G_2Z=b.g2_z,
    )


def F_Z_as_printed(b: PartialBundle) -> float:
    """The inverted form ``-2 f̂_z ĝ2(0) / (ĥ_vv ĥ_x)``, kept for comparison only."""
    return -2 * b.f_z * b.g2_0 / (b.h_vv * b.h_x)


# ---------------------------------------------------------------- chart K3

@dataclasses.dataclass(frozen=True)
class ChartK3State:
    v3: float
    x3: float
    y3: float
    z3: float
    r3: float = 0.0
    delta3: float = 0.0
    lambda3: float = 0.0

    def __post_init__(self):
        if self.r3 < 0:
            raise ValueError("r3 must be >= 0")

    @property
    def vec(self) -> np.ndarray:
        return np.array([self.v3, self.x3, self.y3, self.z3])


@njit(cache=True)
def _k3_field(t, w, args):
    c, r3, d3, l3, cap = args
    v, x, y, z = w[0], w[1], w[2], w[3]
    if abs(v) > cap:
        # frozen beyond the escape threshold so finite-time blow-up ends a run cleanly
        return np.zeros(4)
    H_XX, H_VX, H_VY, H_VVV, H_XXX = c[0], c[1], c[2], c[3], c[4]
    F_V, F_X, F_Z, F_VV, F_VVV = c[5], c[6], c[7], c[8], c[9]
    G_10, G_1X, G_1Y, G_1XX, G_1XXX, G_2X, G_2Z = c[10], c[11], c[12], c[13], c[14], c[15], c[16]
    b1, b2, b3, b4, b5, lam = F_V, F_Z, F_X, -G_1X, G_1Y, -G_10
    r2 = r3 * r3
    out = np.empty(4)
    out[0] = -x + v * v + r3 * (r3 * y + r3 * H_XX * x * x + H_VX * v * x + r2 * H_VY * v * y
                                + H_VVV * v ** 3 + r2 * r3 * H_XXX * x ** 3)
    out[1] = b1 * v + r3 * (b2 * z + b3 * x + F_VV * v * v + r3 * F_VVV * v ** 3)
    out[2] = d3 * (-l3 - b4 * x + r2 * (-b5 * y + G_1XX * x * x + r2 * G_1XXX * x ** 3))
    out[3] = d3 * (1.0 + r2 * (G_2X * x + G_2Z * z))
    return out


def k3_rhs(s: ChartK3State, c: NormalFormCoeffs) -> np.ndarray:
    """The truncated chart-K3 field ``(dv3, dx3, dy3, dz3)``; r3, δ3, λ3 are constants."""
    return _k3_field(0.0, s.vec, (c.as_array(), float(s.r3), float(s.delta3), float(s.lambda3), np.inf))


def special_solution(c: NormalFormCoeffs, delta3: float, lambda3: float, z30: float, t3):
    """The closed-form r3 = 0 solution γ(t3) as an ``(n, 4)`` array (or 4-vector for scalar t3)."""
    t = np.asarray(t3, dtype=float)
    b1, b4 = c.b1, c.b4
    out = np.stack([
        b1 / 2 * t,
        b1 ** 2 / 4 * t ** 2 - b1 / 2,
        delta3 * ((b1 * b4 / 2 - lambda3) * t - b1 ** 2 * b4 / 12 * t ** 3),
        delta3 * t + z30,
    ], axis=-1)
    return out


def special_solution_derivative(c: NormalFormCoeffs, delta3: float, lambda3: float, t3):
    t = np.asarray(t3, dtype=float)
    b1, b4 = c.b1, c.b4
    return np.stack([
        np.full_like(t, b1 / 2),
        b1 ** 2 / 2 * t,
        delta3 * ((b1 * b4 / 2 - lambda3) - b1 ** 2 * b4 / 4 * t ** 2),
        np.full_like(t, delta3),
    ], axis=-1)


def special_solution_residual(c: NormalFormCoeffs, delta3: float, lambda3: float, z30: float, t3) -> np.ndarray:
    """``dγ/dt3 - K3(γ)`` at r3 = 0, per sample and component."""
    t = np.atleast_1d(np.asarray(t3, dtype=float))
    g = special_solution(c, delta3, lambda3, z30, t)
    dg = special_solution_derivative(c, delta3, lambda3, t)
    arr = c.as_array()
    field = np.array([_k3_field(0.0, row, (arr, 0.0, float(delta3), float(lambda3), np.inf)) for row in g])
    return dg - field


def y3_oracle_report(c: NormalFormCoeffs, delta3: float, lambda3: float, z30: float = 0.0,
                     t_range=(-10.0, 10.0), n: int = 1001) -> dict:
    """Substitution check of every γ component against the r3 = 0 field."""
    t = np.linspace(*t_range, n)
    res = special_solution_residual(c, delta3, lambda3, z30, t)
    return {
        "t_range": list(t_range),
        "samples": n,
        "delta3": delta3,
        "lambda3": lambda3,
        "max_abs_residual": {k: float(np.max(np.abs(res[:, i]))) for i, k in enumerate(("v3", "x3", "y3", "z3"))},
        "y3_cubic_coefficient": -c.b1 ** 2 * c.b4 / 12,
        "y3_consistent": bool(np.max(np.abs(res[:, 2])) <= 1e-9 * max(1.0, abs(delta3) * (abs(lambda3) + 1))),
    }


def chart_parameters(c: NormalFormCoeffs, r3: float, p: CellParams) -> tuple[float, float]:
    """``(δ3, λ3)`` from the physical δ and λ = -G_10 at a given r3."""
    if r3 <= 0:
        raise ValueError("r3 must be > 0 to map physical parameters into the chart")
    return p.delta / r3, c.lam / r3 ** 2


ESCAPE_V3 = 50.0


@dataclasses.dataclass(frozen=True)
class BlowupRun:
    r3: float
    delta3: float
    lambda3: float
    t3: np.ndarray
    states: np.ndarray  # (n, 4)
    special: np.ndarray  # γ on the same times
    escaped: bool
    escape_time: float
    failed: str | None = None

    def rows(self):
        for branch, arr in (("special", self.special), ("perturbed", self.states)):
            for t, s in zip(self.t3, arr):
                yield (self.r3, t, *s, branch)


def default_ic_offset(c: NormalFormCoeffs) -> np.ndarray:
    """Start a tenth of b1 inside the separatrix (its vertex sits at x3 = -b1/2)."""
    return np.array([0.0, c.b1 / 10, 0.0, 0.0])


def compare_blowup(
    c: NormalFormCoeffs,
    r3_values: Sequence[float],
    t3_span: tuple[float, float] = (-5.0, 5000.0),
    ic_offset: Sequence[float] | None = None,
    *,
    p: CellParams | None = None,
    delta3: float | None = None,
    lambda3: float | None = None,
    z30: float = 0.0,
    samples: int = 4001,
    escape: float = ESCAPE_V3,
    cfg: IntegratorConfig | None = None,
) -> list[BlowupRun]:
    """Integrate the chart-K3 field from γ(t3_span[0]) + offset for each r3.

    δ3 and λ3 are held fixed across the r3 values; by default they are the
    physical values at r3 = sqrt(eps), so r3 acts purely as the perturbation
    parameter.  Samples after the first with |v3| > ``escape`` are dropped.
    """
    p = p or CellParams()
    max_r3 = math.sqrt(p.eps) * 10
    if any(r < 0 or r > max_r3 * (1 + 1e-12) for r in r3_values):
        raise ValueError(f"r3 values must lie in [0, {max_r3:.6g}]")
    t0, t1 = map(float, t3_span)
    if not t1 > t0:
        raise ValueError("t3_span must be increasing")
    d_phys, l_phys = chart_parameters(c, math.sqrt(p.eps), p)
    d3 = d_phys if delta3 is None else float(delta3)
    l3 = l_phys if lambda3 is None else float(lambda3)
    offset = default_ic_offset(c) if ic_offset is None else np.asarray(ic_offset, dtype=float)
    cfg = cfg or IntegratorConfig(rtol=1e-10, atol=1e-12, h_init=1e-4, h_max=(t1 - t0) / 200)
    grid = np.linspace(t0, t1, samples)
    g = special_solution(c, d3, l3, z30, grid)
    arr = c.as_array()
    runs = []
    for r3 in r3_values:
        y0 = g[0] + offset
        failed = None
        try:
            tr = integrate(_k3_field, y0, (t0, t1), cfg, (arr, float(r3), d3, l3, float(escape)))
            states = tr(grid)
        except IntegrationError as exc:
            failed = str(exc)
            states = np.full((samples, 4), np.nan)
            states[0] = y0
        over = np.nonzero(np.abs(states[:, 0]) > escape)[0]
        escaped = over.size > 0
        n = int(over[0]) + 1 if escaped else samples
        t_esc = float(grid[over[0]]) if escaped else math.nan
        runs.append(BlowupRun(float(r3), d3, l3, grid[:n], states[:n], g[:n], escaped, t_esc, failed))
    return runs


def _v3_reversals(run: BlowupRun) -> tuple[np.ndarray, np.ndarray]:
    v = run.states[:, 0]
    v = v[np.isfinite(v)]
    if v.size < 3:
        return np.empty(0, int), np.empty(0, int)
    dv = np.diff(v)
    maxima = np.nonzero((dv[:-1] > 0) & (dv[1:] <= 0))[0] + 1
    minima = np.nonzero((dv[:-1] < 0) & (dv[1:] >= 0))[0] + 1
    return maxima, minima


def count_oscillations(run: BlowupRun) -> int:
    """Local maxima of v3 before escape, i.e. completed swings of the orbit."""
    return int(_v3_reversals(run)[0].size)


def turning_event(run: BlowupRun) -> float:
    """Time of the first reversal of v3 before escape (NaN if v3 never turns)."""
    mx, mn = _v3_reversals(run)
    idx = np.concatenate([mx, mn])
    return float(run.t3[idx.min()]) if idx.size else math.nan


def blowup_summary(run: BlowupRun) -> dict:
    return {
        "r3": run.r3,
        "delta3": run.delta3,
        "lambda3": run.lambda3,
        "escaped": run.escaped,
        "escape_time": None if math.isnan(run.escape_time) else run.escape_time,
        "oscillations": count_oscillations(run),
        "turning_time": None if math.isnan(t := turning_event(run)) else t,
        "failed": run.failed,
    }


# ---------------------------------------------------------------- scaling

@dataclasses.dataclass(frozen=True)
class ChartScaling:
    """Linear map from chart-K3 coordinates back to the shifted system."""

    r3: float
    v: float
    x: float
    y: float
    z: float
    t: float

    def factors(self) -> np.ndarray:
        return np.array([self.v, self.x, self.y, self.z])

    def to_shifted(self, k3) -> np.ndarray:
        return np.asarray(k3, dtype=float) * self.factors()

    def to_chart(self, shifted) -> np.ndarray:
        return np.asarray(shifted, dtype=float) / self.factors()

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


REFERENCE_SCALING = {"v": 13.838, "x": 2.3061e3, "y": -7.414e-5, "z": -0.253, "t": 51.6191}


def chart_scaling(eps: float, b: PartialBundle) -> ChartScaling:
    """Compose the normal-form rescalings with the chart weights (1, 2, 4, 2) at r3 = sqrt(eps)."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    r = math.sqrt(eps)
    return ChartScaling(
        r3=r,
        v=2 * r / b.h_vv,
        x=-2 * r ** 2 / (b.h_vv * b.h_x),
        y=2 * r ** 4 / (b.h_vv * b.h_y),
        z=r ** 2 * b.g2_0,
        t=1 / r,
    )
