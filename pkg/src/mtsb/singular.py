"""Desingularized slow flow on C1 and its pseudo-singular points (PSPs).

A PSP is located with a damped Newton iteration in the ``(v, z)`` chart of
C1 (x from f = 0, y from h1 = 0, u = Y(v)).  The two imposed equations are
the determinant condition ``det D_(v,u,x)(h1, h2, f) = 0`` and the vanishing
of the v-component of the normalized flow; the remaining two conditions
follow and are checked after convergence.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import numpy as np

from . import fd
from .geometry import fast_partials, point_on_C1, z_on_C1
from .model import CellParams, DomainError, g1, g2


class PspNotFound(RuntimeError):
    def __init__(self, message: str, residual: float = math.nan):
        super().__init__(message)
        self.residual = residual


@dataclasses.dataclass(frozen=True)
class PspPoint:
    location: np.ndarray
    G: float
    eigenvalues: tuple[complex, complex] = ()
    classification: str = "unclassified"
    assumption_report: dict | None = None
    residual: float = math.nan
    iterations: int = 0

    @property
    def v(self) -> float:
        return float(self.location[0])

    @property
    def x(self) -> float:
        return float(self.location[2])

    @property
    def y(self) -> float:
        return float(self.location[3])

    @property
    def z(self) -> float:
        return float(self.location[4])

    def as_dict(self) -> dict:
        v, u, x, y, z = (float(c) for c in self.location)
        return {
            "G": self.G,
            "location": {"v": v, "u": u, "x": x, "y": y, "z": z},
            "eigenvalues": [[complex(l).real, complex(l).imag] for l in self.eigenvalues],
            "classification": self.classification,
            "residual": self.residual,
            "assumption": self.assumption_report,
        }


def _terms(s, p: CellParams):
    d = fast_partials(s, p)
    G1 = float(g1(s[2], s[3], p))
    G2 = float(g2(s[2], s[4], p))
    return d, G1, G2


def det3(d) -> float:
    """``det D_(v,u,x)(h1, h2, f)`` from first partials (h2 has no x-dependence, f none in u)."""
    return d.h1v * d.h2u * d.fx - d.h1u * d.h2v * d.fx - d.h1x * d.h2u * d.fv


def normalized_slow_rhs(s, p: CellParams) -> np.ndarray:
    """Desingularized slow flow on C1 (time rescaled by ``-det D_(v,u,x)``)."""
    s = np.asarray(s, dtype=float)
    if s[2] == 0:
        raise DomainError("Hill function singular at zero concentration (x must be > 0)")
    d, G1, G2 = _terms(s, p)
    D = det3(d)
    return np.array([
        d.h2u * d.fx * d.h1y * G1 - d.h1x * d.h2u * d.fz * G2,
        -d.h2v * d.fx * d.h1y * G1 + d.h1x * d.h2v * d.fz * G2,
        -d.h2u * d.fv * d.h1y * G1 + (d.h1v * d.h2u - d.h1u * d.h2v) * d.fz * G2,
        -D * G1,
        -D * G2,
    ])


def psp_conditions(s, p: CellParams) -> np.ndarray:
    """The four PSP conditions (three flow components and the 3x3 determinant)."""
    s = np.asarray(s, dtype=float)
    d, _, _ = _terms(s, p)
    return np.append(normalized_slow_rhs(s, p)[:3], det3(d))


def psp_condition_scales(s, p: CellParams) -> np.ndarray:
    """Magnitudes of the largest term in each condition, for scale-free residuals."""
    d, G1, G2 = _terms(s, p)
    return np.array([
        max(abs(d.h2u * d.fx * d.h1y * G1), abs(d.h1x * d.h2u * d.fz * G2)),
        max(abs(d.h2v * d.fx * d.h1y * G1), abs(d.h1x * d.h2v * d.fz * G2)),
        max(abs(d.h2u * d.fv * d.h1y * G1), abs((d.h1v * d.h2u - d.h1u * d.h2v) * d.fz * G2)),
        max(abs(d.h1v * d.h2u * d.fx), abs(d.h1u * d.h2v * d.fx), abs(d.h1x * d.h2u * d.fv)),
    ])


def psp_residual_norm(s, p: CellParams) -> float:
    c = psp_conditions(s, p)
    sc = psp_condition_scales(s, p)
    return float(np.max(np.abs(c) / np.where(sc > 0, sc, 1.0)))


def _equation_scales(s, p: CellParams) -> np.ndarray:
    """Constant magnitudes for the two Newton equations, frozen at the start point."""
    d = fast_partials(s, p)
    g1_sc = 1.0 + abs(s[3])
    g2_sc = abs(p.k1 * s[2]) + abs(p.k2 * s[4])
    return np.array([
        abs(d.h2u * d.fx * d.h1y) * g1_sc + abs(d.h1x * d.h2u * d.fz) * g2_sc,
        abs(d.h1v * d.h2u * d.fx) + abs(d.h1u * d.h2v * d.fx),
        abs(d.h1v * d.h2u) + abs(d.h1u * d.h2v),
    ])


def _reduced_equations(vz, p: CellParams, fold: str, sc: np.ndarray) -> np.ndarray:
    s = point_on_C1(vz[0], vz[1], p)
    d, G1, G2 = _terms(s, p)
    flow = d.h2u * d.fx * d.h1y * G1 - d.h1x * d.h2u * d.fz * G2
    if fold == "vux":
        fold_val = det3(d) / sc[1]
    else:
        fold_val = (d.h1v * d.h2u - d.h1u * d.h2v) / sc[2]
    return np.array([flow / sc[0], fold_val])


def find_psp(
    p: CellParams,
    guess: float | Sequence[float] = -60.0,
    *,
    fold: str = "vux",
    tol: float = 1e-12,
    max_iter: int = 100,
    classify: bool = True,
) -> PspPoint:
    """Locate a PSP from a guess ``v`` or ``(v, x)`` in the C1 chart.

    ``fold="vux"`` imposes the 3x3 determinant condition; ``fold="vu"`` imposes
    the fast-fold condition ``det D_(v,u)(h1, h2) = 0`` instead.  The two loci
    differ by a sliver of order ``|h1x h2u fv / fx|``.
    """
    if fold not in ("vux", "vu"):
        raise ValueError("fold must be 'vux' or 'vu'")
    g = np.atleast_1d(np.asarray(guess, dtype=float))
    v0 = g[0]
    # default x guess: where the ADP/ATP gate sits just below half activation
    x0 = g[1] if g.size > 1 else p.x_half - 0.0133
    if x0 <= 0:
        raise PspNotFound(f"no admissible starting point for G={p.G} (x guess {x0:.4g} <= 0)")
    w = np.array([v0, float(z_on_C1(v0, x0, p))])
    scales = np.array([1.0, max(1.0, abs(w[1]))])

    try:
        eq_sc = _equation_scales(point_on_C1(w[0], w[1], p), p)
    except DomainError as exc:
        raise PspNotFound(f"starting point outside the domain: {exc}") from None

    def F(q):
        return _reduced_equations(q, p, fold, eq_sc)

    try:
        r = F(w)
    except DomainError as exc:
        raise PspNotFound(f"starting point outside the domain: {exc}") from None
    norm = float(np.max(np.abs(r)))
    it = 0
    for it in range(1, max_iter + 1):
        if norm <= tol:
            break
        try:
            J = fd.jacobian(F, w, scales=scales * 1e-2)
            step = np.linalg.solve(J, -r)
        except (DomainError, np.linalg.LinAlgError) as exc:
            raise PspNotFound(f"Newton failed at iteration {it}: {exc}", norm) from None
        lam = 1.0
        while lam > 1e-6:
            trial = w + lam * step
            try:
                rt = F(trial)
                nt = float(np.max(np.abs(rt)))
            except DomainError:
                nt = math.inf
            if np.isfinite(nt) and nt < (1 - 1e-4 * lam) * norm:
                break
            lam *= 0.5
        else:
            if norm < 1e-9:
                break
            raise PspNotFound(f"line search stalled at G={p.G} (residual {norm:.3g})", norm)
        w, r, norm = trial, rt, nt
    else:
        if norm > tol:
            raise PspNotFound(f"no convergence in {max_iter} iterations at G={p.G} (residual {norm:.3g})", norm)
    loc = point_on_C1(w[0], w[1], p)
    psp = PspPoint(location=loc, G=p.G, residual=psp_residual_norm(loc, p), iterations=it)
    if classify:
        eig, cls = classify_psp(psp, p, return_eigenvalues=True)
        psp = dataclasses.replace(psp, eigenvalues=tuple(eig), classification=cls,
                                  assumption_report=check_assumption(psp, p))
    return psp


def _reduced_flow(vz, p: CellParams) -> np.ndarray:
    """Normalized flow in the ``(v, z)`` chart of C1."""
    s = point_on_C1(vz[0], vz[1], p)
    F = normalized_slow_rhs(s, p)
    return np.array([F[0], F[4]])


def reduced_jacobian(psp: PspPoint, p: CellParams) -> np.ndarray:
    w = np.array([psp.v, psp.z])
    return fd.jacobian(lambda q: _reduced_flow(q, p), w, scales=[1.0, max(1.0, abs(w[1]))])


def classify_eigenvalues(eig, scale: float = 1.0, rel_tol: float = 1e-12) -> str:
    eig = np.asarray(eig, dtype=complex)
    if np.any(np.abs(eig) <= rel_tol * scale):
        return "degenerate"
    if np.any(np.abs(eig.imag) > 1e-12 * np.abs(eig)):
        return "focus"
    re = eig.real
    if np.all(re > 0) or np.all(re < 0):
        return "node"
    return "saddle"


def classify_psp(psp: PspPoint, p: CellParams, *, return_eigenvalues: bool = False):
    """Saddle / node / focus / degenerate from the linearized ``(v, z)`` flow."""
    J = reduced_jacobian(psp, p)
    eig = np.linalg.eigvals(J)
    cls = classify_eigenvalues(eig, scale=float(np.max(np.abs(J))))
    return (eig, cls) if return_eigenvalues else cls


def check_assumption(psp: PspPoint, p: CellParams, tol: float = 1e-10, fold_tol: float = 1e-6) -> dict:
    """Fold condition and the four non-degeneracy conditions, with values."""
    s = psp.location
    d, _, G2 = _terms(s, p)
    # d2h1/dv2 along C: the second derivative of h1(v, Y(v), x, y) in v
    from .normalform import analytic_partials  # local import: normalform builds on this module

    hp = analytic_partials(s, p).as_dict()
    fold_det = d.h1v * d.h2u - d.h1u * d.h2v
    fold_sc = max(abs(d.h1v * d.h2u), abs(d.h1u * d.h2v))
    entries = {
        "fold_det": float(fold_det),
        "h_vv": float(hp["h_vv"]),
        "g2": float(G2),
        "h_x": float(d.h1x),
        "f_v": float(d.fv),
    }
    scales = {
        "h_vv": abs(p.a1) + abs(p.a3),
        "g2": abs(p.k1 * s[2]) + abs(p.k2 * s[4]),
        "h_x": abs(p.a4 * (s[0] - p.a6)),
        "f_v": abs(p.d1),
    }
    ok = {"fold": bool(abs(fold_det) <= fold_tol * fold_sc)}
    for key, sc in scales.items():
        ok[key] = bool(abs(entries[key]) > tol * sc)
    return {
        "values": entries,
        "fold_scale": float(fold_sc),
        "fold_relative": float(abs(fold_det) / fold_sc),
        "ok": ok,
        "nondegenerate": all(ok[k] for k in scales),
    }


@dataclasses.dataclass(frozen=True)
class SweepRow:
    G: float
    psp: PspPoint | None
    error: str | None = None

    def csv_row(self):
        if self.psp is None:
            return [self.G] + [math.nan] * 9 + ["failed"]
        l1, l2 = (complex(e) for e in self.psp.eigenvalues)
        return [self.G, *map(float, self.psp.location), l1.real, l1.imag, l2.real, l2.imag,
                self.psp.classification]


SWEEP_HEADER = ("G", "v_p", "u_p", "x_p", "y_p", "z_p", "re_l1", "im_l1", "re_l2", "im_l2", "class")


def eigen_sweep(
    p: CellParams, G_range: tuple[float, float] = (6.0, 15.0), step: float = 0.1,
    guess: float | Sequence[float] = -60.0,
) -> list[SweepRow]:
    """PSP and its eigenvalues along a glucose grid, warm-started from the previous G."""
    if step <= 0:
        raise ValueError("step must be positive")
    lo, hi = G_range
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    rows = []
    warm = None
    for i in range(n):
        G = round(lo + i * step, 12)
        q = p.replace(G=G)
        try:
            start = (warm.v, warm.x + (q.x_half - p.replace(G=warm.G).x_half)) if warm else guess
            psp = find_psp(q, start)
            rows.append(SweepRow(G, psp))
            warm = psp
        except (PspNotFound, DomainError) as exc:
            rows.append(SweepRow(G, None, str(exc)))
    return rows
