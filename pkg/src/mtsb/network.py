"""Gap-junction coupled networks: simulation, burst-onset synchrony, minimal coupling."""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import numpy as np

from .analysis import MS_PER_MIN, SECTION_V, TRANSIENT_MIN
from .integrate import IntegratorConfig, Trajectory, detect_crossings, integrate
from .model import DEFAULT_IC, CellParams, NetworkParams, network_rhs

C_V = 5300.0  # membrane capacitance (fF)
SYNC_FRACTION = 0.05


def k_from_conductance(g_c: float, c_v: float = C_V) -> float:
    """Coupling strength (ms⁻¹) from gap-junction conductance (pS) and capacitance (fF)."""
    if g_c < 0 or not c_v > 0:
        raise ValueError("need g_c >= 0 and c_v > 0")
    return g_c / c_v


def conductance_from_k(k: float, c_v: float = C_V) -> float:
    return k * c_v


@dataclasses.dataclass(frozen=True)
class Heterogeneity:
    """Uniform relative spreads of a5 and k_r, drawn from a seeded generator."""

    a5_spread: float = 0.10
    kr_spread: float = 0.05
    seed: int = 0

    def draw(self, n: int, base: CellParams | None = None) -> tuple[CellParams, ...]:
        base = base or CellParams()
        rng = np.random.default_rng(self.seed)
        a5 = base.a5 * (1 + rng.uniform(-self.a5_spread, self.a5_spread, n))
        kr = base.k_r * (1 + rng.uniform(-self.kr_spread, self.kr_spread, n))
        return tuple(base.replace(a5=float(a), k_r=float(b)) for a, b in zip(a5, kr))


def heterogeneous_network(n: int, G: float, k: float = 0.0, het: Heterogeneity | None = None,
                          base: CellParams | None = None) -> NetworkParams:
    base = (base or CellParams()).replace(G=G)
    return NetworkParams((het or Heterogeneity()).draw(n, base), k)


def spread_ics(n: int, seed: int = 0, z_spread: float = 0.2) -> np.ndarray:
    """Per-cell initial states: the default state with z scaled by a seeded factor.

    Cell 0 keeps the default state; the others start at different points of
    the slow cycle so that an uncoupled network is visibly out of phase.
    """
    rng = np.random.default_rng(seed + 1_000_003)
    ics = np.tile(DEFAULT_IC.as_array(), (n, 1))
    if n > 1:
        ics[1:, 4] *= 1 + rng.uniform(-z_spread, z_spread, n - 1)
    return ics


def simulate_network(
    netp: NetworkParams, ics=None, t_span_min: float = 80.0, cfg: IntegratorConfig | None = None,
    record_from_min: float | None = None, v_only: bool = False,
) -> list[Trajectory]:
    """Coupled run of all 5N equations; returns one trajectory view per cell."""
    n = netp.N
    ics = np.tile(DEFAULT_IC.as_array(), (n, 1)) if ics is None else np.asarray(ics, dtype=float).reshape(n, 5)
    labels = ("v", "u", "x", "y", "z")
    keep = [0] if v_only else list(range(5))
    comps = [5 * i + j for i in range(n) for j in keep]
    full = integrate(
        network_rhs, ics.reshape(-1), (0.0, t_span_min * MS_PER_MIN), cfg or IntegratorConfig(),
        (netp.as_array(), float(netp.k)),
        record_from=None if record_from_min is None else record_from_min * MS_PER_MIN,
        components=comps, labels=tuple(f"{labels[j]}{i + 1}" for i in range(n) for j in keep),
    )
    w = len(keep)
    return [
        Trajectory(full.times, full.states[:, w * i:w * (i + 1)], full.derivs[:, w * i:w * (i + 1)],
                   tuple(labels[j] for j in keep), full.final_state[5 * i:5 * i + 5], full.steps)
        for i in range(n)
    ]


def burst_onsets(traj: Trajectory, section_v: float = SECTION_V, event_tol: float = 1e-6) -> np.ndarray:
    """Upward crossing times (ms) of v through the section."""
    return np.array([e.t for e in detect_crossings(traj, ("v", section_v), 1, event_tol)])


class InsufficientOnsets(ValueError):
    pass


def default_window(onsets: Sequence[np.ndarray]) -> float:
    """Half the median inter-onset interval over all cells."""
    gaps = np.concatenate([np.diff(o) for o in onsets if len(o) > 1])
    if gaps.size == 0:
        raise InsufficientOnsets("need at least two onsets in some cell")
    return 0.5 * float(np.median(gaps))


def sync_metric(onsets: Sequence[Sequence[float]], window: float | None = None,
                t_range: tuple[float, float] | None = None, min_onsets: int = 3) -> float:
    """Largest onset spread among matched groups; ``inf`` if any onset is unmatched.

    Onsets of every cell are matched to cell 1's by nearest neighbour within
    ``window``.  Onsets closer than ``window`` to either end of ``t_range``
    may go unmatched, since their partners can fall outside the record.
    """
    ons = [np.sort(np.asarray(o, dtype=float)) for o in onsets]
    if any(o.size < min_onsets for o in ons):
        raise InsufficientOnsets(f"every cell needs at least {min_onsets} onsets")
    if len(ons) == 1:
        return 0.0
    w = default_window(ons) if window is None else float(window)
    lo, hi = t_range if t_range is not None else (-math.inf, math.inf)

    def exempt(t):
        return t - lo < w or hi - t < w

    ref = ons[0]
    groups = [[t] for t in ref]
    for o in ons[1:]:
        used = np.zeros(o.size, dtype=bool)
        for gi, t in enumerate(ref):
            j = int(np.argmin(np.abs(o - t)))
            if abs(o[j] - t) <= w and not used[j]:
                used[j] = True
                groups[gi].append(o[j])
            elif not exempt(t):
                return math.inf
        if np.any(~used & ~np.array([exempt(t) for t in o], dtype=bool)):
            return math.inf
    full = [g for g in groups if len(g) == len(ons)]
    if not full:
        return math.inf
    return float(max(max(g) - min(g) for g in full))


def onset_periods(onsets: Sequence[np.ndarray]) -> list[float]:
    """Mean inter-onset interval per cell, in minutes."""
    return [float(np.mean(np.diff(o)) / MS_PER_MIN) if len(o) > 1 else math.nan for o in onsets]


@dataclasses.dataclass(frozen=True)
class SyncReport:
    k: float
    g_c: float
    onsets: tuple[np.ndarray, ...]
    spread_ms: float
    tolerance_ms: float
    synchronized: bool
    periods_min: tuple[float, ...]

    def row(self, G: float):
        return (G, self.k, self.g_c, self.spread_ms, int(self.synchronized), *self.periods_min)

    def as_dict(self) -> dict:
        return {
            "k": self.k,
            "g_c": self.g_c,
            "spread_ms": None if math.isinf(self.spread_ms) else self.spread_ms,
            "tolerance_ms": self.tolerance_ms,
            "synchronized": self.synchronized,
            "periods_min": list(self.periods_min),
            "onsets_ms": [o.tolist() for o in self.onsets],
        }


def sync_report(
    netp: NetworkParams, ics=None, t_span_min: float = 80.0, transient_min: float = TRANSIENT_MIN,
    spread_tol: float = SYNC_FRACTION, cfg: IntegratorConfig | None = None,
    section_v: float = SECTION_V,
) -> SyncReport:
    """Simulate and evaluate burst-onset synchrony.

    ``spread_tol`` is a fraction of the mean burst period.
    """
    trajs = simulate_network(netp, ics, t_span_min, cfg, record_from_min=transient_min, v_only=True)
    t_range = (transient_min * MS_PER_MIN, t_span_min * MS_PER_MIN)
    onsets = [burst_onsets(t, section_v) for t in trajs]
    onsets = [o[o >= t_range[0]] for o in onsets]
    periods = onset_periods(onsets)
    finite = [q for q in periods if math.isfinite(q)]
    tol = spread_tol * (float(np.mean(finite)) * MS_PER_MIN if finite else math.inf)
    try:
        spread = sync_metric(onsets, t_range=t_range)
    except InsufficientOnsets:
        spread = math.inf
    return SyncReport(netp.k, conductance_from_k(netp.k), tuple(onsets), spread, tol,
                      bool(spread <= tol), tuple(periods))


class BracketError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class MinCouplingResult:
    G: float
    k_min: float
    report: SyncReport
    bracket: tuple[float, float]
    evaluations: int
    monotone_ok: bool
    history: tuple[tuple[float, bool], ...]

    def as_dict(self) -> dict:
        return {
            "G": self.G,
            "k_min": self.k_min,
            "g_c_min": conductance_from_k(self.k_min),
            "bracket": list(self.bracket),
            "evaluations": self.evaluations,
            "monotone_ok": self.monotone_ok,
            "history": [list(h) for h in self.history],
            "report": self.report.as_dict(),
        }


def min_sync_coupling(
    template: NetworkParams, G: float, spread_tol: float = SYNC_FRACTION,
    k_bracket: tuple[float, float] = (0.001, 0.1), rel_width: float = 0.05,
    ics=None, t_span_min: float = 80.0, cfg: IntegratorConfig | None = None,
    transient_min: float = TRANSIENT_MIN,
) -> MinCouplingResult:
    """Bisect on k for the smallest coupling that synchronizes burst onsets."""
    netp = template.with_G(G)
    lo, hi = map(float, k_bracket)
    if not 0 <= lo < hi:
        raise BracketError("need 0 <= k_lo < k_hi")
    history = []

    def run(k):
        rep = sync_report(netp.with_k(k), ics, t_span_min, transient_min, spread_tol, cfg)
        history.append((k, rep.synchronized))
        return rep

    rep_lo = run(lo)
    if rep_lo.synchronized:
        return MinCouplingResult(G, lo, rep_lo, (lo, hi), 1, True, tuple(history))
    rep_hi = run(hi)
    if not rep_hi.synchronized:
        raise BracketError(f"k bracket {k_bracket} not synchronized at either end for G={G}")
    best = rep_hi
    while (hi - lo) / hi > rel_width:
        mid = math.sqrt(lo * hi) if lo > 0 else 0.5 * (lo + hi)
        rep = run(mid)
        if rep.synchronized:
            hi, best = mid, rep
        else:
            lo = mid
    # one step above the answer must stay synchronized
    check = run(hi * (1 + rel_width))
    return MinCouplingResult(G, hi, best, (float(k_bracket[0]), float(k_bracket[1])), len(history),
                             check.synchronized, tuple(history))


SYNC_HEADER_BASE = ("G", "k", "g_c", "spread_ms", "synchronized")
