"""Poincaré return map at a v-section, periods, glucose sweeps and linger time."""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import numpy as np

from .integrate import IntegrationError, IntegratorConfig, Trajectory, detect_crossings, integrate
from .model import DEFAULT_IC, CellParams, cell_rhs

MS_PER_MIN = 60_000.0
SECTION_V = -59.0
N_FINAL = 6
STABLE_MAX_DIST = 1e-6
# distances this small are at the integration noise floor and are not
# expected to keep shrinking
NOISE_FLOOR = 1e-12
TRANSIENT_MIN = 20.0

LABELS = ("v", "u", "x", "y", "z")


@dataclasses.dataclass(frozen=True)
class PoincareRecord:
    G: float
    section_v: float
    times: np.ndarray  # upward crossing times after the transient (ms)
    points: np.ndarray  # (n, 2) (x, y) at each crossing
    fixed_point: tuple[float, float]
    max_dist: float
    stable: bool
    contracting: bool
    period_minutes: float
    total_crossings: int
    flag: str | None = None

    @property
    def n(self) -> int:
        return int(self.times.size)

    def row(self):
        return (self.G, self.fixed_point[0], self.fixed_point[1], self.max_dist,
                int(self.stable), self.period_minutes)

    def as_dict(self) -> dict:
        return {
            "G": self.G,
            "section_v": self.section_v,
            "crossings": self.n,
            "crossings_total": self.total_crossings,
            "crossing_times_ms": self.times.tolist(),
            "points": self.points.tolist(),
            "fixed_point": list(self.fixed_point),
            "max_dist": self.max_dist,
            "stable": self.stable,
            "contracting": self.contracting,
            "period_min": self.period_minutes,
            "flag": self.flag,
        }


SWEEP_HEADER = ("G", "xstar", "ystar", "max_dist", "stable", "period_min")


def simulate_cell(
    p: CellParams, t_min: float, ic=None, cfg: IntegratorConfig | None = None,
    record_from_min: float | None = None, components: Sequence[int] | None = None,
) -> Trajectory:
    ic = DEFAULT_IC.as_array() if ic is None else np.asarray(ic, dtype=float)
    comps = range(5) if components is None else components
    return integrate(
        cell_rhs, ic, (0.0, t_min * MS_PER_MIN), cfg or IntegratorConfig(), p.as_array(),
        record_from=None if record_from_min is None else record_from_min * MS_PER_MIN,
        components=list(comps), labels=tuple(LABELS[i] for i in comps),
    )


def final_distances(points: np.ndarray, n_final: int = N_FINAL) -> np.ndarray:
    """Consecutive-pair distances among the last ``n_final`` points."""
    last = np.asarray(points)[-n_final:]
    return np.linalg.norm(np.diff(last, axis=0), axis=1)


def is_contracting(d: np.ndarray, floor: float = NOISE_FLOOR) -> bool:
    """Distances shrink step by step until they reach the noise floor."""
    return bool(np.all((d[1:] < d[:-1]) | (d[1:] <= floor)))


def record_from_crossings(
    G: float, times, points, section_v: float = SECTION_V, total: int | None = None,
    estimator: str = "mean",
) -> PoincareRecord:
    times = np.asarray(times, dtype=float)
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    n = times.size
    total = n if total is None else total
    if n < N_FINAL + 1:
        fp = tuple(points[-1]) if n else (math.nan, math.nan)
        per = float(np.diff(times).mean() / MS_PER_MIN) if n >= 2 else math.nan
        return PoincareRecord(G, section_v, times, points, fp, math.nan, False, False, per, total,
                              flag="insufficient crossings")
    last = points[-N_FINAL:]
    fp = tuple(last.mean(axis=0)) if estimator == "mean" else tuple(last[-1])
    d = final_distances(points)
    max_dist = float(d.max())
    contracting = is_contracting(d)
    return PoincareRecord(
        G, section_v, times, points, (float(fp[0]), float(fp[1])), max_dist,
        bool(max_dist < STABLE_MAX_DIST and contracting), contracting,
        period_from_times(times), total,
    )


def period_from_times(times) -> float:
    """Mean inter-crossing interval over the final six crossings, in minutes."""
    t = np.asarray(times, dtype=float)[-N_FINAL:]
    if t.size < 2:
        raise ValueError("at least two crossings are needed for a period")
    return float((t[-1] - t[0]) / (t.size - 1) / MS_PER_MIN)


def period(rec: PoincareRecord) -> float:
    return period_from_times(rec.times)


def poincare_map(
    p: CellParams,
    section_v: float = SECTION_V,
    t_span_min: float = 80.0,
    ic=None,
    cfg: IntegratorConfig | None = None,
    transient_min: float = TRANSIENT_MIN,
    estimator: str = "mean",
    traj: Trajectory | None = None,
) -> PoincareRecord:
    """Upward crossings of ``v = section_v`` after the transient, reduced to a record."""
    cfg = cfg or IntegratorConfig()
    if traj is None:
        traj = simulate_cell(p, t_span_min, ic, cfg, components=(0, 2, 3))
    ev = detect_crossings(traj, ("v", section_v), 1, cfg.event_tol)
    ix, iy = traj.index("x"), traj.index("y")
    times = np.array([e.t for e in ev])
    pts = np.array([[e.state[ix], e.state[iy]] for e in ev]).reshape(-1, 2)
    keep = times >= transient_min * MS_PER_MIN
    return record_from_crossings(p.G, times[keep], pts[keep], section_v, total=times.size,
                                 estimator=estimator)


@dataclasses.dataclass(frozen=True)
class SweepEntry:
    G: float
    record: PoincareRecord | None
    error: str | None = None


def g_grid(lo: float, hi: float, step: float) -> np.ndarray:
    if step <= 0:
        raise ValueError("step must be positive")
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return np.round(lo + step * np.arange(n), 12)


def sweep_G(
    p: CellParams, G_range: tuple[float, float] = (7.0, 13.0), step: float = 0.5,
    jobs: int = 1, **kw,
) -> list[SweepEntry]:
    Gs = g_grid(*G_range, step)
    tasks = [(p.replace(G=float(G)), kw) for G in Gs]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(_sweep_one, tasks))
    return [_sweep_one(t) for t in tasks]


def _sweep_one(task) -> SweepEntry:
    q, kw = task
    try:
        return SweepEntry(q.G, poincare_map(q, **kw))
    except IntegrationError as exc:
        return SweepEntry(q.G, None, str(exc))


# ---------------------------------------------------------------- linger time

# component-wise neighbourhood scales for (v, x, y, z).  The base widths
# (5 mV, 0.02, 0.05, 5 µM) are multiplied by one common factor, chosen so that
# the G = 7 linger time equals the 35 s calibration point of the
# linger-to-coupling map.
LINGER_CALIBRATION = 1.4320
LINGER_SCALES = tuple(LINGER_CALIBRATION * s for s in (5.0, 0.02, 0.05, 5.0))
LINGER_RADIUS = 1.0


class NeighborhoodNotVisited(RuntimeError):
    pass


def scaled_distance(traj: Trajectory, center, scales=LINGER_SCALES) -> np.ndarray:
    """Max-norm distance of (v, x, y, z) samples to ``center`` in units of ``scales``."""
    c = np.asarray(center, dtype=float)
    cols = [traj.index(k) for k in ("v", "x", "y", "z")]
    ref = c[[0, 2, 3, 4]] if c.size == 5 else c
    return np.max(np.abs(traj.states[:, cols] - ref) / np.asarray(scales), axis=1)


def _inside_intervals(t: np.ndarray, g: np.ndarray) -> list[tuple[float, float]]:
    """Intervals where ``g <= 0``, with endpoints linearly interpolated."""
    inside = g <= 0
    out = []
    i, n = 0, g.size
    while i < n:
        if not inside[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and inside[j + 1]:
            j += 1
        a = t[i] if i == 0 else t[i - 1] + (t[i] - t[i - 1]) * g[i - 1] / (g[i - 1] - g[i])
        b = t[j] if j == n - 1 else t[j] + (t[j + 1] - t[j]) * g[j] / (g[j] - g[j + 1])
        out.append((float(a), float(b)))
        i = j + 1
    return out


def linger_durations(traj: Trajectory, psp, radius: float = LINGER_RADIUS,
                     scales=LINGER_SCALES, section_v: float = SECTION_V) -> list[float]:
    """Longest stay inside the neighbourhood for each complete cycle (ms).

    Cycles run between consecutive upward crossings of the section.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    loc = getattr(psp, "location", psp)
    d = scaled_distance(traj, loc, scales)
    spans = _inside_intervals(traj.times, d - radius)
    if not spans:
        raise NeighborhoodNotVisited("neighborhood never visited; increase radius")
    ev = [e.t for e in detect_crossings(traj, ("v", section_v), 1)]
    out = []
    for a, b in zip(ev[:-1], ev[1:]):
        best = 0.0
        for s, e in spans:
            lo, hi = max(s, a), min(e, b)
            if hi > lo:
                best = max(best, hi - lo)
        out.append(best)
    return out


def linger_time(p: CellParams, psp, radius: float = LINGER_RADIUS, traj: Trajectory | None = None,
                scales=LINGER_SCALES, t_span_min: float = 80.0, cfg: IntegratorConfig | None = None,
                transient_min: float = TRANSIENT_MIN) -> float:
    """Minimum over complete cycles of the per-cycle linger time (ms)."""
    if traj is None:
        traj = simulate_cell(p, t_span_min, cfg=cfg, record_from_min=transient_min, components=(0, 2, 3, 4))
    per_cycle = linger_durations(traj, psp, radius, scales)
    if not per_cycle:
        raise ValueError("trajectory does not contain a complete cycle")
    return float(min(per_cycle))


def coupling_from_linger(t_linger: float, calibration: tuple[float, float] = (0.005, 35_000.0)) -> float:
    """``k = k_ref * t_ref / t_linger``."""
    k_ref, t_ref = calibration
    if not t_linger > 0:
        raise ValueError("t_linger must be positive")
    return k_ref * t_ref / t_linger
