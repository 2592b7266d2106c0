"""Adaptive Dormand-Prince 5(4) integration with dense output and section crossings.

The stepping loop is written once and runs either compiled (when the vector
field is a numba dispatcher) or as plain Python (any other callable).  Vector
fields have the signature ``rhs(t, y, args) -> ndarray``.

Dense output is the cubic Hermite interpolant through the accepted nodes and
the derivatives evaluated there (the FSAL stage), so every stored node is
reproduced exactly.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from typing import Callable, Sequence

import numpy as np
from numba import njit
from numba.core.registry import CPUDispatcher
from scipy.optimize import brentq


class IntegrationError(RuntimeError):
    """Integration stopped before reaching the end of the interval."""

    def __init__(self, message: str, t_reached: float):
        super().__init__(f"{message} (reached t={t_reached!r} ms)")
        self.t_reached = t_reached


@dataclasses.dataclass(frozen=True)
class IntegratorConfig:
    rtol: float = 1e-8
    atol: float = 1e-10
    h_init: float = 1e-3
    h_max: float = 20.0
    max_steps: int = 50_000_000
    event_tol: float = 1e-6

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")
        if not (self.h_init > 0 and self.h_max >= self.h_init):
            raise ValueError("need h_max >= h_init > 0")
        if not self.event_tol > 0:
            raise ValueError("event_tol must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


# Dormand-Prince 5(4) tableau
_C2, _C3, _C4, _C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
_A21 = 1 / 5
_A31, _A32 = 3 / 40, 9 / 40
_A41, _A42, _A43 = 44 / 45, -56 / 15, 32 / 9
_A51, _A52, _A53, _A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
_A61, _A62, _A63, _A64, _A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
_B1, _B3, _B4, _B5, _B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
# difference between 5th and embedded 4th order weights
_E1, _E3, _E4, _E5, _E6, _E7 = (
    71 / 57600, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40,
)

OK, STEP_UNDERFLOW, MAX_STEPS, NONFINITE = 0, 1, 2, 3


def _dopri5(rhs, y0, t0, t1, args, rtol, atol, h_init, h_max, max_steps, record_from, comps):
    n = y0.shape[0]
    m = comps.shape[0]
    cap = 1024
    ts = np.empty(cap)
    ys = np.empty((cap, m))
    fs = np.empty((cap, m))
    count = 0

    t = t0
    y = y0.copy()
    k1 = rhs(t, y, args)
    h = min(h_init, t1 - t0)
    steps = 0
    status = OK
    last_rejected = False
    # slot 0 holds the latest node before record_from so the interpolant covers it
    ts[0] = t
    for j in range(m):
        ys[0, j] = y[comps[j]]
        fs[0, j] = k1[comps[j]]
    count = 1

    while t < t1:
        if steps >= max_steps:
            status = MAX_STEPS
            break
        # stretch the step slightly rather than leave a sliver before t1
        if t + 1.01 * h >= t1:
            h = t1 - t
        if h < 1e-14 * max(1.0, abs(t)):
            status = STEP_UNDERFLOW
            break
        k2 = rhs(t + _C2 * h, y + h * (_A21 * k1), args)
        k3 = rhs(t + _C3 * h, y + h * (_A31 * k1 + _A32 * k2), args)
        k4 = rhs(t + _C4 * h, y + h * (_A41 * k1 + _A42 * k2 + _A43 * k3), args)
        k5 = rhs(t + _C5 * h, y + h * (_A51 * k1 + _A52 * k2 + _A53 * k3 + _A54 * k4), args)
        k6 = rhs(t + h, y + h * (_A61 * k1 + _A62 * k2 + _A63 * k3 + _A64 * k4 + _A65 * k5), args)
        y_new = y + h * (_B1 * k1 + _B3 * k3 + _B4 * k4 + _B5 * k5 + _B6 * k6)
        t_new = t + h if t + h < t1 else t1
        k7 = rhs(t_new, y_new, args)
        steps += 1

        err_acc = 0.0
        finite = True
        for i in range(n):
            e = h * (_E1 * k1[i] + _E3 * k3[i] + _E4 * k4[i] + _E5 * k5[i] + _E6 * k6[i] + _E7 * k7[i])
            sc = atol + rtol * max(abs(y[i]), abs(y_new[i]))
            q = e / sc
            err_acc += q * q
            if not math.isfinite(y_new[i]) or not math.isfinite(k7[i]):
                finite = False
        err = math.sqrt(err_acc / n) if finite else math.inf

        if err <= 1.0:
            t = t_new
            y = y_new
            k1 = k7
            if t >= record_from:
                if count == cap:
                    cap *= 2
                    ts2 = np.empty(cap)
                    ys2 = np.empty((cap, m))
                    fs2 = np.empty((cap, m))
                    ts2[:count] = ts[:count]
                    ys2[:count] = ys[:count]
                    fs2[:count] = fs[:count]
                    ts, ys, fs = ts2, ys2, fs2
                ts[count] = t
                for j in range(m):
                    ys[count, j] = y[comps[j]]
                    fs[count, j] = k1[comps[j]]
                count += 1
            else:
                ts[0] = t
                for j in range(m):
                    ys[0, j] = y[comps[j]]
                    fs[0, j] = k1[comps[j]]
                count = 1
            fac = 0.9 * err ** -0.2 if err > 0 else 10.0
            fac = min(10.0, fac)
            if last_rejected:
                fac = min(1.0, fac)
            h = min(h * max(0.2, fac), h_max)
            last_rejected = False
        else:
            if not finite:
                if h < 1e-12 * max(1.0, abs(t)):
                    status = NONFINITE
                    break
                h *= 0.1
            else:
                h *= max(0.2, 0.9 * err ** -0.2)
            last_rejected = True

    return status, t, y, ts[:count].copy(), ys[:count].copy(), fs[:count].copy(), steps


_dopri5_jit = njit(cache=True)(_dopri5)


@dataclasses.dataclass(frozen=True, eq=False)
class Trajectory:
    """Accepted integrator nodes plus the derivatives needed for dense output."""

    times: np.ndarray
    states: np.ndarray
    derivs: np.ndarray
    labels: tuple[str, ...]
    final_state: np.ndarray
    steps: int = 0

    def __post_init__(self):
        if self.times.ndim != 1 or self.states.shape != (self.times.size, len(self.labels)):
            raise ValueError("inconsistent trajectory arrays")
        if self.times.size > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("trajectory times must be strictly increasing")

    def __len__(self) -> int:
        return self.times.size

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def t1(self) -> float:
        return float(self.times[-1])

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"trajectory has no component {label!r}; has {self.labels}") from None

    def _segment(self, t):
        k = np.searchsorted(self.times, t, side="right") - 1
        return np.clip(k, 0, self.times.size - 2)

    def __call__(self, t, component: int | None = None):
        """Evaluate the dense interpolant at time(s) ``t``."""
        if self.times.size < 2:
            raise ValueError("cannot interpolate a single-node trajectory")
        scalar = np.ndim(t) == 0
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(t < self.times[0]) or np.any(t > self.times[-1]):
            raise ValueError("interpolation outside the recorded window")
        k = self._segment(t)
        sel = slice(None) if component is None else component
        out = _hermite(
            self.times[k], self.times[k + 1],
            self.states[k][:, sel], self.states[k + 1][:, sel],
            self.derivs[k][:, sel], self.derivs[k + 1][:, sel], t,
        )
        return out[0] if scalar else out

    def to_csv(self, path) -> None:
        write_rows(path, ("t",) + self.labels, np.column_stack([self.times, self.states]))


def _hermite(ta, tb, ya, yb, fa, fb, t):
    h = (tb - ta)
    th = ((t - ta) / h)
    if np.ndim(th):
        h = h.reshape(h.shape + (1,) * (np.ndim(ya) - np.ndim(h)))
        th = th.reshape(th.shape + (1,) * (np.ndim(ya) - np.ndim(th)))
    th2 = th * th
    th3 = th2 * th
    return ((2 * th3 - 3 * th2 + 1) * ya + (th3 - 2 * th2 + th) * h * fa
            + (-2 * th3 + 3 * th2) * yb + (th3 - th2) * h * fb)


def write_rows(path, header: Sequence[str], rows) -> None:
    """CSV with full double precision (17 significant digits)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return v


def integrate(
    rhs: Callable,
    y0,
    t_span: tuple[float, float],
    cfg: IntegratorConfig | None = None,
    args=None,
    *,
    record_from: float | None = None,
    components: Sequence[int] | None = None,
    labels: Sequence[str] | None = None,
) -> Trajectory:
    """Integrate ``y' = rhs(t, y, args)`` over ``t_span``.

    ``record_from`` drops nodes before that time (the last earlier node is kept
    so the interpolant still covers ``record_from``).  ``components`` restricts
    what is stored; the full final state is always returned.
    """
    cfg = cfg or IntegratorConfig()
    t0, t1 = map(float, t_span)
    if not t1 > t0:
        raise ValueError(f"need t1 > t0, got {t_span}")
    y0 = np.array(y0, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(y0)):
        raise ValueError("initial state must be finite")
    comps = np.arange(y0.size) if components is None else np.asarray(components, dtype=np.int64)
    if labels is None:
        labels = tuple(f"y{i}" for i in comps)
    if len(labels) != comps.size:
        raise ValueError("one label per stored component is required")
    rec = t0 if record_from is None else float(record_from)

    loop = _dopri5_jit if isinstance(rhs, CPUDispatcher) else _dopri5
    status, t_end, y_end, ts, ys, fs, steps = loop(
        rhs, y0, t0, t1, args, cfg.rtol, cfg.atol, cfg.h_init, cfg.h_max,
        cfg.max_steps, rec, comps.astype(np.int64),
    )
    if status == STEP_UNDERFLOW:
        raise IntegrationError("step size underflow (stiffness or singularity)", t_end)
    if status == MAX_STEPS:
        raise IntegrationError(f"max_steps={cfg.max_steps} exceeded", t_end)
    if status == NONFINITE:
        raise IntegrationError("vector field became non-finite", t_end)
    return Trajectory(ts, ys, fs, tuple(labels), y_end, steps)


@dataclasses.dataclass(frozen=True)
class CrossingEvent:
    t: float
    state: np.ndarray
    direction: int


def detect_crossings(
    traj: Trajectory,
    plane: tuple[int | str, float],
    direction: int = 1,
    event_tol: float = 1e-6,
) -> list[CrossingEvent]:
    """Transversal crossings of ``component == value`` inside ``(t0, t1]``.

    Samples that sit exactly on the plane are skipped when looking for sign
    changes, so a trajectory that only touches the plane produces no event.
    """
    if direction not in (1, -1, 0):
        raise ValueError("direction must be +1, -1 or 0 (both)")
    comp, value = plane
    idx = traj.index(comp) if isinstance(comp, str) else int(comp)
    g = traj.states[:, idx] - value
    nz = np.flatnonzero(g != 0.0)
    if nz.size < 2:
        return []
    sg = np.sign(g[nz])
    change = np.flatnonzero(sg[1:] != sg[:-1])
    events = []
    for c in change:
        a, b = nz[c], nz[c + 1]
        d = 1 if sg[c + 1] > 0 else -1
        if direction and d != direction:
            continue
        # root lies in the last step of the bracket; zero samples in between are grazes
        lo = b - 1
        ta, tb = traj.times[lo], traj.times[b]
        if g[lo] == 0.0:
            tc = float(ta)
        else:
            fn = lambda t: _hermite(ta, tb, traj.states[lo, idx], traj.states[b, idx],
                                    traj.derivs[lo, idx], traj.derivs[b, idx], t) - value
            tc = brentq(fn, ta, tb, xtol=event_tol, rtol=4 * np.finfo(float).eps)
        state = _hermite(ta, tb, traj.states[lo], traj.states[b], traj.derivs[lo], traj.derivs[b], tc)
        events.append(CrossingEvent(float(tc), state, d))
    return events
