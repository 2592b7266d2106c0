"""Batch command-line front end.

Every command writes its data tables (CSV, or JSON with ``--format json``),
a ``summary.json`` and a ``manifest.json`` echoing the resolved configuration
into the output directory.  Exit status: 0 on success, 2 when some rows are
flagged or missing, 1 on a fatal error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import math
import os
import sys
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from . import analysis, geometry, network, normalform, singular
from .integrate import IntegrationError, IntegratorConfig, detect_crossings
from .model import PARAM_NAMES, CellParams, DomainError, load_params

SCHEMA_VERSION = 1
EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- output

def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else format(float(v), ".17g")
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def _dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


class Output:
    def __init__(self, root: Path, fmt: str):
        self.root = root
        self.fmt = fmt
        self.files: list[str] = []

    def table(self, stem: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
        rows = list(rows)
        if self.fmt == "json":
            name = f"{stem}.json"
            text = _dump_json({"columns": list(header), "rows": [list(r) for r in rows]})
        else:
            name = f"{stem}.csv"
            lines = [",".join(header)] + [",".join(_cell(v) for v in r) for r in rows]
            text = "\n".join(lines) + "\n"
        _atomic_write(self.root / name, text)
        self.files.append(name)

    def json(self, name: str, obj) -> None:
        _atomic_write(self.root / name, _dump_json(obj))
        self.files.append(name)

    def text(self, name: str, text: str) -> None:
        _atomic_write(self.root / name, text)
        self.files.append(name)


# ---------------------------------------------------------------- config

def _params(args) -> CellParams:
    p = load_params(args.params) if args.params else CellParams()
    overrides = {}
    for item in args.set or []:
        key, sep, val = item.partition("=")
        key = key.strip()
        if not sep:
            raise UsageError(f"--set expects name=value, got {item!r}")
        if key not in PARAM_NAMES:
            raise UsageError(f"unknown parameter {key!r}")
        try:
            overrides[key] = float(val)
        except ValueError:
            raise UsageError(f"value for {key!r} is not a number: {val!r}") from None
    if args.G is not None:
        overrides["G"] = args.G
    return p.replace(**overrides)


def _cfg(args) -> IntegratorConfig:
    base = IntegratorConfig()
    return IntegratorConfig(
        rtol=args.rtol if args.rtol is not None else base.rtol,
        atol=args.atol if args.atol is not None else base.atol,
        h_max=args.h_max if args.h_max is not None else base.h_max,
    )


def _g_values(args, default: tuple[float, float, float] | None) -> list[float]:
    if args.G_from is not None or args.G_to is not None:
        lo = args.G_from if args.G_from is not None else default[0]
        hi = args.G_to if args.G_to is not None else default[1]
        step = args.step if args.step is not None else default[2]
        return [float(g) for g in analysis.g_grid(lo, hi, step)]
    if args.G is not None or default is None:
        return [args.G if args.G is not None else CellParams().G]
    return [float(g) for g in analysis.g_grid(*default)]


# ---------------------------------------------------------------- commands

def cmd_simulate(args, out: Output, p: CellParams, cfg: IntegratorConfig) -> int:
    t_min = args.t_min if args.t_min is not None else 20.0
    traj = analysis.simulate_cell(p, t_min, cfg=cfg)
    every = max(1, args.every)
    idx = np.arange(0, len(traj), every)
    if idx[-1] != len(traj) - 1:
        idx = np.append(idx, len(traj) - 1)
    out.table("trajectory", ("t", *traj.labels), np.column_stack([traj.times[idx], traj.states[idx]]))
    onsets = np.array([e.t for e in detect_crossings(traj, ("v", args.section_v), 1, cfg.event_tol)])
    intervals = np.diff(onsets)
    out.json("summary.json", {
        "G": p.G,
        "t_min": t_min,
        "steps": traj.steps,
        "burst_onsets_ms": onsets,
        "complete_bursts": int(intervals.size),
        "mean_period_s": float(intervals.mean() / 1000) if intervals.size else None,
        "final_state": traj.final_state,
    })
    if args.plot:
        out.text("plot.gp", "set datafile separator ','\nset xlabel 't (min)'\nset ylabel 'v (mV)'\n"
                            "plot 'trajectory.csv' every ::1 using ($1/60000):2 with lines title 'v'\n")
    return EXIT_OK


def cmd_manifold(args, out: Output, p: CellParams, cfg) -> int:
    kind = args.kind
    if kind == "C":
        ranges = ((args.v_range[0], args.v_range[1]), tuple(args.x_range))
    else:
        ranges = ((args.v_range[0], args.v_range[1]), tuple(args.z_range))
    sample = geometry.sample_manifold(p, kind, ranges, args.resolution)
    ax = sample.axes
    out.table("mesh", (ax[0], ax[1], "v", "u", "x", "y", "z", "residual"),
              sample.rows() if not sample.empty else [])
    fold = geometry.fold_curve(sample, p)
    out.table("fold", ("v", "u", "x", "y", "z"), fold)
    flagged = int(sample.flagged.sum()) if not sample.empty else 0
    finite = sample.residual[np.isfinite(sample.residual)] if not sample.empty else np.empty(0)
    out.json("summary.json", {
        "G": p.G, "kind": kind, "axes": list(ax), "resolution": args.resolution,
        "nodes": int(sample.residual.size), "flagged": flagged,
        "max_residual": float(finite.max()) if finite.size else None,
        "fold_points": int(len(fold)),
    })
    return EXIT_PARTIAL if flagged else EXIT_OK


def cmd_psp(args, out: Output, p: CellParams, cfg) -> int:
    guess = (args.guess_v,) if args.guess_x is None else (args.guess_v, args.guess_x)
    if args.G_from is not None or args.G_to is not None:
        lo = args.G_from if args.G_from is not None else 6.0
        hi = args.G_to if args.G_to is not None else 15.0
        rows = singular.eigen_sweep(p, (lo, hi), args.step or 0.1, guess)
        out.table("eigen_sweep", singular.SWEEP_HEADER, [r.csv_row() for r in rows])
        gaps = [r.G for r in rows if r.psp is None]
        out.json("summary.json", {
            "G_range": [lo, hi], "rows": len(rows), "gaps": gaps,
            "classes": {r.G: (r.psp.classification if r.psp else None) for r in rows},
        })
        return EXIT_PARTIAL if gaps else EXIT_OK
    psp = singular.find_psp(p, guess, fold=args.fold)
    out.table("psp", singular.SWEEP_HEADER, [singular.SweepRow(p.G, psp).csv_row()])
    out.json("summary.json", psp.as_dict())
    return EXIT_OK


def _coeff_source(args, p: CellParams):
    psp = singular.find_psp(p, args.guess_v)
    bundle = normalform.compute_partials(psp, p)
    return psp, bundle, normalform.coeffs(bundle)


def cmd_normalform(args, out: Output, p: CellParams, cfg) -> int:
    psp, bundle, c = _coeff_source(args, p)
    out.table("coefficients", ("name", "value"), c.rows())
    out.table("partials", ("name", "value"), bundle.as_dict().items())
    ref = normalform.REFERENCE_COEFFS
    out.json("summary.json", {
        "G": p.G,
        "psp": psp.location,
        "coefficients": c.as_dict(),
        "reference_ratio": {k: getattr(c, k) / ref[k] for k in normalform.COEFF_NAMES},
        "F_Z_inverted_form": normalform.F_Z_as_printed(bundle),
        "scaling": normalform.chart_scaling(p.eps, bundle).as_dict(),
        "scaling_reference": normalform.REFERENCE_SCALING,
    })
    return EXIT_OK


def cmd_blowup(args, out: Output, p: CellParams, cfg) -> int:
    if args.reference:
        c = normalform.NormalFormCoeffs.reference()
    else:
        c = _coeff_source(args, p)[2]
    re = math.sqrt(p.eps)
    r3s = args.r3 if args.r3 else [0.0, re * 1e-3, re * 1e-2, re * 1e-1, re]
    runs = normalform.compare_blowup(c, r3s, (args.t3_from, args.t3_to), p=p, samples=args.samples)
    rows = [r for run in runs for r in run.rows()]
    out.table("blowup", ("r3", "t3", "v3", "x3", "y3", "z3", "branch"), rows)
    d3, l3 = runs[0].delta3, runs[0].lambda3
    out.json("y3_oracle.json", normalform.y3_oracle_report(c, d3, l3))
    out.json("summary.json", {
        "coefficients": "reference" if args.reference else "computed",
        "runs": [normalform.blowup_summary(r) for r in runs],
    })
    return EXIT_PARTIAL if any(r.failed for r in runs) else EXIT_OK


def cmd_poincare(args, out: Output, p: CellParams, cfg) -> int:
    t_min = args.t_min if args.t_min is not None else 80.0
    rec = analysis.poincare_map(p, args.section_v, t_min, cfg=cfg)
    out.table("crossings", ("t_ms", "x", "y"), np.column_stack([rec.times, rec.points]) if rec.n else [])
    out.json("summary.json", rec.as_dict())
    return EXIT_PARTIAL if rec.flag else EXIT_OK


def cmd_sweep(args, out: Output, p: CellParams, cfg) -> int:
    Gs = _g_values(args, (7.0, 13.0, 0.5))
    t_min = args.t_min if args.t_min is not None else 80.0
    kw = dict(section_v=args.section_v, t_span_min=t_min, cfg=cfg)
    if len(Gs) > 1:
        step = Gs[1] - Gs[0]
        entries = analysis.sweep_G(p, (Gs[0], Gs[-1]), step, jobs=args.jobs, **kw)
    else:
        entries = analysis.sweep_G(p, (Gs[0], Gs[0]), 1.0, **kw)
    rows, summary, partial = [], [], False
    for e in entries:
        if e.record is None:
            rows.append((e.G, math.nan, math.nan, math.nan, 0, math.nan))
            partial = True
        else:
            rows.append(e.record.row())
            partial |= e.record.flag is not None
        summary.append({"G": e.G, "error": e.error,
                        **({"crossings": e.record.n, "crossings_total": e.record.total_crossings,
                            "contracting": e.record.contracting, "flag": e.record.flag}
                           if e.record else {})})
    out.table("sweep", analysis.SWEEP_HEADER, rows)
    out.json("summary.json", {"section_v": args.section_v, "t_min": t_min, "rows": summary})
    return EXIT_PARTIAL if partial else EXIT_OK


def cmd_linger(args, out: Output, p: CellParams, cfg) -> int:
    Gs = _g_values(args, (7.0, 13.0, 1.0))
    t_min = args.t_min if args.t_min is not None else 80.0
    rows, krows, notes, partial = [], [], [], False
    for G in Gs:
        q = p.replace(G=G)
        try:
            psp = singular.find_psp(q, args.guess_v, classify=False)
            t = analysis.linger_time(q, psp, args.radius, t_span_min=t_min, cfg=cfg)
            notes.append({"G": G})
        except (analysis.NeighborhoodNotVisited, singular.PspNotFound, IntegrationError, ValueError) as exc:
            t = math.nan
            partial = True
            notes.append({"G": G, "error": str(exc)})
        rows.append((G, t))
        krows.append((G, analysis.coupling_from_linger(t, tuple(args.calibration)) if t > 0 else math.nan))
    out.table("linger", ("G", "t_linger_ms"), rows)
    out.table("coupling", ("G", "k"), krows)
    out.json("summary.json", {
        "radius": args.radius, "scales": analysis.LINGER_SCALES,
        "calibration": {"k_ref": args.calibration[0], "t_ref_ms": args.calibration[1]},
        "rows": notes,
    })
    return EXIT_PARTIAL if partial else EXIT_OK


def _het(args) -> network.Heterogeneity:
    return network.Heterogeneity(args.a5_spread, args.kr_spread, args.seed)


def cmd_network(args, out: Output, p: CellParams, cfg) -> int:
    Gs = _g_values(args, None)
    t_min = args.t_min if args.t_min is not None else 80.0
    k = args.k if args.k is not None else 0.0
    ics = network.spread_ics(args.N, args.seed)
    rows, partial = [], False
    for G in Gs:
        netp = network.heterogeneous_network(args.N, G, k, _het(args), base=p)
        trajs = network.simulate_network(netp, ics, t_min, cfg)
        if len(Gs) == 1:
            cols = [trajs[0].times] + [t.states[:, j] for t in trajs for j in range(5)]
            header = ("t",) + tuple(f"{c}{i + 1}" for i in range(args.N) for c in "vuxyz")
            every = max(1, args.every)
            out.table("trajectory", header, np.column_stack(cols)[::every])
        onsets = [network.burst_onsets(t, args.section_v) for t in trajs]
        onsets = [o[o >= analysis.TRANSIENT_MIN * analysis.MS_PER_MIN] for o in onsets]
        per = network.onset_periods(onsets)
        partial |= any(math.isnan(x) for x in per)
        rows.append((G, k, *per))
    out.table("periods", ("G", "k", *[f"period_cell{i + 1}" for i in range(args.N)]), rows)
    out.json("summary.json", {
        "N": args.N, "k": k, "g_c": network.conductance_from_k(k), "seed": args.seed,
        "a5_spread": args.a5_spread, "kr_spread": args.kr_spread,
        "cells": [{"a5": c.a5, "k_r": c.k_r} for c in network.Heterogeneity(
            args.a5_spread, args.kr_spread, args.seed).draw(args.N, p)],
    })
    return EXIT_PARTIAL if partial else EXIT_OK


def _sync_one(task):
    G, args_d, p, cfg = task
    tmpl = network.heterogeneous_network(args_d["N"], G, 0.0,
                                         network.Heterogeneity(args_d["a5"], args_d["kr"], args_d["seed"]), base=p)
    ics = network.spread_ics(args_d["N"], args_d["seed"])
    try:
        return network.min_sync_coupling(tmpl, G, args_d["tol"], args_d["bracket"], ics=ics,
                                         t_span_min=args_d["t_min"], cfg=cfg), None
    except (network.BracketError, IntegrationError) as exc:
        return None, str(exc)


def cmd_sync(args, out: Output, p: CellParams, cfg) -> int:
    Gs = _g_values(args, (7.0, 13.0, 3.0))
    args_d = {"N": args.N, "a5": args.a5_spread, "kr": args.kr_spread, "seed": args.seed,
              "tol": args.spread_tol, "bracket": tuple(args.k_bracket),
              "t_min": args.t_min if args.t_min is not None else 80.0}
    tasks = [(G, args_d, p, cfg) for G in Gs]
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(args.jobs) as ex:
            results = list(ex.map(_sync_one, tasks))
    else:
        results = [_sync_one(t) for t in tasks]
    rows, summary, partial = [], [], False
    for G, (res, err) in zip(Gs, results):
        if res is None:
            rows.append((G, math.nan, math.nan, math.nan, 0, *([math.nan] * args.N)))
            summary.append({"G": G, "error": err})
            partial = True
            continue
        rows.append(res.report.row(G))
        summary.append(res.as_dict())
        partial |= not res.monotone_ok
    out.table("sync", (*network.SYNC_HEADER_BASE, *[f"period_cell{i + 1}" for i in range(args.N)]), rows)
    out.json("summary.json", {"spread_tol_fraction": args.spread_tol, "results": summary})
    return EXIT_PARTIAL if partial else EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate, "manifold": cmd_manifold, "psp": cmd_psp, "normalform": cmd_normalform,
    "blowup": cmd_blowup, "poincare": cmd_poincare, "sweep": cmd_sweep, "linger": cmd_linger,
    "network": cmd_network, "sync": cmd_sync,
}


# ---------------------------------------------------------------- parser

def _common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--G", type=float, help="glucose (mM)")
    sp.add_argument("--G-from", dest="G_from", type=float)
    sp.add_argument("--G-to", dest="G_to", type=float)
    sp.add_argument("--step", type=float, help="G step for sweeps")
    sp.add_argument("--t-min", dest="t_min", type=float, help="simulated time (minutes)")
    sp.add_argument("--params", help="parameter file (name = value lines)")
    sp.add_argument("--set", action="append", metavar="NAME=VALUE", help="override one parameter")
    sp.add_argument("--out", default=os.environ.get("MTSB_OUT", "mtsb_out"), help="output directory")
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--rtol", type=float)
    sp.add_argument("--atol", type=float)
    sp.add_argument("--h-max", dest="h_max", type=float, help="maximum step (ms)")
    sp.add_argument("--section-v", dest="section_v", type=float, default=analysis.SECTION_V)
    sp.add_argument("--guess-v", dest="guess_v", type=float, default=-60.0)
    sp.add_argument("--plot", action="store_true", help="also write a gnuplot script")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mtsb", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="single-cell trajectory")
    _common(sp)
    sp.add_argument("--every", type=int, default=1, help="write every n-th node")

    sp = sub.add_parser("manifold", help="mesh of C or C1 with the fold curve")
    _common(sp)
    sp.add_argument("--kind", choices=("C", "C1"), default="C")
    sp.add_argument("--v-range", dest="v_range", type=float, nargs=2, default=(-75.0, -20.0))
    sp.add_argument("--x-range", dest="x_range", type=float, nargs=2, default=(0.05, 0.3))
    sp.add_argument("--z-range", dest="z_range", type=float, nargs=2, default=(40.0, 200.0))
    sp.add_argument("--resolution", type=int, default=50)

    sp = sub.add_parser("psp", help="pseudo-singular point, or eigenvalue sweep over G")
    _common(sp)
    sp.add_argument("--guess-x", dest="guess_x", type=float)
    sp.add_argument("--fold", choices=("vux", "vu"), default="vux")

    sp = sub.add_parser("normalform", help="normal-form coefficients at the PSP")
    _common(sp)

    sp = sub.add_parser("blowup", help="chart-K3 runs against the special solution")
    _common(sp)
    sp.add_argument("--r3", type=float, action="append")
    sp.add_argument("--t3-from", dest="t3_from", type=float, default=-5.0)
    sp.add_argument("--t3-to", dest="t3_to", type=float, default=5000.0)
    sp.add_argument("--samples", type=int, default=4001)
    sp.add_argument("--reference", action="store_true", help="use the published coefficient values")

    sp = sub.add_parser("poincare", help="Poincaré map and fixed point at one G")
    _common(sp)

    sp = sub.add_parser("sweep", help="Poincaré fixed points and periods over G")
    _common(sp)

    sp = sub.add_parser("linger", help="linger time near the PSP and implied coupling")
    _common(sp)
    sp.add_argument("--radius", type=float, default=analysis.LINGER_RADIUS)
    sp.add_argument("--calibration", type=float, nargs=2, default=(0.005, 35_000.0),
                    metavar=("K_REF", "T_REF_MS"))

    for name, hlp in (("network", "heterogeneous network run"), ("sync", "minimal synchronizing coupling")):
        sp = sub.add_parser(name, help=hlp)
        _common(sp)
        sp.add_argument("--N", type=int, default=6)
        sp.add_argument("--k", type=float)
        sp.add_argument("--a5-spread", dest="a5_spread", type=float, default=0.10)
        sp.add_argument("--kr-spread", dest="kr_spread", type=float, default=0.05)
        if name == "network":
            sp.add_argument("--every", type=int, default=1)
        else:
            sp.add_argument("--spread-tol", dest="spread_tol", type=float, default=network.SYNC_FRACTION,
                            help="allowed onset spread as a fraction of the burst period")
            sp.add_argument("--k-bracket", dest="k_bracket", type=float, nargs=2, default=(1e-4, 0.1))
    return ap


def _manifest(args, argv: list[str], p: CellParams, cfg: IntegratorConfig, out: Output, status: int,
              error: str | None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "command": args.command,
        "argv": argv,
        "options": {k: v for k, v in vars(args).items() if k not in ("command",)},
        "params": p.as_dict(),
        "integrator": {"rtol": cfg.rtol, "atol": cfg.atol, "h_init": cfg.h_init, "h_max": cfg.h_max,
                       "max_steps": cfg.max_steps, "event_tol": cfg.event_tol},
        "files": out.files,
        "exit_code": status,
        "error": error,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        p = _params(args)
        cfg = _cfg(args)
        if getattr(args, "N", 1) < 1:
            raise UsageError("--N must be >= 1")
        if getattr(args, "k", None) is not None and args.k < 0:
            raise UsageError("--k must be >= 0")
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
    except (UsageError, KeyError, ValueError, DomainError, OSError) as exc:
        print(f"mtsb {args.command}: {exc}", file=sys.stderr)
        return EXIT_FATAL
    out = Output(Path(args.out), args.format)
    error = None
    try:
        status = COMMANDS[args.command](args, out, p, cfg)
    except (IntegrationError, DomainError, singular.PspNotFound, normalform.PartialsMismatch,
            ValueError, OSError) as exc:
        status, error = EXIT_FATAL, str(exc)
        print(f"mtsb {args.command}: {exc}", file=sys.stderr)
    try:
        out.json("manifest.json", _manifest(args, argv, p, cfg, out, status, error))
    except OSError as exc:
        print(f"mtsb {args.command}: cannot write manifest: {exc}", file=sys.stderr)
        return EXIT_FATAL
    return status


if __name__ == "__main__":
    sys.exit(main())
