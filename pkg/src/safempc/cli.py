"""Command-line front end: single runs, variant comparisons and the figure set.

Every run writes ``trajectory.csv``, ``metrics.json`` and ``trajectory.svg``
into its own directory.  Solve wall times are the only non-deterministic
outputs; they live in the ``solve_ms`` CSV column and the ``*_solve_ms``
metrics.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ScenarioError, load_bundled, load_scenario
from .kinematics import reference_batch
from .safety import obstacle_centers
from .simloop import (
    RunMetrics,
    Scenario,
    TrajectoryLog,
    compute_metrics,
    first_activation,
    run_closed_loop,
)

log = logging.getLogger(__name__)

CSV_COLUMNS = ("t", "x", "y", "theta", "v", "omega", "xe", "ye", "thetae", "h_min", "solve_ms", "status")
FIGURES = ("fig3", "fig4", "fig5", "fig6", "table1")


# --- run artifacts ----------------------------------------------------------

def trajectory_rows(run: TrajectoryLog) -> list[list]:
    """One CSV row per log record.

    ``h_min`` is the smallest barrier value over the obstacles and is left
    empty when the scenario has none.
    """
    rows = []
    for r in run.records:
        h_min = repr(float(np.min(r.h))) if r.h.size else ""
        rows.append(
            [repr(float(r.t)), *(repr(float(v)) for v in r.state), *(repr(float(v)) for v in r.u),
             *(repr(float(v)) for v in r.error), h_min, f"{r.solve_time * 1e3:.3f}", r.status]
        )
    return rows


def write_csv(run: TrajectoryLog, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerows(trajectory_rows(run))


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    return value


def write_json(data, path: Path) -> None:
    path.write_text(json.dumps(_jsonable(data), indent=2) + "\n")


def describe(s: Scenario) -> dict:
    return {"scenario": s.name, "scheme": s.safety.scheme, "N": s.horizon.N, "gamma": s.safety.gamma,
            "obstacles": len(s.obstacles), "duration": s.duration}


def success(s: Scenario, m: RunMetrics) -> bool:
    """Stabilisation: goal reached safely.  Tracking: no safety violations."""
    if s.is_stabilization:
        return m.reached_goal and m.violation_count == 0
    return m.violation_count == 0


@dataclass
class RunOutcome:
    label: str
    scenario: Scenario
    log: TrajectoryLog | None = None
    metrics: RunMetrics | None = None
    error: str | None = None
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        row = {"label": self.label, **describe(self.scenario)}
        if self.metrics is None:
            return {**row, "success": False, "error": self.error}
        m = self.metrics
        return {
            **row,
            "success": success(self.scenario, m),
            "reached_goal": m.reached_goal,
            "tracking_rmse": m.tracking_rmse,
            "max_abs_xe": m.max_abs_xe,
            "min_h": m.min_h,
            "min_clearance": m.min_clearance,
            "violations": m.violation_count,
            "solver_failures": m.failure_count,
            "mean_solve_ms": m.mean_solve_ms,
            "max_solve_ms": m.max_solve_ms,
            **self.extra,
        }


def execute(scenario: Scenario, out: Path | None, label: str = "run") -> RunOutcome:
    """Run one scenario and, if ``out`` is given, write its artifacts there."""
    run = run_closed_loop(scenario)
    metrics = compute_metrics(run)
    outcome = RunOutcome(label, scenario, run, metrics)
    act = first_activation(run) if scenario.obstacles else None
    outcome.extra["first_activation_time"] = act[0] if act else None
    outcome.extra["first_activation_clearance"] = act[1] if act else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_csv(run, out / "trajectory.csv")
        write_json({**describe(scenario), **metrics.as_dict(), **outcome.extra}, out / "metrics.json")
        plot_paths([(label, run)], out / "trajectory.svg", title=scenario.name)
    return outcome


# --- plots --------------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed element ids keep the SVG text reproducible
    plt.rcParams["svg.hashsalt"] = "safempc"
    return plt


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


def plot_paths(runs: list[tuple[str, TrajectoryLog]], path: Path, title: str = "") -> None:
    """Robot paths over the reference, with obstacles at their final positions.

    Moving obstacles get a dotted trail from their initial position; the
    start pose and the (final) reference pose are marked.
    """
    plt = _pyplot()
    scenario = runs[0][1].scenario
    t_end = max(r.times[-1] for _, r in runs)
    fig, ax = plt.subplots(figsize=(6, 6))

    if scenario.is_stabilization:
        tgt = scenario.reference.target
        ax.plot(tgt.x, tgt.y, marker="*", ms=14, color="tab:green", ls="none", label="goal")
    else:
        ts = np.linspace(0.0, t_end, 400)
        Xr, _ = reference_batch(scenario.reference, ts)
        ax.plot(Xr[:, 0], Xr[:, 1], "k--", lw=1, label="reference")
        ax.plot(Xr[-1, 0], Xr[-1, 1], marker="*", ms=12, color="tab:green", ls="none", label="reference end")

    if scenario.obstacles:
        trail_t = np.linspace(0.0, t_end, 50)
        trails = obstacle_centers(scenario.obstacles, trail_t)
        for i, o in enumerate(scenario.obstacles):
            c = trails[-1, i]
            ax.add_patch(plt.Circle(c, o.radius, color="tab:red", alpha=0.35, lw=0))
            if o.speed > 0:
                ax.plot(trails[:, i, 0], trails[:, i, 1], ":", color="tab:red", lw=1)

    for label, run in runs:
        X = run.states
        ax.plot(X[:, 0], X[:, 1], lw=1.6, label=label)
    ax.plot(scenario.initial.x, scenario.initial.y, marker="o", color="k", ls="none", label="start")
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    if title:
        ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_time_series(runs: list[tuple[str, TrajectoryLog]], path: Path) -> None:
    """Error state and applied inputs against time, one line per run."""
    plt = _pyplot()
    fig, axes = plt.subplots(5, 1, figsize=(7, 10), sharex=True)
    names = ("x_e [m]", "y_e [m]", "theta_e [rad]", "v [m/s]", "omega [rad/s]")
    for label, run in runs:
        t = run.times[:-1]
        E = run.errors[:-1]
        U = run.inputs[:-1]
        for j in range(3):
            axes[j].plot(t, E[:, j], lw=1, label=label)
        for j in range(2):
            axes[3 + j].plot(t, U[:, j], lw=1, label=label)
    s = runs[0][1].scenario
    for j, lim in enumerate(zip(s.u_min, s.u_max)):
        for b in lim:
            axes[3 + j].axhline(b, color="k", ls=":", lw=0.8)
    for ax, name in zip(axes, names):
        ax.set_ylabel(name)
    axes[0].legend(fontsize=8)
    axes[-1].set_xlabel("t [s]")
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


# --- scenario handling ----------------------------------------------------

def apply_overrides(s: Scenario, args) -> Scenario:
    kw = {}
    if getattr(args, "gamma", None) is not None:
        kw["gamma"] = args.gamma
    if getattr(args, "horizon", None) is not None:
        kw["N"] = args.horizon
    if getattr(args, "scheme", None) is not None:
        kw["scheme"] = args.scheme
    if getattr(args, "duration", None) is not None:
        kw["duration"] = args.duration
    if getattr(args, "max_substeps", None) is not None:
        kw["substeps"] = args.max_substeps
    try:
        return s.with_overrides(**kw)
    except ValueError as exc:
        raise ScenarioError("<command line>", str(exc)) from None


_VARIANT_KEYS = {"scheme": str, "N": int, "horizon": int, "gamma": float}


def parse_variant(text: str) -> dict:
    """``"scheme=bt,N=5,gamma=0.3"`` -> override mapping."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, sep, value = part.partition("=")
        key = key.strip()
        if not sep or key not in _VARIANT_KEYS:
            raise ScenarioError(f"variant {text!r}", f"expected key=value with keys {sorted(_VARIANT_KEYS)}")
        try:
            out["N" if key == "horizon" else key] = _VARIANT_KEYS[key](value.strip())
        except ValueError:
            raise ScenarioError(f"variant {text!r}.{key}", f"bad value {value!r}") from None
    if not out:
        raise ScenarioError(f"variant {text!r}", "empty variant")
    return out


def variant_label(kw: dict) -> str:
    return "_".join(f"{k}{v}" for k, v in kw.items())


def compare(base: Scenario, variants: list[dict], out: Path | None) -> list[RunOutcome]:
    """Run each variant in order; a failing variant is reported, not raised."""
    if len(variants) < 2:
        raise ValueError("compare needs at least two variants")
    outcomes = []
    for kw in variants:
        label = variant_label(kw)
        try:
            s = base.with_overrides(**kw)
        except ValueError as exc:
            outcomes.append(RunOutcome(label, base, error=str(exc)))
            continue
        try:
            outcomes.append(execute(s, out / label if out else None, label))
        except Exception as exc:  # noqa: BLE001 - reported per variant
            log.exception("variant %s failed", label)
            outcomes.append(RunOutcome(label, s, error=f"{type(exc).__name__}: {exc}"))
    return outcomes


def format_table(rows: list[dict], columns: list[str]) -> str:
    def cell(v):
        if isinstance(v, float):
            return f"{v:.4g}"
        return "-" if v is None else str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


REPORT_COLUMNS = ["label", "scheme", "N", "gamma", "success", "reached_goal", "tracking_rmse", "min_h",
                  "violations", "solver_failures", "mean_solve_ms", "max_solve_ms"]


# --- figure reproduction --------------------------------------------------

def _runs(base: Scenario, variants: list[tuple[str, dict]], out: Path) -> list[RunOutcome]:
    return [execute(base.with_overrides(**kw), out / label, label) for label, kw in variants]


def reproduce(fig: str, out: Path, common: dict | None = None, repeats: int = 3) -> dict:
    """Run the bundled scenarios behind one figure or table; returns a summary."""
    if fig not in FIGURES:
        raise ValueError(f"unknown figure id {fig!r}; choose from {', '.join(FIGURES)}")
    common = common or {}
    out.mkdir(parents=True, exist_ok=True)
    stab = load_bundled("p5_1_stabilization").with_overrides(**common)
    track = load_bundled("tracking").with_overrides(**common)

    if fig == "fig3":
        runs = _runs(stab, [(f"gamma{g}", {"N": 10, "gamma": g}) for g in (0.1, 0.3, 0.9)], out)
        plot_paths([(r.label, r.log) for r in runs], out / "fig3.svg", "N = 10, gamma sweep")
    elif fig == "fig4":
        runs = _runs(stab, [("cbf_N5", {"N": 5, "scheme": "cbf"}), ("bt_N5", {"N": 5, "scheme": "bt"})], out)
        plot_paths([(r.label, r.log) for r in runs], out / "fig4.svg", "N = 5")
    elif fig == "fig5":
        free = track.with_overrides(obstacles=(), N=5, gamma=0.2)
        runs = [execute(free, out / "a_cbf_N5_free", "cbf_N5_free")]
        plot_paths([(runs[0].label, runs[0].log)], out / "fig5a.svg", "no obstacles, N = 5")
        panels = {"b": [("cbf_N10", {"N": 10, "scheme": "cbf"})],
                  "c": [("bt_N10", {"N": 10, "scheme": "bt"})],
                  "d": [("cbf_N5", {"N": 5, "scheme": "cbf"}), ("bt_N5", {"N": 5, "scheme": "bt"})]}
        for key, variants in panels.items():
            rs = _runs(track, variants, out / key)
            plot_paths([(r.label, r.log) for r in rs], out / f"fig5{key}.svg", ", ".join(r.label for r in rs))
            runs += rs
    elif fig == "fig6":
        runs = _runs(track, [("cbf_N5", {"N": 5, "scheme": "cbf"}), ("bt_N5", {"N": 5, "scheme": "bt"})], out)
        plot_time_series([(r.label, r.log) for r in runs], out / "fig6.svg")
    else:
        return _table1(track, out, repeats)

    summary = {"figure": fig, "runs": [r.row() for r in runs]}
    write_json(summary, out / "summary.json")
    return summary


def _table1(track: Scenario, out: Path, repeats: int) -> dict:
    """Mean per-step solve time for the three controller rows at N = 5 and 10."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rows = [("cbf_no_obstacles", {"scheme": "cbf", "obstacles": ()}),
            ("cbf_obstacles", {"scheme": "cbf"}),
            ("bt_obstacles", {"scheme": "bt"})]
    table = {}
    for name, kw in rows:
        table[name] = {}
        for N in (5, 10):
            s = track.with_overrides(N=N, **kw)
            means = []
            for rep in range(repeats):
                res = execute(s, out / f"{name}_N{N}" if rep == 0 else None, f"{name}_N{N}")
                means.append(res.metrics.mean_solve_ms)
            table[name][f"N{N}"] = float(np.mean(means))
            table[name][f"N{N}_runs"] = means
    summary = {"figure": "table1", "repeats": repeats, "mean_solve_ms": table}
    write_json(summary, out / "table1.json")
    with open(out / "table1.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["controller", "N5_ms", "N10_ms"])
        for name in table:
            w.writerow([name, f"{table[name]['N5']:.3f}", f"{table[name]['N10']:.3f}"])
    return summary


# --- entry point ----------------------------------------------------------

def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gamma", type=float, help="CBF decay rate in (0, 1)")
    p.add_argument("--horizon", type=int, help="prediction horizon N")
    p.add_argument("--scheme", choices=("cbf", "bt"), help="safety constraint type")
    p.add_argument("--duration", type=float, help="simulated time cap [s]")
    p.add_argument("--max-substeps", type=int, dest="max_substeps", help="RK4 sub-steps per sample")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safempc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one scenario")
    p.add_argument("--scenario", required=True, help="YAML file or bundled scenario name")
    p.add_argument("--out", type=Path, default=Path("out/run"), help="output directory")
    _add_overrides(p)

    p = sub.add_parser("compare", help="run several controller variants of one scenario")
    p.add_argument("--scenario", required=True, help="YAML file or bundled scenario name")
    p.add_argument("--out", type=Path, default=Path("out/compare"), help="output directory")
    p.add_argument("--variant", action="append", default=[], metavar="KEY=VAL[,KEY=VAL]",
                   help="e.g. 'scheme=bt,N=5'; keys: scheme, N (or horizon), gamma; repeat for each variant")
    _add_overrides(p)

    p = sub.add_parser("reproduce", help="regenerate one figure or table from the bundled scenarios")
    p.add_argument("figure", help=f"one of {', '.join(FIGURES)}")
    p.add_argument("--out", type=Path, help="output directory (default out/<figure>)")
    p.add_argument("--repeats", type=int, default=3, help="timing repetitions for table1")
    p.add_argument("--duration", type=float, help="simulated time cap [s]")
    p.add_argument("--max-substeps", type=int, dest="max_substeps", help="RK4 sub-steps per sample")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            s = apply_overrides(load_scenario(args.scenario), args)
            res = execute(s, args.out, s.name)
            print(format_table([res.row()], REPORT_COLUMNS))
            print(f"wrote {args.out}/trajectory.csv, metrics.json, trajectory.svg")
        elif args.command == "compare":
            s = apply_overrides(load_scenario(args.scenario), args)
            variants = [parse_variant(v) for v in args.variant]
            if len(variants) < 2:
                print("error: compare needs at least two --variant options", file=sys.stderr)
                return 2
            outcomes = compare(s, variants, args.out)
            rows = [o.row() for o in outcomes]
            args.out.mkdir(parents=True, exist_ok=True)
            write_json({"scenario": s.name, "variants": rows}, args.out / "report.json")
            print(format_table(rows, REPORT_COLUMNS))
            if any(o.error for o in outcomes):
                return 1
        else:
            if args.figure not in FIGURES:
                print(f"error: unknown figure id {args.figure!r}; choose from {', '.join(FIGURES)}", file=sys.stderr)
                return 2
            common = {}
            if args.duration is not None:
                common["duration"] = args.duration
            if args.max_substeps is not None:
                common["substeps"] = args.max_substeps
            out = args.out or Path("out") / args.figure
            summary = reproduce(args.figure, out, common, args.repeats)
            if args.figure == "table1":
                t = summary["mean_solve_ms"]
                rows = [{"controller": k, "N=5 [ms]": v["N5"], "N=10 [ms]": v["N10"]} for k, v in t.items()]
                print(format_table(rows, ["controller", "N=5 [ms]", "N=10 [ms]"]))
            else:
                print(format_table(summary["runs"], REPORT_COLUMNS))
            print(f"wrote {out}")
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
