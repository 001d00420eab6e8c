"""Command-line entry point: ``lac run [config] [options]``."""

from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path

import numpy as np

from .experiments import (
    OUTPUT_ENV,
    SCENARIOS,
    load_config,
    run_name,
    run_scenario,
    validate_config,
    with_overrides,
)
from .sim import read_metrics_csv, read_run_csv

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CHECK = 0, 1, 2, 3

_PLOT_HEADER = '''"""Generated plotting script; reads only the CSVs next to it."""
import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

HERE = os.path.dirname(os.path.abspath(__file__))


def read(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows


def run(policy, seed, err):
    rows = read(os.path.join(HERE, "runs", f"{policy}_seed{seed}_err{err:.2f}.csv"))
    return rows[:-1]


def col(rows, key):
    return [float(r[key]) for r in rows]

'''

_PLOT_FIG1 = '''
metrics = read(os.path.join(HERE, "metrics.csv"))
policies = sorted({r["policy"] for r in metrics})
fig, ax = plt.subplots(figsize=(6, 4))
for p in policies:
    levels = sorted({float(r["error_norm"]) for r in metrics if r["policy"] == p})
    mean, std = [], []
    for lv in levels:
        js = [float(r["J"]) for r in metrics if r["policy"] == p and float(r["error_norm"]) == lv]
        m = sum(js) / len(js)
        mean.append(m)
        std.append((sum((j - m) ** 2 for j in js) / len(js)) ** 0.5)
    ax.plot(levels, mean, label=p)
    ax.fill_between(levels, [m - s for m, s in zip(mean, std)], [m + s for m, s in zip(mean, std)], alpha=0.2)
ax.set_xlabel("prediction error norm")
ax.set_ylabel("total cost")
ax.set_yscale("log")
ax.legend()
fig.tight_layout()
fig.savefig(os.path.join(HERE, "fig1_cost_vs_error.png"), dpi=150)
'''

_PLOT_FIG2 = '''
metrics = read(os.path.join(HERE, "metrics.csv"))
seed = int(metrics[0]["seed"])
err = float(metrics[0]["error_norm"])
policies = [r["policy"] for r in metrics if int(r["seed"]) == seed]
stream = read(os.path.join(HERE, "streams", f"stream_seed{seed}_err{err:.2f}.csv"))
truth = {int(r["t"]): [float(v) for k, v in r.items() if k.startswith("phi_")] for r in stream if r["kind"] == "truth"}
window_sq = {}
for r in stream:
    if r["kind"] == "pred":
        vals = [float(r[k]) for k in r if k.startswith("phi_")]
        sq = sum((v - w) ** 2 for v, w in zip(vals, truth[int(r["tau"])]))
        window_sq[int(r["t"])] = window_sq.get(int(r["t"]), 0.0) + sq
fig, axes = plt.subplots(3, 1, figsize=(7, 8), sharex=True)
ts = sorted(window_sq)
axes[0].plot(ts, [window_sq[t] ** 0.5 for t in ts], color="k")
axes[0].set_ylabel("window prediction error")
totals = []
for p in policies:
    rows = run(p, seed, err)
    axes[1].plot(col(rows, "t"), col(rows, "cost"), label=p)
    totals.append(f"{p}: {sum(col(rows, 'cost')) / 5:.1f}")
    if p in ("LAC", "SelfTuning"):
        axes[2].plot(col(rows, "t"), col(rows, "lambda"), label=p)
axes[1].set_yscale("log")
axes[1].set_ylabel("stage cost")
axes[1].legend(title="normalised totals\\n" + "\\n".join(totals), fontsize=7)
axes[2].set_ylabel("lambda")
axes[2].set_xlabel("t")
axes[2].legend()
fig.tight_layout()
fig.savefig(os.path.join(HERE, "fig2_attack.png"), dpi=150)
'''

_PLOT_FIG3 = '''
metrics = read(os.path.join(HERE, "metrics.csv"))
seed = int(metrics[0]["seed"])
err = float(metrics[0]["error_norm"])
policies = [r["policy"] for r in metrics if int(r["seed"]) == seed]
fig, axes = plt.subplots(4, 1, figsize=(7, 10), sharex=True)
for p in policies:
    rows = run(p, seed, err)
    t = col(rows, "t")
    axes[0].plot(t, col(rows, "x_0"), label=p)
    axes[1].plot(t, col(rows, "u_0"), label=p)
    axes[2].plot(t, col(rows, "cost"), label=f"{p} ({sum(col(rows, 'cost')):.3f})")
    if p in ("LAC", "SelfTuning"):
        axes[3].plot(t, col(rows, "lambda"), label=p)
for ax, name in zip(axes, ("state", "input", "stage cost", "lambda")):
    ax.set_ylabel(name)
    ax.legend(fontsize=7)
axes[3].set_xlabel("t")
fig.tight_layout()
fig.savefig(os.path.join(HERE, "fig3_arm.png"), dpi=150)
'''


def emit_plot_script(out_dir, scenario):
    """Write ``plot.py`` for the scenario into ``out_dir`` and return its path."""
    body = {"fig1_sweep": _PLOT_FIG1, "fig2_attack": _PLOT_FIG2, "fig3_arm": _PLOT_FIG3}.get(scenario, _PLOT_FIG1)
    path = Path(out_dir) / "plot.py"
    path.write_text(_PLOT_HEADER + body)
    return path


def check_outputs(out_dir, cfg, tol=1e-10):
    """Invariant suite over written artifacts; returns a list of failures."""
    out = Path(out_dir)
    problems = []
    records = read_metrics_csv(out / "metrics.csv")
    x_max = cfg.system.get("x_max") if cfg.system.get("kind") == "arm" else None
    for rec in records:
        name = run_name(rec)
        path = out / "runs" / name
        if not path.exists():
            problems.append(f"{name}: run CSV missing")
            continue
        cols = read_run_csv(path)
        J = float(np.sum(cols["cost"]) + cols["terminal_cost"])
        if abs(J - rec["J"]) > tol * max(1.0, abs(rec["J"])):
            problems.append(f"{name}: cost recomputation {J!r} != {rec['J']!r}")
        lam = cols["lambda"]
        if np.any(lam < 0) or np.any(lam > 1):
            problems.append(f"{name}: lambda outside [0, 1]")
        if not np.all(cols["feasible"] == 1):
            problems.append(f"{name}: infeasible step")
        if x_max is not None and np.max(np.abs(cols["x_0"])) > x_max + 1e-6:
            problems.append(f"{name}: state bound violated")
        cr, lo, hi = rec["CR"], rec["thm4_lower"], rec["thm3_upper"]
        if math.isfinite(lo) and math.isfinite(cr) and lo > cr + 1e-8:
            problems.append(f"{name}: lower bound {lo} exceeds CR {cr}")
        if rec["policy"] == "LAC" and math.isfinite(hi) and math.isfinite(cr) and cr > hi:
            problems.append(f"{name}: CR {cr} exceeds upper bound {hi}")
    return problems


def build_parser():
    parser = argparse.ArgumentParser(prog="lac", description="Learning-augmented control experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario")
    run.add_argument("config", nargs="?", help="YAML scenario file (paths inside are relative to it)")
    run.add_argument("--scenario", choices=SCENARIOS, help="built-in scenario (overrides the file's)")
    run.add_argument("--seed", type=int, help="run a single seed")
    run.add_argument("--out", help=f"output directory (default: config 'out', ${OUTPUT_ENV}, ./lac_out)")
    run.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    run.add_argument("--diagnostics", action="store_true", help="per-step errors and regularity probe")
    run.add_argument("--trace", action="store_true", help="dump the last MPC solve trace of each run")
    run.add_argument("--check", action="store_true", help="run the invariant suite on the outputs")
    val = sub.add_parser("validate", help="check a config file and print the normalised settings")
    val.add_argument("config")
    return parser


def _resolve_config(args):
    scenario = getattr(args, "scenario", None)
    if args.config:
        return load_config(args.config, scenario)
    return validate_config({"scenario": scenario or "fig1_sweep"})


def main(argv=None):
    args = build_parser().parse_args(argv)
    cfg, errors = _resolve_config(args)
    if errors:
        for e in errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        for key, value in vars(cfg).items():
            print(f"{key}: {value}")
        return EXIT_OK
    cfg = with_overrides(cfg, args.seed)
    if args.jobs < 1:
        print("config error: --jobs must be ≥ 1", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or cfg.out or os.environ.get(OUTPUT_ENV, "lac_out"))
    results, status = run_scenario(cfg, out, jobs=args.jobs, diagnostics=args.diagnostics, trace=args.trace)
    script = emit_plot_script(out, cfg.scenario)
    print(f"{status['runs']} runs written to {out} (plot script: {script.name})")
    code = EXIT_OK
    if status["solver_failures"]:
        print(f"{status['solver_failures']} MPC solves did not converge", file=sys.stderr)
        code = EXIT_SOLVER
    if args.check:
        problems = check_outputs(out, cfg)
        if status["infeasible_steps"]:
            problems.append(f"{status['infeasible_steps']} infeasible closed-loop steps")
        for p in problems:
            print(f"check failed: {p}", file=sys.stderr)
        if problems and code == EXIT_OK:
            code = EXIT_CHECK
        if not problems:
            print("all invariant checks passed")
    return code


if __name__ == "__main__":
    sys.exit(main())
