"""Scenario configuration and the three reference studies."""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .confidence import learning_weights
from .lqc import NonConvergenceError, edpb_weights, solve_dare
from .model import arm_truth, ingest, make_lqc_tracking_system, make_robot_arm_system, write_stream_csv
from .policies import ClosedFormBackend, MpcBackend, make_policy
from .sim import (
    ErrorSchedule,
    competitive_report,
    inject_errors,
    offline_optimum,
    per_step_error_diag,
    run_closed_loop,
    write_metrics_csv,
    write_run_csv,
)
from .trajopt import MpcProblem, estimate_edpb, regularity_probe, write_trace

SCENARIOS = ("fig1_sweep", "fig2_attack", "fig3_arm", "custom")
POLICIES = ("LAC", "P-MPC", "N-MPC", "SelfTuning")
OUTPUT_ENV = "LAC_OUTPUT_DIR"


@dataclass
class ScenarioConfig:
    scenario: str = "fig1_sweep"
    system: dict = field(default_factory=dict)
    T: int = 200
    k: int = 5
    beta: float = 0.05
    init_lambda: float = 0.5
    policies: list = field(default_factory=lambda: list(POLICIES))
    errors: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out: str = ""
    x0: list = None
    offline_cap: int = 60

    def levels(self):
        return list(self.errors.get("levels", [0.0]))


def _scenario_defaults(name):
    lqc = {"kind": "lqc", "c1": 0.2, "u_max": 10.0}
    if name == "fig1_sweep":
        levels = [round(0.1 * i, 10) for i in range(51)]
        return {"system": lqc, "errors": {"kind": "graded", "levels": levels}, "seeds": [0, 1, 2, 3, 4]}
    if name == "fig2_attack":
        return {"system": dict(lqc, c1=1.0), "errors": {"kind": "attack"}, "seeds": [0]}
    if name == "fig3_arm":
        arm = {"kind": "arm", "c2": 0.5, "c3": 0.2, "c4": 0.1, "x_max": 0.2, "u_max": 1e3,
               "phi_max": 0.05, "amplitude": 0.04}
        return {"system": arm, "errors": {"kind": "attack"}, "seeds": [0]}
    return {"system": lqc, "errors": {"kind": "none"}, "seeds": [0]}


ERROR_DEFAULTS = {"kind": "none", "levels": [0.0], "sigma": 0.5, "mean": "zero", "attack_norm": 4.0,
                  "period": 5, "triggers": [0, 1]}


def validate_config(raw=None):
    """Fill defaults and range-check a raw mapping.

    Returns ``(config, errors)``; ``config`` is ``None`` when ``errors`` is
    nonempty.
    """
    raw = dict(raw or {})
    errors = []
    name = raw.pop("scenario", "fig1_sweep")
    if name not in SCENARIOS:
        return None, [f"unknown scenario {name!r}; expected one of {', '.join(SCENARIOS)}"]
    base = _scenario_defaults(name)
    system = dict(base["system"], **(raw.pop("system", None) or {}))
    err = dict(ERROR_DEFAULTS, **base["errors"])
    err.update(raw.pop("errors", None) or {})
    if err["kind"] == "attack":
        # the attack norm doubles as the run's error level
        err["levels"] = [err["attack_norm"]]
    elif err["kind"] == "none":
        err["levels"] = [0.0]
    seeds = raw.pop("seeds", base["seeds"])
    known = {f for f in ScenarioConfig.__dataclass_fields__}
    extra = sorted(set(raw) - known)
    if extra:
        errors.append(f"unknown keys: {', '.join(extra)}")
    cfg = ScenarioConfig(scenario=name, system=system, errors=err, seeds=seeds,
                         **{k: v for k, v in raw.items() if k in known})

    def check(cond, msg):
        if not cond:
            errors.append(msg)

    check(isinstance(cfg.k, int) and cfg.k >= 1, "window must be ≥ 1")
    check(isinstance(cfg.T, int) and cfg.T >= 1, "T must be a positive integer")
    if not errors:
        check(cfg.T >= cfg.k, "T must be ≥ k")
    check(isinstance(cfg.beta, (int, float)) and cfg.beta > 0, "β must be > 0")
    check(0.0 <= cfg.init_lambda <= 1.0, "init_lambda must lie in [0, 1]")
    check(isinstance(cfg.seeds, list) and len(cfg.seeds) > 0, "seeds must be a nonempty list")
    check(all(isinstance(s, int) and s >= 0 for s in cfg.seeds or []), "seeds must be nonnegative integers")
    check(isinstance(cfg.policies, list) and len(cfg.policies) > 0, "policies must be a nonempty list")
    for p in cfg.policies or []:
        try:
            make_policy(p, None)
        except ValueError:
            errors.append(f"unknown policy {p!r}")
    check(system.get("kind") in ("lqc", "arm"), "system.kind must be 'lqc' or 'arm'")
    check(err["kind"] in ("none", "graded", "attack"), "errors.kind must be none, graded or attack")
    check(err["mean"] in ("ones", "zero"), "errors.mean must be 'ones' or 'zero'")
    check(err["sigma"] >= 0, "errors.sigma must be ≥ 0")
    check(all(lv >= 0 for lv in err["levels"]), "error levels must be ≥ 0")
    return (None, errors) if errors else (cfg, [])


def load_config(path, scenario=None):
    """Read a YAML scenario file; an empty file yields the defaults.

    ``scenario`` overrides the file's scenario name. A relative ``out`` is
    resolved against the file's directory.
    """
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        return None, ["config must be a mapping"]
    if scenario:
        raw["scenario"] = scenario
    cfg, errors = validate_config(raw)
    if cfg is not None:
        base = Path(path).resolve().parent
        if cfg.out:
            cfg.out = str((base / cfg.out).resolve())
    return cfg, errors


# --------------------------------------------------------------------------
# scenario construction


@dataclass
class Setup:
    system: object
    truth: np.ndarray
    x0: np.ndarray
    gains: object
    rho: np.ndarray
    selftuning_gains: object
    loss_scale: float
    uncertainty: object = None


def build_setup(cfg: ScenarioConfig):
    spec = cfg.system
    if spec["kind"] == "lqc":
        u_max = spec.get("u_max", 10.0)
        system, truth = make_lqc_tracking_system(spec.get("c1", 0.2), u_max, cfg.T)
        L = system.linear
        gains = solve_dare(L.A, L.B, L.Q, L.R, horizon=cfg.T)
        x0 = np.zeros(4) if cfg.x0 is None else np.asarray(cfg.x0, dtype=float)
        return Setup(system, truth, x0, gains, edpb_weights(gains, cfg.k), gains, system.uncertainty.radius)
    system = make_robot_arm_system(
        spec.get("c2", 0.5), spec.get("c3", 0.2), spec.get("c4", 0.1), cfg.T,
        spec.get("x_max", 0.2), spec.get("u_max", 1e3), spec.get("phi_max", 0.05),
    )
    truth = arm_truth(cfg.T, spec.get("amplitude", 0.04))
    c2, c3, c4 = (system.params[c] for c in ("c2", "c3", "c4"))
    lin = solve_dare([[1 + c2]], [[c3]], [[1.0]], [[c4]], horizon=cfg.T)
    rho = estimate_edpb(system, cfg.k, trials=4, seed=0, solver_opts={"n_starts": 1})
    x0 = np.zeros(1) if cfg.x0 is None else np.asarray(cfg.x0, dtype=float)
    return Setup(system, truth, x0, None, rho, lin, 0.5 * system.uncertainty.diameter, system.uncertainty)


def schedule_for(cfg, level, seed):
    e = cfg.errors
    return ErrorSchedule(
        kind=e["kind"], level=float(level), sigma=float(e["sigma"]), mean=e["mean"],
        attack_norm=float(level) if e["kind"] == "attack" else float(e["attack_norm"]),
        period=int(e["period"]),
        triggers=tuple(e["triggers"]), seed=int(seed),
    )


def prepared_bundle(cfg, setup, level, seed):
    """Predictions for one (level, seed), with the scenario's uncertainty set applied."""
    bundle = inject_errors(setup.truth, schedule_for(cfg, level, seed), cfg.k)
    if setup.uncertainty is None:
        system, bundle = ingest(setup.system, bundle, "auto")
    else:
        system, bundle = ingest(setup.system, bundle, "system")
    return system, bundle


def _backend(cfg, setup, system, seed):
    if setup.gains is not None:
        return ClosedFormBackend(setup.gains, system.input_box)
    margin = system.uncertainty.diameter
    return MpcBackend(system, state_margin=margin, seed=seed)


def build_policy(cfg, setup, system, kind, seed):
    st = ClosedFormBackend(setup.selftuning_gains, system.input_box)
    return make_policy(kind, _backend(cfg, setup, system, seed), cfg.k, learning_weights(setup.rho),
                       cfg.beta, cfg.init_lambda, selftuning_backend=st, scale=setup.loss_scale)


@dataclass
class RunResult:
    record: dict
    log: object
    bundle: object
    diagnostics: dict = None
    last_solve: object = None


def run_one(cfg, setup, kind, level, seed, J_star=None, diagnostics=False, trace=False):
    system, bundle = prepared_bundle(cfg, setup, level, seed)
    policy = build_policy(cfg, setup, system, kind, seed)
    if trace and isinstance(policy.backend, MpcBackend):
        policy.backend.solver_opts["trace"] = True
    log = run_closed_loop(system, policy, bundle, setup.x0)
    diag = None
    if diagnostics and setup.gains is not None:
        per_step_error_diag(log, setup.gains, bundle.truth)
    if diagnostics and setup.gains is None and getattr(policy.backend, "last", None) is not None:
        last = policy.backend.last
        prob = MpcProblem(system, log.states[-2], log.used_params[-1], t0=bundle.T - 1,
                          state_margin=policy.backend.state_margin)
        rd = regularity_probe(prob, last)
        diag = asdict(rd)
    gamma = system.uncertainty.diameter
    rec = competitive_report(
        log, bundle, cfg.k, setup.rho, J_star, gamma, setup.gains, seed=seed,
        error_norm=float(level), learn_rho=learning_weights(setup.rho), loss_scale=setup.loss_scale,
    )
    last = getattr(policy.backend, "last", None)
    return RunResult(rec, log, bundle, diag, last if trace else None)


def offline_for(cfg, setup, system, truth):
    try:
        return offline_optimum(system, truth, setup.x0, setup.gains, cap=cfg.offline_cap)
    except (ValueError, NonConvergenceError):
        # reported as NaN, which also blanks CR and the bound columns
        return math.nan


def _task(args):
    cfg, kind, level, seed, J_star, diagnostics, trace = args
    setup = _setup_cache(cfg)
    return run_one(cfg, setup, kind, level, seed, J_star, diagnostics, trace)


_CACHE = {}


def _setup_cache(cfg):
    key = repr(asdict(cfg))
    if key not in _CACHE:
        _CACHE.clear()
        _CACHE[key] = build_setup(cfg)
    return _CACHE[key]


def run_scenario(cfg: ScenarioConfig, out_dir=None, jobs=1, diagnostics=False, write_runs=True, trace=False):
    """Execute every (policy, seed, level) run and write the artifacts.

    Returns ``(results, status)`` where ``status`` counts solver failures
    and infeasible steps.
    """
    out = Path(out_dir or cfg.out or os.environ.get(OUTPUT_ENV, "lac_out"))
    out.mkdir(parents=True, exist_ok=True)
    setup = _setup_cache(cfg)
    J_star = offline_for(cfg, setup, setup.system, setup.truth)
    tasks = [(cfg, kind, level, seed, J_star, diagnostics, trace)
             for level in cfg.levels() for seed in cfg.seeds for kind in cfg.policies]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        results = [_task(t) for t in tasks]

    records = [r.record for r in results]
    write_metrics_csv(out / "metrics.csv", records)
    if write_runs:
        runs = out / "runs"
        runs.mkdir(exist_ok=True)
        for r in results:
            write_run_csv(runs / run_name(r.record), r.log)
        streams = out / "streams"
        streams.mkdir(exist_ok=True)
        seen = set()
        for r in results:
            key = (r.record["seed"], r.record["error_norm"])
            if key not in seen:
                seen.add(key)
                write_stream_csv(streams / stream_name(*key), r.bundle)
    if diagnostics:
        write_diagnostics(out / "diagnostics.csv", results)
    if trace:
        traces = out / "traces"
        traces.mkdir(exist_ok=True)
        for r in results:
            if r.last_solve is not None:
                write_trace(traces / run_name(r.record), r.last_solve)
    status = {
        "solver_failures": sum(r.log.solver_failures for r in results),
        "infeasible_steps": int(sum(np.count_nonzero(~r.log.feasible) for r in results)),
        "runs": len(results),
    }
    return results, status


def run_name(rec):
    return f"{rec['policy']}_seed{rec['seed']}_err{rec['error_norm']:.2f}.csv"


def stream_name(seed, level):
    return f"stream_seed{seed}_err{level:.2f}.csv"


def write_diagnostics(path, results):
    cols = ["policy", "seed", "error_norm", "sum_e_u_sq", "max_e_x",
            "jacobian_min_singular", "reduced_hessian_min_eig"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in results:
            log, d = r.log, r.diagnostics or {}
            eu = math.nan if log.e_u is None else float(np.sum(log.e_u**2))
            ex = math.nan if log.e_x is None else float(np.max(log.e_x))
            vals = [r.record["policy"], r.record["seed"], r.record["error_norm"], eu, ex,
                    d.get("jacobian_min_singular", math.nan), d.get("reduced_hessian_min_eig", math.nan)]
            fh.write(",".join(v if isinstance(v, str) else f"{v:.17g}" for v in vals) + "\n")


def with_overrides(cfg, seed=None):
    return cfg if seed is None else replace(cfg, seeds=[int(seed)])
