"""Closed-loop simulation, error injection and competitive-ratio reporting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .confidence import dcl_regret, varpi_gram, varpi_rho, window_losses
from .lqc import (
    adversity,
    clairvoyant_feedforward,
    clairvoyant_optimal_lqc,
    NonConvergenceError,
    lower_bound_constant,
    upper_bound_constant,
)
from .model import make_bundle, stack_windows, window_end
from .policies import observe
from .trajopt import MpcProblem, feasibility_check, ilqr, solve_mpc

NOISE_STREAM = 0
MULTISTART_STREAM = 1


class InfeasibleStep(RuntimeWarning):
    pass


def substream(seed, name):
    """Independent generator for a named use of the scenario seed."""
    return np.random.default_rng([int(seed), int(name)])


@dataclass(frozen=True)
class ErrorSchedule:
    """Prediction-error schedule.

    ``graded`` perturbs every window to stacked norm ``level``. ``attack``
    perturbs windows issued at steps in ``[T/3, 2T/3)`` with
    ``t mod period in triggers`` to norm ``attack_norm`` and leaves the
    others exact. The noise direction is centred Gaussian with deviation
    ``sigma`` (``mean="ones"`` shifts every coordinate by one).
    """

    kind: str = "none"
    level: float = 0.0
    sigma: float = 0.5
    mean: str = "zero"
    attack_norm: float = 4.0
    period: int = 5
    triggers: tuple = (0, 1)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "graded", "attack"):
            raise ValueError(f"unknown error schedule {self.kind!r}")
        if self.mean not in ("ones", "zero"):
            raise ValueError("mean must be 'ones' or 'zero'")
        if self.level < 0 or self.attack_norm < 0 or self.sigma < 0:
            raise ValueError("norms and sigma must be nonnegative")

    def attacked(self, t, T) -> bool:
        return self.kind == "attack" and T <= 3 * t < 2 * T and t % self.period in self.triggers

    def target(self, t, T) -> float:
        if self.kind == "graded":
            return self.level
        if self.attacked(t, T):
            return self.attack_norm
        return 0.0


def inject_errors(truth, schedule: ErrorSchedule, k, nominals=None, uncertainty=None):
    """Build a prediction bundle by perturbing the truth window by window.

    A direction is drawn for every window (even unperturbed ones) so the
    noise stream is shared across error levels of the same seed.
    """
    truth = np.asarray(truth, dtype=float)
    if truth.ndim == 1:
        truth = truth[:, None]
    T, d = truth.shape
    rng = substream(schedule.seed, NOISE_STREAM)
    mu = 1.0 if schedule.mean == "ones" else 0.0
    preds = []
    for t in range(T):
        w = window_end(t, k, T) - t + 1
        v = rng.normal(mu, schedule.sigma, size=w * d)
        target = schedule.target(t, T)
        win = truth[t:t + w].copy()
        if target > 0:
            nv = np.linalg.norm(v)
            if nv == 0.0:
                v, nv = np.ones(w * d), math.sqrt(w * d)
            win += (target / nv * v).reshape(w, d)
        preds.append(win)
    bundle = make_bundle(truth, preds, nominals, k)
    return bundle if uncertainty is None else bundle.project(uncertainty)


# --------------------------------------------------------------------------
# closed loop


@dataclass
class TrajectoryLog:
    policy: str
    states: np.ndarray
    inputs: np.ndarray
    costs: np.ndarray
    terminal: float
    lambdas: np.ndarray
    feasible: np.ndarray
    used_params: list
    xi_index: np.ndarray
    grads: np.ndarray
    e_u: np.ndarray = None
    e_x: np.ndarray = None
    solver_failures: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.costs)

    @property
    def J(self) -> float:
        return float(np.sum(self.costs) + self.terminal)

    def recompute_cost(self, system, truth) -> float:
        total = sum(
            system.stage_cost(self.states[t], self.inputs[t], truth[t], t) for t in range(self.T)
        )
        return float(total + system.terminal_cost(self.states[-1], truth[-1]))


def run_closed_loop(system, policy, bundle, x0, feas_tol=1e-6):
    """Simulate ``policy`` on ``system`` driven by the true parameters."""
    T, n, m = bundle.T, system.state_dim, system.input_dim
    truth = bundle.truth
    xs = np.zeros((T + 1, n))
    us = np.zeros((T, m))
    costs = np.zeros(T)
    feasible = np.ones(T, dtype=bool)
    xs[0] = np.asarray(x0, dtype=float).reshape(n)
    policy.reset()
    for t in range(T):
        u = np.asarray(policy.act(observe(bundle, t, xs[t])), dtype=float).reshape(m)
        rep = feasibility_check(system, xs[t], u, truth[t], t, tol=feas_tol)
        feasible[t] = rep.ok
        us[t] = u
        xs[t + 1] = rep.next_state
        costs[t] = system.stage_cost(xs[t], u, truth[t], t)
    lams = np.array(policy.lambdas, dtype=float)
    used = [lams[t] * bundle.predictions[t] + (1 - lams[t]) * bundle.nominals[t] for t in range(T)]
    learner = getattr(policy, "learner", None)
    if learner is not None:
        xi_index = np.array([-1 if i is None else i for i in learner.used_index])
        grads = np.array(learner.grads, dtype=float)
    else:
        xi_index, grads = -np.ones(T, dtype=int), np.zeros(T)
    return TrajectoryLog(
        policy=policy.name, states=xs, inputs=us, costs=costs,
        terminal=system.terminal_cost(xs[-1], truth[-1]),
        lambdas=lams, feasible=feasible, used_params=used,
        xi_index=xi_index, grads=grads,
        solver_failures=getattr(policy.backend, "failures", 0),
    )


def offline_optimum(system, truth, x0, gains=None, cap=60, solver_opts=None):
    """Clairvoyant optimal cost ``J*``.

    Linear-quadratic systems use the closed form whenever its trajectory
    respects the constraints. Otherwise iterative LQR over the full horizon
    is tried first; if it fails or its trajectory leaves the constraint
    set, penalised shooting takes over, which is only attempted for
    ``T <= cap``.
    """
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    T = truth.shape[0]
    if gains is not None:
        xs, us, J = clairvoyant_optimal_lqc(gains, x0, truth)
        if _respects(system, xs, us):
            return J
    problem = MpcProblem(system, x0, truth, t0=0, seed=0, **(solver_opts or {}))
    if gains is None:
        sol = ilqr(problem)
        if sol.converged and _respects(system, sol.states, sol.controls):
            return sol.objective
    if T > cap:
        raise ValueError(f"full-horizon shooting capped at T={cap}, got T={T}")
    sol = solve_mpc(problem)
    if not sol.converged:
        raise NonConvergenceError("offline optimum did not converge")
    return float(sol.objective)


def _respects(system, xs, us):
    return (max((system.input_violation(u) for u in us), default=0.0) == 0.0
            and max((system.state_violation(x) for x in xs[1:]), default=0.0) == 0.0)


def per_step_error_diag(log, gains, truth):
    """Per-step action and state errors against the clairvoyant policy.

    ``e_u[t] = ||u_t - u*_t(x_t)||`` where ``u*`` uses the full true tail
    at the realised state, and ``e_x[t] = ||B (u_t - u*_t)||`` is the
    resulting one-step state deviation.
    """
    etas = clairvoyant_feedforward(gains, truth)
    e_u = np.zeros(log.T)
    e_x = np.zeros(log.T)
    for t in range(log.T):
        u_star = -gains.K @ log.states[t] - gains.S @ etas[t]
        du = log.inputs[t] - u_star
        e_u[t] = np.linalg.norm(du)
        e_x[t] = np.linalg.norm(gains.B @ du)
    log.e_u, log.e_x = e_u, e_x
    return e_u, e_x


# --------------------------------------------------------------------------
# reporting

METRIC_COLUMNS = (
    "policy", "seed", "error_norm", "J", "J_star", "CR", "varpi_rho", "varpi_gram",
    "thm3_upper", "thm4_lower", "dcl_regret", "lemma3_bound", "adversity",
)


def bound_terms(bundle, rho):
    """``(varpi_rho, varpi_gram)`` for a bundle with weights ``rho``."""
    pairs = [bundle.errors(t) for t in range(bundle.T)]
    eps = [p[0] for p in pairs]
    eps_bar = [p[1] for p in pairs]
    return varpi_rho(eps, eps_bar, rho), varpi_gram(stack_windows(eps), stack_windows(eps_bar))


def competitive_report(log, bundle, k, rho, J_star, gamma, gains=None, seed=0, error_norm=0.0,
                       learn_rho=None, loss_scale=1.0):
    """Metrics record for one run.

    Bound values need the linear-quadratic ``gains``; for other systems they
    are reported as NaN. A zero ``J_star`` gives ``CR = inf``. The DCL
    regret is measured on the loss the learner actually used (weights
    ``learn_rho``, errors divided by ``loss_scale``).
    """
    T = bundle.T
    rho = np.asarray(rho, dtype=float)
    J = log.J
    if J_star is None or not np.isfinite(J_star):
        cr = math.nan
    elif J_star == 0.0:
        cr = math.inf
    else:
        cr = J / J_star
    w_rho, w_gram = bound_terms(bundle, rho)
    lr = rho if learn_rho is None else np.asarray(learn_rho, dtype=float)
    regret, l3 = dcl_regret(window_losses(bundle, lr, loss_scale), log.lambdas, float(np.sum(lr)),
                            gamma / loss_scale, k)
    thm3 = thm4 = math.nan
    if gains is not None and J_star:
        rf = gains.rho_F
        thm3 = 1 + upper_bound_constant(gains) * (
            gamma**2 * rf ** (2 * k) * T + 4 * gamma**2 * math.sqrt(T * k**3 + k**4) + w_rho
        ) / J_star
        thm4 = 1 + lower_bound_constant(gains) * w_gram / J_star
    return {
        "policy": log.policy, "seed": seed, "error_norm": error_norm, "J": J, "J_star": J_star,
        "CR": cr, "varpi_rho": w_rho, "varpi_gram": w_gram, "thm3_upper": thm3,
        "thm4_lower": thm4, "dcl_regret": regret, "lemma3_bound": l3,
        "adversity": adversity(bundle.truth),
    }


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_metrics_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for rec in records:
            w.writerow([_fmt(rec[c]) for c in METRIC_COLUMNS])


def read_metrics_csv(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec = {c: row[c] for c in METRIC_COLUMNS}
            rec["seed"] = int(rec["seed"])
            rec["adversity"] = int(rec["adversity"])
            for c in METRIC_COLUMNS[2:-1]:
                rec[c] = float(rec[c])
            out.append(rec)
    return out


def write_run_csv(path, log):
    """Per-step log: ``t, x_i.., u_i.., cost, lambda, feasible, e_u, e_x, xi_available_index, grad``.

    The final row carries the terminal state and cost with empty inputs.
    """
    n, m = log.states.shape[1], log.inputs.shape[1]
    nan = np.full(log.T, np.nan)
    e_u = nan if log.e_u is None else log.e_u
    e_x = nan if log.e_x is None else log.e_x
    head = (["t"] + [f"x_{i}" for i in range(n)] + [f"u_{i}" for i in range(m)]
            + ["cost", "lambda", "feasible", "e_u", "e_x", "xi_available_index", "grad"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(head)
        for t in range(log.T):
            w.writerow(
                [t] + [_fmt(v) for v in log.states[t]] + [_fmt(v) for v in log.inputs[t]]
                + [_fmt(log.costs[t]), _fmt(log.lambdas[t]), int(log.feasible[t]),
                   _fmt(e_u[t]), _fmt(e_x[t]), int(log.xi_index[t]), _fmt(log.grads[t])]
            )
        w.writerow([log.T] + [_fmt(v) for v in log.states[-1]] + [""] * m
                   + [_fmt(log.terminal), "", "", "", "", "", ""])


def read_run_csv(path):
    """Load a run CSV back into arrays keyed by column name (terminal row excluded)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    body = rows[:-1]
    cols = {}
    for key in rows[0]:
        vals = [r[key] for r in body]
        cols[key] = np.array([float(v) if v != "" else np.nan for v in vals])
    cols["terminal_cost"] = float(rows[-1]["cost"])
    return cols
