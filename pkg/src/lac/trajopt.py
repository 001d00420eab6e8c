"""Direct-shooting receding-horizon optimizer.

Controls are the decision variables; states come from rolling the
dynamics forward. Input bounds are handled by projection, state and path
constraints by a quadratic penalty whose weight is escalated until the
violation is negligible. Each penalty level is solved with a spectral
(Barzilai-Borwein) projected gradient method with a nonmonotone
backtracking line search.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import SystemModel


class NonFiniteError(FloatingPointError):
    """The rollout produced a non-finite state."""


@dataclass
class PenaltySchedule:
    start: float = 1e2
    factor: float = 10.0
    stop: float = 1e8

    def levels(self):
        mu = self.start
        while mu <= self.stop * (1 + 1e-12):
            yield mu
            mu *= self.factor


@dataclass
class MpcProblem:
    """One receding-horizon problem.

    ``params`` has one row per window step and is already λ-combined.
    ``state_margin`` tightens the state box for the predicted states so a
    bounded parameter mismatch cannot push the executed state out of it.
    """

    system: SystemModel
    x0: np.ndarray
    params: np.ndarray
    t0: int = 0
    state_margin: float = 0.0
    penalty: PenaltySchedule = field(default_factory=PenaltySchedule)
    warm_start: Optional[np.ndarray] = None
    seed: Optional[int] = None
    n_starts: int = 3
    max_iter: int = 2000
    grad_tol: float = 1e-8
    viol_tol: float = 1e-6
    trace: bool = False

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).reshape(self.system.state_dim)
        self.params = np.asarray(self.params, dtype=float).reshape(-1, self.system.param_dim)
        if self.params.shape[0] < 1:
            raise ValueError("window must be >= 1")
        if not np.all(np.isfinite(self.x0)):
            raise ValueError("start state must be finite")

    @property
    def window(self) -> int:
        return self.params.shape[0]


@dataclass
class MpcSolution:
    controls: np.ndarray
    states: np.ndarray
    objective: float
    violation: float
    converged: bool
    iterations: int
    grad_norm: float = np.nan
    penalty: float = 0.0
    trace: list = field(default_factory=list)

    @property
    def action(self) -> np.ndarray:
        return self.controls[0]


def _bounds(problem):
    sys_ = problem.system
    state_lo = state_hi = None
    if sys_.state_box is not None:
        state_lo = sys_.state_box[0] + problem.state_margin
        state_hi = sys_.state_box[1] - problem.state_margin
    return state_lo, state_hi


def rollout(system, x0, us, params, t0=0):
    xs = np.empty((len(us) + 1, system.state_dim))
    xs[0] = x0
    for j, (u, phi) in enumerate(zip(us, params)):
        xs[j + 1] = system.dynamics(xs[j], u, phi, t0 + j)
    if not np.all(np.isfinite(xs)):
        raise NonFiniteError("rollout produced non-finite states")
    return xs


def constraint_violation(problem, xs, us):
    """Largest positive part over path constraints and predicted-state bounds."""
    sys_ = problem.system
    lo, hi = _bounds(problem)
    worst = 0.0
    if lo is not None:
        worst = max(worst, float(np.max(lo - xs[1:])), float(np.max(xs[1:] - hi)))
    if sys_.path_constraint is not None:
        for j, (x, u, phi) in enumerate(zip(xs[:-1], us, problem.params)):
            worst = max(worst, float(np.max(sys_.path_constraint(x, u, phi, problem.t0 + j))))
    return worst


def shooting_objective(problem, us, mu=0.0, with_grad=True):
    """Penalised shooting objective and its gradient in the controls.

    Returns ``(value, grad, cost, xs)`` where ``cost`` excludes the penalty.
    The gradient is the adjoint (reverse-mode chain rule) of the rollout.
    """
    sys_ = problem.system
    us = np.asarray(us, dtype=float).reshape(problem.window, sys_.input_dim)
    params, t0 = problem.params, problem.t0
    xs = rollout(sys_, problem.x0, us, params, t0)
    lo, hi = _bounds(problem)
    w = problem.window
    term_phi = params[-1]

    cost = sum(sys_.stage_cost(xs[j], us[j], params[j], t0 + j) for j in range(w))
    cost += sys_.terminal_cost(xs[w], term_phi)
    pen = 0.0
    if mu > 0:
        if lo is not None:
            over = np.maximum(xs[1:] - hi, 0.0) + np.maximum(lo - xs[1:], 0.0)
            pen += mu * float(np.sum(over**2))
        if sys_.path_constraint is not None:
            for j in range(w):
                h = np.maximum(sys_.path_constraint(xs[j], us[j], params[j], t0 + j), 0.0)
                pen += mu * float(h @ h)
    value = cost + pen
    if not with_grad:
        return value, None, cost, xs

    grad = np.zeros_like(us)
    lam = sys_.terminal_cost_grad(xs[w], term_phi).astype(float)
    if mu > 0 and lo is not None:
        lam = lam + 2 * mu * (np.maximum(xs[w] - hi, 0.0) - np.maximum(lo - xs[w], 0.0))
    for j in range(w - 1, -1, -1):
        x, u, phi = xs[j], us[j], params[j]
        fx, fu = sys_.dynamics_jac(x, u, phi, t0 + j)
        cx, cu = sys_.stage_cost_grad(x, u, phi, t0 + j)
        gu = cu + fu.T @ lam
        gx = cx + fx.T @ lam
        if mu > 0 and sys_.path_constraint is not None:
            h = np.maximum(sys_.path_constraint(x, u, phi, t0 + j), 0.0)
            if np.any(h > 0):
                hx, hu = sys_.path_constraint_jac(x, u, phi, t0 + j)
                gu = gu + 2 * mu * hu.T @ h
                gx = gx + 2 * mu * hx.T @ h
        grad[j] = gu
        if j > 0 and mu > 0 and lo is not None:
            gx = gx + 2 * mu * (np.maximum(x - hi, 0.0) - np.maximum(lo - x, 0.0))
        lam = gx
    return value, grad, cost, xs


def _project(system, us):
    if system.input_box is None:
        return us
    return np.clip(us, system.input_box[0], system.input_box[1])


def _spg(problem, us, mu, trace=None, memory=10, stall=50):
    """Spectral projected gradient on one penalty level.

    Stops on a small projected gradient, after ``stall`` iterations without
    progress, or at the iteration cap; returns the best iterate seen.
    """
    sys_ = problem.system
    us = _project(sys_, us)
    f, g, _, _ = shooting_objective(problem, us, mu)
    hist = [f]
    step = 1.0 / max(1.0, np.max(np.abs(g)))
    best = (f, us.copy())
    pg_norm = np.inf
    since_best = 0
    for it in range(problem.max_iter):
        pg_norm = float(np.max(np.abs(_project(sys_, us - g) - us)))
        if pg_norm < problem.grad_tol:
            return us, pg_norm, it
        d = _project(sys_, us - step * g) - us
        gd = float(np.sum(g * d))
        fref = max(hist[-memory:])
        alpha = 1.0
        while True:
            cand = us + alpha * d
            fc, gc, _, xc = shooting_objective(problem, cand, mu)
            if fc <= fref + 1e-4 * alpha * gd or alpha < 1e-14:
                break
            alpha *= 0.5
        s, y = cand - us, gc - g
        sy = float(np.sum(s * y))
        step = float(np.clip(np.sum(s * s) / sy, 1e-12, 1e12)) if sy > 0 else 1e12
        if trace is not None:
            trace.append((mu, it, fc, constraint_violation(problem, xc, cand), alpha))
        if np.max(np.abs(s)) == 0.0:
            us, f, g = cand, fc, gc
            break
        us, f, g = cand, fc, gc
        hist.append(f)
        if f < best[0] - 1e-15 * max(1.0, abs(best[0])):
            since_best = 0
        else:
            since_best += 1
        if f < best[0]:
            best = (f, us.copy())
        if since_best >= stall:
            break
    pg_norm = float(np.max(np.abs(_project(sys_, best[1] - shooting_objective(problem, best[1], mu)[1]) - best[1])))
    return best[1], pg_norm, it + 1


def directionally_stationary(problem, us, mu, h=1e-7, slope_tol=1e-3):
    """One-sided slope test along every feasible coordinate direction.

    Certifies approximate stationarity at nonsmooth points (the arm
    dynamics have a kink at ``x = 0``) where the gradient test cannot pass.
    """
    sys_ = problem.system
    f0 = shooting_objective(problem, us, mu, with_grad=False)[0]
    lo = hi = None
    if sys_.input_box is not None:
        lo, hi = sys_.input_box
    for idx in np.ndindex(us.shape):
        for sgn in (1.0, -1.0):
            cand = us.copy()
            cand[idx] += sgn * h
            if lo is not None and not (lo[idx[1]] <= cand[idx] <= hi[idx[1]]):
                continue
            slope = (shooting_objective(problem, cand, mu, with_grad=False)[0] - f0) / h
            if slope < -slope_tol:
                return False
    return True


def _solve_from(problem, us0):
    trace = [] if problem.trace else None
    us = us0
    total_it, pg, mu = 0, np.inf, 0.0
    for mu in problem.penalty.levels():
        us, pg, it = _spg(problem, us, mu, trace)
        total_it += it
        _, _, _, xs = shooting_objective(problem, us, mu, with_grad=False)
        if constraint_violation(problem, xs, us) < problem.viol_tol:
            break
    _, _, cost, xs = shooting_objective(problem, us, mu, with_grad=False)
    viol = constraint_violation(problem, xs, us)
    rows = []
    if trace is not None:
        rows = list(trace)
    return MpcSolution(
        controls=us, states=xs, objective=cost, violation=viol,
        converged=bool(
            viol < problem.viol_tol
            and (pg < problem.grad_tol or directionally_stationary(problem, us, mu))
        ),
        iterations=total_it, grad_norm=pg, penalty=mu, trace=rows,
    )


def solve_mpc(problem: MpcProblem) -> MpcSolution:
    """Minimise the window cost over the control sequence.

    Up to three starts are tried: zeros, the shifted warm start (if given)
    and a small random sequence. The feasible start with the lowest
    objective wins; ties go to lower violation, then smaller controls.
    """
    sys_ = problem.system
    shape = (problem.window, sys_.input_dim)
    starts = [np.zeros(shape)]
    if problem.warm_start is not None and problem.n_starts >= 2:
        ws = np.asarray(problem.warm_start, dtype=float).reshape(-1, sys_.input_dim)
        shifted = np.zeros(shape)
        take = min(len(ws) - 1, shape[0])
        if take > 0:
            shifted[:take] = ws[1:take + 1]
            shifted[take:] = ws[-1]
        starts.append(shifted)
    if problem.n_starts >= 3:
        rng = np.random.default_rng(problem.seed)
        scale = 1e-2
        if sys_.input_box is not None:
            scale = 1e-2 * float(np.min(sys_.input_box[1] - sys_.input_box[0]))
        starts.append(scale * rng.standard_normal(shape))
    starts = starts[: max(1, problem.n_starts)]

    sols = [_solve_from(problem, s) for s in starts]

    def key(sol):
        feasible = sol.violation < problem.viol_tol
        return (not feasible, round(sol.objective, 12), sol.violation, float(np.linalg.norm(sol.controls)))

    best = min(sols, key=key)
    best.iterations = sum(s.iterations for s in sols)
    return best


def write_trace(path, solution: MpcSolution):
    """Dump ``penalty, iteration, objective, violation, step`` rows of a traced solve."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["penalty", "iteration", "objective", "violation", "step"])
        for mu, it, f, v, a in solution.trace:
            w.writerow([f"{mu:.17g}", it, f"{f:.17g}", f"{v:.17g}", f"{a:.17g}"])


def _fd_jacobian(fun, z, h=1e-6):
    cols = []
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        cols.append((np.asarray(fun(z + e)) - np.asarray(fun(z - e))) / (2 * h))
    return np.column_stack(cols)


def ilqr(problem: MpcProblem, us0=None, max_iter=200, tol=1e-13, reg=1e-10):
    """Iterative LQR (Gauss-Newton DDP) on the unpenalised window cost.

    Long horizons on open-loop unstable plants make plain shooting badly
    conditioned; the feedback in the forward pass avoids that. Inputs are
    clipped to the input box, state bounds are ignored (check the returned
    ``violation``). Cost Hessians come from central differences of the
    supplied gradients, which is exact for quadratic costs. Convergence is
    declared when the predicted decrease drops below ``tol * max(1, J)``.
    """
    sys_ = problem.system
    w, n, m = problem.window, sys_.state_dim, sys_.input_dim
    params, t0 = problem.params, problem.t0
    us = np.zeros((w, m)) if us0 is None else np.array(us0, dtype=float).reshape(w, m)
    us = _project(sys_, us)
    xs = rollout(sys_, problem.x0, us, params, t0)

    def total(xs, us):
        c = sum(sys_.stage_cost(xs[j], us[j], params[j], t0 + j) for j in range(w))
        return c + sys_.terminal_cost(xs[w], params[-1])

    J = total(xs, us)
    converged, it = False, 0
    for it in range(1, max_iter + 1):
        Vx = sys_.terminal_cost_grad(xs[w], params[-1]).astype(float)
        Vxx = _fd_jacobian(lambda z: sys_.terminal_cost_grad(z, params[-1]), xs[w])
        ks, Ks, expected = np.zeros((w, m)), np.zeros((w, m, n)), 0.0
        for j in range(w - 1, -1, -1):
            x, u, phi = xs[j], us[j], params[j]
            fx, fu = sys_.dynamics_jac(x, u, phi, t0 + j)
            lx, lu = sys_.stage_cost_grad(x, u, phi, t0 + j)
            z = np.concatenate([x, u])
            L2 = _fd_jacobian(
                lambda z: np.concatenate(sys_.stage_cost_grad(z[:n], z[n:], phi, t0 + j)), z
            )
            Qx, Qu = lx + fx.T @ Vx, lu + fu.T @ Vx
            Qxx = L2[:n, :n] + fx.T @ Vxx @ fx
            Quu = L2[n:, n:] + fu.T @ Vxx @ fu + reg * np.eye(m)
            Qux = L2[n:, :n] + fu.T @ Vxx @ fx
            k = -np.linalg.solve(Quu, Qu)
            K = -np.linalg.solve(Quu, Qux)
            ks[j], Ks[j] = k, K
            expected += float(-Qu @ k) - 0.5 * float(k @ Quu @ k)
            Vx = Qx + K.T @ Quu @ k + K.T @ Qu + Qux.T @ k
            Vxx = Qxx + K.T @ Quu @ K + K.T @ Qux + Qux.T @ K
            Vxx = 0.5 * (Vxx + Vxx.T)
        if expected <= tol * max(1.0, abs(J)):
            converged = True
            break
        alpha, accepted = 1.0, False
        while alpha > 1e-10:
            new_x = np.empty_like(xs)
            new_u = np.empty_like(us)
            new_x[0] = problem.x0
            for j in range(w):
                new_u[j] = us[j] + alpha * ks[j] + Ks[j] @ (new_x[j] - xs[j])
                new_u[j] = _project(sys_, new_u[j][None])[0]
                new_x[j + 1] = sys_.dynamics(new_x[j], new_u[j], params[j], t0 + j)
            if np.all(np.isfinite(new_x)):
                J_new = total(new_x, new_u)
                if J_new <= J - 1e-4 * alpha * expected:
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            # no decrease along the Newton direction: stationary up to rounding
            converged = expected <= 1e-8 * max(1.0, abs(J))
            break
        xs, us, J = new_x, new_u, J_new
    viol = constraint_violation(problem, xs, us)
    return MpcSolution(controls=us, states=xs, objective=float(J), violation=viol,
                       converged=bool(converged and viol < problem.viol_tol), iterations=it)


# --------------------------------------------------------------------------
# feasibility and diagnostics


@dataclass(frozen=True)
class FeasibilityReport:
    ok: bool
    violation: float
    next_state: np.ndarray
    state_violation: float
    input_violation: float
    path_violation: float


def feasibility_check(system, x, u, phi, t=0, tol=0.0):
    """Check ``h <= 0``, ``f(x, u; phi) in X`` and ``u in U`` for one step."""
    x = np.asarray(x, dtype=float).reshape(system.state_dim)
    u = np.asarray(u, dtype=float).reshape(system.input_dim)
    phi = np.asarray(phi, dtype=float).reshape(system.param_dim)
    nxt = system.dynamics(x, u, phi, t)
    sv = system.state_violation(nxt)
    uv = system.input_violation(u)
    hv = 0.0
    if system.path_constraint is not None:
        hv = max(0.0, float(np.max(system.path_constraint(x, u, phi, t))))
    worst = max(sv, uv, hv)
    return FeasibilityReport(worst <= tol, worst, nxt, sv, uv, hv)


def estimate_edpb(system, k, trials=8, seed=0, x_scale=None, delta_scale=None, solver_opts=None):
    """Empirical sensitivity of the first MPC action to each window offset.

    For ``j < k`` the parameter at offset ``j`` is perturbed by a random
    ``delta`` and the largest ``||du_0|| / ||delta||`` over the trials is
    kept. The table is returned monotone-enveloped (running maximum from
    the tail), so it is nonincreasing. Accepts :class:`~lac.lqc.LqcGains`
    for the linear case.
    """
    from .lqc import LqcGains, lqc_receding_action

    rng = np.random.default_rng(seed)
    table = np.zeros(k)
    if isinstance(system, LqcGains):
        gains = system
        n = gains.n
        for _ in range(trials):
            x = rng.standard_normal(n)
            base = rng.standard_normal((k, n))
            u0 = lqc_receding_action(gains, x, base)
            for j in range(k):
                delta = rng.standard_normal(n)
                pert = base.copy()
                pert[j] += delta
                du = lqc_receding_action(gains, x, pert) - u0
                table[j] = max(table[j], np.linalg.norm(du) / np.linalg.norm(delta))
        return _envelope(table)

    sys_ = system
    opts = dict(solver_opts or {})
    unc = sys_.uncertainty
    if x_scale is None:
        x_scale = 0.5 * float(np.min(sys_.state_box[1])) if sys_.state_box is not None else 1.0
    if delta_scale is None:
        delta_scale = 0.25 * unc.diameter
    for _ in range(trials):
        x = x_scale * rng.uniform(-1, 1, sys_.state_dim)
        base = np.array([unc.project(0.5 * unc.diameter * rng.uniform(-1, 1, sys_.param_dim)) for _ in range(k)])
        u0 = solve_mpc(MpcProblem(sys_, x, base, **opts)).action
        for j in range(k):
            delta = delta_scale * rng.uniform(-1, 1, sys_.param_dim)
            pert = base.copy()
            pert[j] = unc.project(pert[j] + delta)
            real = pert[j] - base[j]
            if np.linalg.norm(real) == 0:
                continue
            du = solve_mpc(MpcProblem(sys_, x, pert, **opts)).action - u0
            table[j] = max(table[j], np.linalg.norm(du) / np.linalg.norm(real))
    return _envelope(table)


def _envelope(table):
    return np.maximum.accumulate(table[::-1])[::-1]


@dataclass(frozen=True)
class RegularityDiagnostic:
    """Numeric stand-ins for the LICQ and second-order conditions."""

    jacobian_min_singular: float
    reduced_hessian_min_eig: float
    active_rows: int
    dynamics_rows: int


def regularity_probe(problem, solution, step=1e-5, active_tol=1e-6):
    """Smallest singular value of the active-constraint Jacobian and
    smallest eigenvalue of the reduced Hessian of the shooting Lagrangian.

    The full-space variables are ``(u_0..u_{w-1}, x_1..x_w)``; the
    constraints are the dynamics equalities plus any state-bound rows
    active at the solution. The Hessian is taken by central finite
    differences of the cost gradient; constraint curvature is left out,
    which is exact for linear dynamics. Advisory only.
    """
    sys_ = problem.system
    n, m, w = sys_.state_dim, sys_.input_dim, problem.window
    us, xs = solution.controls, solution.states
    nv = w * m + w * n

    def unpack(z):
        return z[: w * m].reshape(w, m), z[w * m:].reshape(w, n)

    def cost_grad(z):
        u, x = unpack(z)
        full_x = np.vstack([problem.x0, x])
        gu = np.zeros((w, m))
        gx = np.zeros((w, n))
        for j in range(w):
            cx, cu = sys_.stage_cost_grad(full_x[j], u[j], problem.params[j], problem.t0 + j)
            gu[j] = cu
            if j > 0:
                gx[j - 1] += cx
        gx[w - 1] += sys_.terminal_cost_grad(full_x[w], problem.params[-1])
        return np.concatenate([gu.ravel(), gx.ravel()])

    rows = []
    full_x = xs
    for j in range(w):
        fx, fu = sys_.dynamics_jac(full_x[j], us[j], problem.params[j], problem.t0 + j)
        block = np.zeros((n, nv))
        block[:, j * m:(j + 1) * m] = -fu
        block[:, w * m + j * n: w * m + (j + 1) * n] = np.eye(n)
        if j > 0:
            block[:, w * m + (j - 1) * n: w * m + j * n] = -fx
        rows.append(block)
    dyn_rows = w * n
    lo, hi = _bounds(problem)
    active = 0
    if lo is not None:
        for j in range(1, w + 1):
            for i in range(n):
                if abs(xs[j, i] - hi[i]) <= active_tol or abs(xs[j, i] - lo[i]) <= active_tol:
                    row = np.zeros((1, nv))
                    row[0, w * m + (j - 1) * n + i] = 1.0
                    rows.append(row)
                    active += 1
    J = np.vstack(rows)
    sv = np.linalg.svd(J, compute_uv=False)
    z0 = np.concatenate([us.ravel(), xs[1:].ravel()])
    Hs = np.zeros((nv, nv))
    for i in range(nv):
        e = np.zeros(nv)
        e[i] = step
        Hs[:, i] = (cost_grad(z0 + e) - cost_grad(z0 - e)) / (2 * step)
    Hs = 0.5 * (Hs + Hs.T)
    _, s, Vt = np.linalg.svd(J)
    rank = int(np.sum(s > 1e-12 * max(1.0, s[0])))
    Z = Vt[rank:].T
    red = Z.T @ Hs @ Z if Z.size else np.zeros((0, 0))
    min_eig = float(np.min(np.linalg.eigvalsh(red))) if red.size else np.inf
    return RegularityDiagnostic(float(sv[-1]), min_eig, active, dyn_rows)
