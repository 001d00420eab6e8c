"""Closed forms for linear dynamics with quadratic cost.

Riccati solution, receding-horizon action with a disturbance
feed-forward, the clairvoyant full-horizon optimum, the exact regret
decomposition and the constants that enter the competitive-ratio bounds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NonConvergenceError(RuntimeError):
    pass


class UnstableClosedLoopError(ValueError):
    pass


@dataclass(frozen=True)
class LqcGains:
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    K: np.ndarray
    F: np.ndarray
    H: np.ndarray
    # (R + B'PB)^{-1} B', maps a costate-like feed-forward to an input
    S: np.ndarray
    C_F: float
    rho_F: float
    riccati_residual: float
    iterations: int = 0

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


def riccati_map(P, A, B, Q, R):
    BtP = B.T @ P
    return Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + BtP @ B, BtP @ A)


def solve_dare(A, B, Q, R, horizon=200, tol=1e-12, max_iter=100_000):
    """Solve the discrete algebraic Riccati equation by fixed-point iteration.

    Iterates the Riccati map from ``P = Q`` until successive iterates differ
    by less than ``tol * max(1, ||P||_F)`` in Frobenius norm. ``horizon``
    is the run length over which the decay constants are fitted.

    Raises
    ------
    ValueError
        If ``Q`` or ``R`` is asymmetric beyond 1e-8.
    NonConvergenceError
        If the iteration cap is reached.
    """
    A, B, Q, R = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, Q, R))
    for name, M in (("Q", Q), ("R", R)):
        if np.max(np.abs(M - M.T)) > 1e-8:
            raise ValueError(f"{name} is not symmetric")
    P = Q.copy()
    for it in range(1, max_iter + 1):
        P_next = riccati_map(P, A, B, Q, R)
        P_next = 0.5 * (P_next + P_next.T)
        diff = np.linalg.norm(P_next - P)
        P = P_next
        if not np.all(np.isfinite(P)):
            raise NonConvergenceError("Riccati iteration diverged")
        if diff < tol * max(1.0, np.linalg.norm(P)):
            break
    else:
        raise NonConvergenceError(f"no convergence after {max_iter} iterations")
    return gains_from_P(A, B, Q, R, P, horizon=horizon, iterations=it)


def gains_from_P(A, B, Q, R, P, horizon=200, iterations=0):
    M = R + B.T @ P @ B
    S = np.linalg.solve(M, B.T)
    K = S @ P @ A
    F = A - B @ K
    residual = float(np.linalg.norm(P - riccati_map(P, A, B, Q, R)))
    C_F, rho_F = decay_constants(F, horizon)
    return LqcGains(A, B, Q, R, P, K, F, B @ S, S, C_F, rho_F, residual, iterations)


def decay_constants(F, T):
    """Constants with ``||F^t|| <= C_F rho_F^t`` for every ``0 <= t <= T``.

    ``rho_F`` is the midpoint between the spectral radius and one; ``C_F``
    is the smallest constant making the inequality hold on the horizon.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    radius = float(np.max(np.abs(np.linalg.eigvals(F))))
    if radius >= 1.0:
        raise UnstableClosedLoopError(f"spectral radius {radius:.6g} >= 1")
    rho = 0.5 * (1.0 + radius)
    C, Ft = 1.0, np.eye(F.shape[0])
    for t in range(1, T + 1):
        Ft = Ft @ F
        scale = rho**t
        if scale < 1e-280:
            # ||F^t|| decays strictly faster than rho^t; the tail cannot raise C
            break
        C = max(C, np.linalg.norm(Ft, 2) / scale)
    return float(C), rho


def feedforward(gains, params):
    """``sum_j (F')^j P params[j]`` by backward (Horner) recursion."""
    params = np.atleast_2d(params)
    eta = np.zeros(gains.n)
    FT = gains.F.T
    for phi in params[::-1]:
        eta = gains.P @ phi + FT @ eta
    return eta


def lqc_receding_action(gains, x, params, input_box=None):
    """Receding-horizon input ``-K x - S sum_j (F')^j P params[j]``.

    ``params`` holds the (already combined) disturbances of the window.
    With an ``input_box`` the result is clamped componentwise.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (gains.n,):
        raise ValueError("state dimension mismatch")
    params = np.atleast_2d(np.asarray(params, dtype=float))
    if params.shape[1] != gains.n or params.shape[0] < 1:
        raise ValueError("parameter window dimension mismatch")
    u = -gains.K @ x - gains.S @ feedforward(gains, params)
    if input_box is not None:
        u = np.clip(u, input_box[0], input_box[1])
    return u


def clairvoyant_feedforward(gains, truth):
    """``eta*_t = sum_{tau >= t} (F')^{tau-t} P phi*_tau`` for every t."""
    truth = np.atleast_2d(truth)
    T = truth.shape[0]
    etas = np.zeros((T, gains.n))
    eta = np.zeros(gains.n)
    for t in range(T - 1, -1, -1):
        eta = gains.P @ truth[t] + gains.F.T @ eta
        etas[t] = eta
    return etas


def quadratic_cost(gains, xs, us):
    """``sum_t x'Qx + u'Ru`` plus the terminal ``x_T' P x_T``."""
    Q, R, P = gains.Q, gains.R, gains.P
    stage = np.einsum("ti,ij,tj->", xs[:-1], Q, xs[:-1]) + np.einsum("ti,ij,tj->", us, R, us)
    return float(stage + xs[-1] @ P @ xs[-1])


def clairvoyant_optimal_lqc(gains, x0, truth):
    """Full-horizon optimum with perfect knowledge; returns ``(xs, us, J*)``."""
    truth = np.atleast_2d(truth)
    T = truth.shape[0]
    etas = clairvoyant_feedforward(gains, truth)
    xs = np.zeros((T + 1, gains.n))
    us = np.zeros((T, gains.m))
    xs[0] = x0
    for t in range(T):
        us[t] = -gains.K @ xs[t] - gains.S @ etas[t]
        xs[t + 1] = gains.A @ xs[t] + gains.B @ us[t] + truth[t]
    return xs, us, quadratic_cost(gains, xs, us)


@dataclass(frozen=True)
class RegretWitness:
    psi: np.ndarray
    contributions: np.ndarray

    @property
    def total(self) -> float:
        return float(np.sum(self.contributions))


def regret_witness(gains, used_params, truth):
    """Hindsight witness for a policy whose step-t input used ``used_params[t]``.

    ``psi_t = sum_{window} (F')^j P (used - phi*) - sum_{tail} (F')^j P phi*``,
    i.e. the windowed feed-forward minus the clairvoyant one.
    """
    etas = clairvoyant_feedforward(gains, truth)
    psi = np.array([feedforward(gains, p) for p in used_params]) - etas
    contrib = np.einsum("ti,ij,tj->t", psi, gains.H, psi)
    return RegretWitness(psi, contrib)


def simulate_lqc(gains, x0, used_params, truth, input_box=None):
    """Roll out ``u_t = lqc_receding_action(x_t, used_params[t])`` on the truth."""
    truth = np.atleast_2d(truth)
    T = truth.shape[0]
    xs = np.zeros((T + 1, gains.n))
    us = np.zeros((T, gains.m))
    xs[0] = x0
    for t in range(T):
        us[t] = lqc_receding_action(gains, xs[t], used_params[t], input_box)
        xs[t + 1] = gains.A @ xs[t] + gains.B @ us[t] + truth[t]
    return xs, us, quadratic_cost(gains, xs, us)


def regret_identity_check(gains, lam, bundle, x0):
    """Compare ``J(pi_lam) - J*`` against the witness sum.

    ``lam`` may be a scalar or one value per step. Inputs are unconstrained.
    Returns ``(witness, regret, relative_residual)``.
    """
    T = bundle.T
    lams = np.broadcast_to(np.asarray(lam, dtype=float), (T,))
    used = [lams[t] * bundle.predictions[t] + (1 - lams[t]) * bundle.nominals[t] for t in range(T)]
    _, _, J = simulate_lqc(gains, x0, used, bundle.truth)
    _, _, J_star = clairvoyant_optimal_lqc(gains, x0, bundle.truth)
    witness = regret_witness(gains, used, bundle.truth)
    regret = J - J_star
    scale = max(abs(regret), abs(witness.total), 1e-300)
    return witness, regret, abs(regret - witness.total) / scale


def j_star_lower_bound(gains, truth):
    """``C_0 sum_t (sum_{tau >= t} rho_F^{tau-t} ||phi*_tau||)^2``."""
    norms = np.linalg.norm(np.atleast_2d(truth), axis=1)
    acc, total = 0.0, 0.0
    for nrm in norms[::-1]:
        acc = nrm + gains.rho_F * acc
        total += acc**2
    c0 = (1 - gains.rho_F) ** 2 / 2 * min(
        np.min(np.linalg.eigvalsh(gains.P)),
        np.min(np.linalg.eigvalsh(gains.R)) / np.linalg.norm(gains.B, 2),
        np.min(np.linalg.eigvalsh(gains.Q)) / max(2.0, np.linalg.norm(gains.A, 2)),
    )
    return float(c0 * total)


def adversity(truth) -> int:
    """Number of steps with a nonzero disturbance (exact zero test)."""
    return int(np.count_nonzero(np.any(np.atleast_2d(truth) != 0, axis=1)))


def edpb_weights(gains, k):
    """``rho(j) = C_F ||S|| ||P|| rho_F^j`` for ``j < k``."""
    scale = gains.C_F * np.linalg.norm(gains.S, 2) * np.linalg.norm(gains.P, 2)
    return scale * gains.rho_F ** np.arange(k)


def upper_bound_constant(gains):
    """Prefactor ``2 C_F^2 ||H|| ||P||^2 / (1 - rho_F)^2`` of the LAC upper bound."""
    return (
        2 * gains.C_F**2 * np.linalg.norm(gains.H, 2) * np.linalg.norm(gains.P, 2) ** 2
        / (1 - gains.rho_F) ** 2
    )


def lower_bound_constant(gains):
    """``sigma_min(B)^2 sigma_min(P)^2 / lambda_max(R + B'PB)``."""
    sB = np.linalg.svd(gains.B, compute_uv=False)[-1]
    sP = np.linalg.svd(gains.P, compute_uv=False)[-1]
    top = np.max(np.linalg.eigvalsh(gains.R + gains.B.T @ gains.P @ gains.B))
    return float(sB**2 * sP**2 / top)


def write_gains(path, gains):
    """Flat ``name,i,j,value`` dump of the gain matrices and constants."""
    with open(path, "w") as fh:
        fh.write("name,i,j,value\n")
        for name in ("A", "B", "Q", "R", "P", "K", "F", "H"):
            M = getattr(gains, name)
            for (i, j), v in np.ndenumerate(M):
                fh.write(f"{name},{i},{j},{v:.17g}\n")
        for name in ("C_F", "rho_F", "riccati_residual"):
            fh.write(f"{name},0,0,{getattr(gains, name):.17g}\n")


def write_witness(path, witness):
    with open(path, "w") as fh:
        d = witness.psi.shape[1]
        fh.write("t," + ",".join(f"psi_{i}" for i in range(d)) + ",contribution\n")
        for t, (row, c) in enumerate(zip(witness.psi, witness.contributions)):
            fh.write(f"{t}," + ",".join(f"{v:.17g}" for v in row) + f",{c:.17g}\n")
