"""Plants, uncertainty sets and prediction streams.

A :class:`SystemModel` bundles the dynamics, costs, constraints and their
first derivatives (the trajectory optimizer differentiates through the
rollout by hand, so every system must supply Jacobians). Two concrete
systems are provided: the double-integrator tracking problem and the 1-D
robot arm.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

Array = np.ndarray


class RevealViolation(RuntimeError):
    """A policy tried to read a ground-truth parameter before it was revealed."""


# --------------------------------------------------------------------------
# uncertainty sets


@dataclass(frozen=True)
class Ball:
    """Euclidean ball centred at the origin."""

    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius

    def project(self, phi):
        phi = np.asarray(phi, dtype=float)
        nrm = np.linalg.norm(phi)
        if nrm <= self.radius:
            return phi.copy()
        return phi * (self.radius / nrm)

    def contains(self, phi, tol=1e-12) -> bool:
        return bool(np.linalg.norm(phi) <= self.radius + tol)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``lo <= phi <= hi`` containing the origin."""

    lo: Array
    hi: Array

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or np.any(lo > 0) or np.any(hi < 0):
            raise ValueError("box must contain the origin")
        if not np.linalg.norm(hi - lo) > 0:
            raise ValueError("box must have positive diameter")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    def project(self, phi):
        return np.clip(np.asarray(phi, dtype=float), self.lo, self.hi)

    def contains(self, phi, tol=1e-12) -> bool:
        phi = np.asarray(phi, dtype=float)
        return bool(np.all(phi >= self.lo - tol) and np.all(phi <= self.hi + tol))


def project_param(phi, uncertainty):
    """Euclidean projection of ``phi`` onto the uncertainty set."""
    return uncertainty.project(phi)


# --------------------------------------------------------------------------
# systems



@dataclass(frozen=True)
class LinearQuadratic:
    """Matrices of a linear system ``x+ = Ax + Bu + phi`` with quadratic cost."""

    A: Array
    B: Array
    Q: Array
    R: Array


@dataclass(frozen=True)
class SystemModel:
    """A parameterised discrete-time plant.

    ``dynamics(x, u, phi, t)`` returns the next state; ``dynamics_jac``
    returns ``(df/dx, df/du)``. Costs follow the same pattern. The path
    constraint ``h`` is feasible iff every component is ``<= 0``; it may be
    omitted. Boxes are ``(lo, hi)`` pairs or ``None`` for unconstrained.
    """

    name: str
    state_dim: int
    input_dim: int
    param_dim: int
    horizon: int
    dynamics: Callable
    dynamics_jac: Callable
    stage_cost: Callable
    stage_cost_grad: Callable
    terminal_cost: Callable
    terminal_cost_grad: Callable
    uncertainty: object
    state_box: Optional[tuple] = None
    input_box: Optional[tuple] = None
    path_constraint: Optional[Callable] = None
    path_constraint_jac: Optional[Callable] = None
    linear: Optional[LinearQuadratic] = None
    params: dict = field(default_factory=dict)

    def with_uncertainty(self, uncertainty) -> "SystemModel":
        return replace(self, uncertainty=uncertainty)

    def clamp_input(self, u):
        if self.input_box is None:
            return np.asarray(u, dtype=float)
        return np.clip(u, self.input_box[0], self.input_box[1])

    def state_violation(self, x) -> float:
        if self.state_box is None:
            return 0.0
        lo, hi = self.state_box
        return float(max(0.0, np.max(lo - x), np.max(x - hi)))

    def input_violation(self, u) -> float:
        if self.input_box is None:
            return 0.0
        lo, hi = self.input_box
        return float(max(0.0, np.max(lo - u), np.max(u - hi)))


def hypotrochoid(t):
    """Reference point(s) ``y_t`` of the tracking experiment."""
    t = np.asarray(t, dtype=float)
    return np.stack(
        [np.cos(t / 10) / 2 + np.cos(t / 2), np.sin(t / 10) / 2 + np.sin(t / 2)], axis=-1
    )


def tracking_truth(reference):
    """Disturbances ``[y_t - y_{t+1}; 0; 0]`` for a reference of length T+1."""
    reference = np.asarray(reference, dtype=float)
    diff = reference[:-1] - reference[1:]
    return np.hstack([diff, np.zeros_like(diff)])


def make_lqc_tracking_system(c1=0.2, u_max=10.0, T=200, uncertainty=None, reference=None):
    """Double-integrator tracking in error coordinates.

    Returns ``(system, truth)`` where ``truth[t] = [y_t - y_{t+1}; 0; 0]``.
    ``u_max=None`` gives an unconstrained input. ``reference`` overrides
    the hypotrochoid and must have ``T + 1`` rows.
    """
    from .lqc import solve_dare

    if T <= 0:
        raise ValueError("T must be positive")
    if u_max is not None and not u_max > 0:
        raise ValueError("u_max must be positive")
    I2, Z2 = np.eye(2), np.zeros((2, 2))
    A = np.block([[I2, c1 * I2], [Z2, I2]])
    B = np.vstack([Z2, c1 * I2])
    Q = np.diag([1.0, 1.0, 0.0, 0.0])
    R = np.eye(2)
    if reference is None:
        reference = hypotrochoid(np.arange(T + 1))
    truth = tracking_truth(reference)
    if truth.shape[0] != T:
        raise ValueError("reference must have T + 1 rows")
    if uncertainty is None:
        uncertainty = Ball(max(float(np.max(np.linalg.norm(truth, axis=1))), 1e-12))
    P = solve_dare(A, B, Q, R).P
    input_box = None if u_max is None else (-u_max * np.ones(2), u_max * np.ones(2))
    system = linear_quadratic_system(
        A, B, Q, R, P, T, uncertainty, input_box=input_box, name="lqc_tracking",
        params={"c1": c1, "u_max": u_max},
    )
    return system, truth


def linear_quadratic_system(A, B, Q, R, P, T, uncertainty, input_box=None, name="lqc", params=None):
    """Wrap ``x+ = Ax + Bu + phi`` with cost ``x'Qx + u'Ru`` and terminal ``x'Px``."""
    A, B, Q, R, P = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, Q, R, P))
    n, m = B.shape

    def dynamics(x, u, phi, t):
        return A @ x + B @ u + phi

    def dynamics_jac(x, u, phi, t):
        return A, B

    def stage_cost(x, u, phi, t):
        return float(x @ Q @ x + u @ R @ u)

    def stage_cost_grad(x, u, phi, t):
        return 2.0 * Q @ x, 2.0 * R @ u

    def terminal_cost(x, phi):
        return float(x @ P @ x)

    def terminal_cost_grad(x, phi):
        return 2.0 * P @ x

    return SystemModel(
        name=name, state_dim=n, input_dim=m, param_dim=n, horizon=T,
        dynamics=dynamics, dynamics_jac=dynamics_jac,
        stage_cost=stage_cost, stage_cost_grad=stage_cost_grad,
        terminal_cost=terminal_cost, terminal_cost_grad=terminal_cost_grad,
        uncertainty=uncertainty, input_box=input_box,
        linear=LinearQuadratic(A, B, Q, R), params=dict(params or {}),
    )


def make_robot_arm_system(c2=0.5, c3=0.2, c4=0.1, T=200, x_max=0.2, u_max=1e3, phi_max=0.05):
    """1-D arm ``x+ = x + c2 sin x + c3 u exp(-|x|) + phi``.

    Stage cost ``x^2 + c4 u^2``, terminal cost ``x^2``. The uncertainty set
    is the interval ``[-phi_max, phi_max]``.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    if not (x_max > 0 and u_max > 0 and phi_max > 0 and c4 >= 0):
        raise ValueError("bounds must be positive and c4 nonnegative")

    def dynamics(x, u, phi, t):
        return x + c2 * np.sin(x) + c3 * u * np.exp(-np.abs(x)) + phi

    def dynamics_jac(x, u, phi, t):
        e = np.exp(-np.abs(x))
        fx = 1.0 + c2 * np.cos(x) - c3 * u * np.sign(x) * e
        return fx.reshape(1, 1), (c3 * e).reshape(1, 1)

    def stage_cost(x, u, phi, t):
        return float(x @ x + c4 * (u @ u))

    def stage_cost_grad(x, u, phi, t):
        return 2.0 * x, 2.0 * c4 * u

    def terminal_cost(x, phi):
        return float(x @ x)

    def terminal_cost_grad(x, phi):
        return 2.0 * x

    one = np.ones(1)
    return SystemModel(
        name="robot_arm", state_dim=1, input_dim=1, param_dim=1, horizon=T,
        dynamics=dynamics, dynamics_jac=dynamics_jac,
        stage_cost=stage_cost, stage_cost_grad=stage_cost_grad,
        terminal_cost=terminal_cost, terminal_cost_grad=terminal_cost_grad,
        uncertainty=Box(-phi_max * one, phi_max * one),
        state_box=(-x_max * one, x_max * one), input_box=(-u_max * one, u_max * one),
        params={"c2": c2, "c3": c3, "c4": c4, "x_max": x_max, "u_max": u_max, "phi_max": phi_max},
    )


def arm_truth(T, amplitude=0.04):
    """Default arm disturbance: the first hypotrochoid coordinate, rescaled."""
    y = hypotrochoid(np.arange(T))[:, 0] / 1.5
    return (amplitude * y).reshape(T, 1)


# --------------------------------------------------------------------------
# prediction streams


def window_end(t, k, T):
    """Last index ``min(t + k - 1, T - 1)`` covered by the window issued at t."""
    return min(t + k - 1, T - 1)


@dataclass(frozen=True)
class PredictionBundle:
    """Ground truth plus receding-horizon predictions and nominals.

    ``predictions[t]`` and ``nominals[t]`` are arrays of shape
    ``(window_end(t) - t + 1, d)`` covering ``phi_{t:tbar|t}``.
    """

    truth: Array
    predictions: tuple
    nominals: tuple
    k: int

    def __post_init__(self):
        truth = np.asarray(self.truth, dtype=float)
        if truth.ndim == 1:
            truth = truth[:, None]
        object.__setattr__(self, "truth", truth)
        if self.k < 1:
            raise ValueError("window must be >= 1")
        T = truth.shape[0]
        if len(self.predictions) != T or len(self.nominals) != T:
            raise ValueError("one prediction window per time step is required")
        for t in range(T):
            w = window_end(t, self.k, T) - t + 1
            if self.predictions[t].shape != (w, truth.shape[1]) or self.nominals[t].shape != (w, truth.shape[1]):
                raise ValueError(f"window {t} has the wrong shape")

    @property
    def T(self) -> int:
        return self.truth.shape[0]

    def errors(self, t):
        """``(eps, eps_bar)`` for the window issued at t (needs hindsight)."""
        w = self.predictions[t].shape[0]
        true = self.truth[t:t + w]
        return true - self.predictions[t], true - self.nominals[t]

    def project(self, uncertainty) -> "PredictionBundle":
        preds = tuple(np.array([uncertainty.project(p) for p in win]) for win in self.predictions)
        noms = tuple(np.array([uncertainty.project(p) for p in win]) for win in self.nominals)
        return replace(self, predictions=preds, nominals=noms)

    def max_norm(self) -> float:
        norms = [np.max(np.linalg.norm(self.truth, axis=1))]
        for win in self.predictions + self.nominals:
            norms.append(np.max(np.linalg.norm(win, axis=1)))
        return float(max(norms))


def make_bundle(truth, predictions, nominals=None, k=None):
    truth = np.asarray(truth, dtype=float)
    if truth.ndim == 1:
        truth = truth[:, None]
    predictions = tuple(np.asarray(p, dtype=float) for p in predictions)
    if k is None:
        k = max(p.shape[0] for p in predictions)
    if nominals is None:
        nominals = tuple(np.zeros_like(p) for p in predictions)
    else:
        nominals = tuple(np.asarray(p, dtype=float) for p in nominals)
    return PredictionBundle(truth, predictions, nominals, k)


def perfect_bundle(truth, k, nominals=None):
    """Bundle whose predictions equal the truth."""
    truth = np.asarray(truth, dtype=float)
    if truth.ndim == 1:
        truth = truth[:, None]
    T = truth.shape[0]
    preds = [truth[t:window_end(t, k, T) + 1].copy() for t in range(T)]
    return make_bundle(truth, preds, nominals, k)


def ingest(system, bundle, gamma_policy="auto"):
    """Fix the uncertainty set for a scenario and project the bundle into it.

    ``"auto"`` uses a ball whose diameter is twice the largest norm seen
    in the truth or predictions; ``"system"`` keeps the system's own set.
    """
    if gamma_policy == "auto":
        uncertainty = Ball(max(bundle.max_norm(), 1e-12))
        system = system.with_uncertainty(uncertainty)
    elif gamma_policy != "system":
        raise ValueError(f"unknown gamma policy {gamma_policy!r}")
    if not all(system.uncertainty.contains(p, tol=1e-9) for p in bundle.truth):
        raise ValueError("ground truth lies outside the uncertainty set")
    return system, bundle.project(system.uncertainty)


class RevealedTruth:
    """Read-only view of the ground truth available at step ``t``.

    Indexing at or after ``t`` raises :class:`RevealViolation`.
    """

    def __init__(self, truth, t):
        self._truth = truth
        self.t = t

    def __len__(self):
        return self.t

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            wanted = range(*idx.indices(len(self._truth)))
            if any(i >= self.t for i in wanted):
                raise RevealViolation(f"truth up to {max(wanted)} requested at step {self.t}")
            return self._truth[idx].copy()
        i = int(idx)
        if i < 0 or i >= self.t:
            raise RevealViolation(f"truth index {i} requested at step {self.t}")
        return self._truth[i].copy()


def reveal_time(t):
    """Truth for index t becomes visible at step t + 1."""
    return t + 1


def write_stream_csv(path, bundle: PredictionBundle):
    """Export truth/prediction/nominal streams as ``t, tau, kind, phi_0..``."""
    d = bundle.truth.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "tau", "kind"] + [f"phi_{i}" for i in range(d)])
        for t in range(bundle.T):
            w.writerow([t, t, "truth"] + [repr(float(v)) for v in bundle.truth[t]])
        for kind, wins in (("pred", bundle.predictions), ("nominal", bundle.nominals)):
            for t, win in enumerate(wins):
                for j, row in enumerate(win):
                    w.writerow([t, t + j, kind] + [repr(float(v)) for v in row])


def read_stream_csv(path, k) -> PredictionBundle:
    truth, preds, noms = {}, {}, {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            t = int(row["t"])
            vals = [float(v) for key, v in row.items() if key.startswith("phi_")]
            if row["kind"] == "truth":
                truth[t] = vals
            else:
                (preds if row["kind"] == "pred" else noms).setdefault(t, []).append(vals)
    T = len(truth)
    return make_bundle(
        np.array([truth[t] for t in range(T)]),
        [np.array(preds[t]) for t in range(T)],
        [np.array(noms[t]) for t in range(T)],
        k,
    )


def stack_windows(windows: Sequence[Array]) -> Array:
    return np.concatenate([np.ravel(w) for w in windows])
