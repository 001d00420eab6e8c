"""Controllers compared in the experiments.

Every policy sees an :class:`Observation`: the current state, the window
of predictions and nominals issued now, earlier windows, and the ground
truth revealed so far. The truth accessor refuses indices that have not
been revealed yet.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .confidence import DelayedConfidenceLearner, FTLSelfTuning, SurrogateLoss
from .lqc import lqc_receding_action
from .model import RevealedTruth, RevealViolation
from .trajopt import MpcProblem, solve_mpc


@dataclass
class Observation:
    t: int
    x: np.ndarray
    predictions: np.ndarray
    nominals: np.ndarray
    revealed: RevealedTruth
    _bundle: object = None

    def window(self, s):
        """Prediction and nominal windows issued at an earlier step ``s``."""
        if s > self.t:
            raise RevealViolation(f"window {s} requested at step {self.t}")
        return self._bundle.predictions[s], self._bundle.nominals[s]


def observe(bundle, t, x):
    return Observation(t, np.asarray(x, dtype=float), bundle.predictions[t], bundle.nominals[t],
                       RevealedTruth(bundle.truth, t), bundle)


# --------------------------------------------------------------------------
# actuation backends


class ClosedFormBackend:
    """Linear-quadratic receding-horizon action, clamped to the input box."""

    def __init__(self, gains, input_box=None):
        self.gains = gains
        self.input_box = input_box
        self.failures = 0

    def reset(self):
        self.failures = 0

    def act(self, t, x, params):
        return lqc_receding_action(self.gains, x, params, self.input_box)


class MpcBackend:
    """Nonlinear MPC through :func:`~lac.trajopt.solve_mpc` with warm starts."""

    def __init__(self, system, state_margin=0.0, seed=0, **solver_opts):
        self.system = system
        self.state_margin = state_margin
        self.seed = seed
        self.solver_opts = solver_opts
        self.reset()

    def reset(self):
        self.previous = None
        self.failures = 0
        self.last = None

    def act(self, t, x, params):
        problem = MpcProblem(
            self.system, x, params, t0=t, state_margin=self.state_margin,
            warm_start=self.previous, seed=self.seed * 100_003 + t, **self.solver_opts,
        )
        sol = solve_mpc(problem)
        if not sol.converged:
            self.failures += 1
        self.previous = sol.controls
        self.last = sol
        return sol.action


def lambda_confident_action(backend, t, x, predictions, nominals, lam):
    """Act on ``lam * predictions + (1 - lam) * nominals``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("confidence must lie in [0, 1]")
    params = lam * np.asarray(predictions) + (1.0 - lam) * np.asarray(nominals)
    return backend.act(t, x, params)


# --------------------------------------------------------------------------
# policies


class Policy:
    name = "policy"

    def __init__(self, backend):
        self.backend = backend
        self.lambdas = []

    def reset(self):
        self.lambdas = []
        self.backend.reset()

    def confidence(self, obs) -> float:
        raise NotImplementedError

    def act(self, obs):
        lam = self.confidence(obs)
        self.lambdas.append(lam)
        return lambda_confident_action(self.backend, obs.t, obs.x, obs.predictions, obs.nominals, lam)


class FixedLambda(Policy):
    """Constant confidence: 1 is predictive MPC, 0 is nominal MPC."""

    def __init__(self, backend, lam, name=None):
        super().__init__(backend)
        self.lam = float(lam)
        self.name = name or f"Fixed({self.lam:g})"

    def confidence(self, obs):
        return self.lam


def predictive_mpc(backend):
    return FixedLambda(backend, 1.0, "P-MPC")


def nominal_mpc(backend, name="N-MPC"):
    return FixedLambda(backend, 0.0, name)


class LAC(Policy):
    """Learning-augmented control: λ-confident MPC with delayed confidence learning."""

    name = "LAC"

    def __init__(self, backend, k, rho, beta=0.05, init=0.5, scale=1.0):
        super().__init__(backend)
        self.k = k
        self.rho = np.asarray(rho, dtype=float)
        # errors enter the surrogate loss in units of ``scale``
        self.scale = float(scale)
        self.learner = DelayedConfidenceLearner(k, beta, init)

    def reset(self):
        super().reset()
        self.learner.reset()

    def confidence(self, obs):
        t, loss = obs.t, None
        if t >= self.k:
            s = t - self.k
            preds, noms = obs.window(s)
            truth = obs.revealed[s:s + len(preds)]
            loss = SurrogateLoss(self.rho, (truth - preds) / self.scale, (truth - noms) / self.scale, index=s)
        return self.learner.step(t, loss)


class SelfTuning(Policy):
    """Follow-the-leader confidence over every revealed (prediction, truth) pair."""

    name = "SelfTuning"

    def __init__(self, backend, init=0.5):
        super().__init__(backend)
        self.ftl = FTLSelfTuning(init)
        self.k = None

    def reset(self):
        super().reset()
        self.ftl.reset()

    def confidence(self, obs):
        t = obs.t
        if t >= 1:
            tau = t - 1
            phi = obs.revealed[tau]
            s = tau
            while s >= 0:
                preds, noms = obs.window(s)
                j = tau - s
                if j >= len(preds):
                    break
                self.ftl.observe(phi - preds[j], phi - noms[j])
                s -= 1
        return self.ftl.current()


_FIXED = re.compile(r"^fixed\(\s*([0-9.eE+-]+)\s*\)$", re.IGNORECASE)


def make_policy(kind, backend, k=5, rho=None, beta=0.05, init=0.5, selftuning_backend=None, scale=1.0):
    """Build a policy from its config string."""
    key = kind.strip()
    low = key.lower()
    if low == "lac":
        return LAC(backend, k, np.ones(k) if rho is None else rho, beta, init, scale)
    if low in ("p-mpc", "mpc"):
        return predictive_mpc(backend)
    if low in ("n-mpc", "lqr"):
        return nominal_mpc(backend, "LQR" if low == "lqr" else "N-MPC")
    if low in ("selftuning", "self-tuning"):
        return SelfTuning(selftuning_backend or backend, init)
    m = _FIXED.match(key)
    if m:
        return FixedLambda(backend, float(m.group(1)))
    raise ValueError(f"unknown policy kind {kind!r}")
