"""Online learning of the confidence parameter.

The per-step surrogate loss is the squared ρ-weighted sum of the norms of
the λ-combined prediction/nominal errors over one window. Because the
window issued at ``t`` is only fully observed at ``t + k``, the learner
updates with a delay of ``k`` steps, which amounts to ``k`` interleaved
projected-gradient runs on the residue classes ``t mod k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class OutOfOrderFeedback(ValueError):
    pass


@dataclass(frozen=True)
class SurrogateLoss:
    """Loss of the window issued at ``index``.

    ``eps[j] = phi*_{t+j} - phi_{t+j|t}`` and ``eps_bar[j] = phi*_{t+j} - kappa_{t+j|t}``.
    """

    rho: np.ndarray
    eps: np.ndarray
    eps_bar: np.ndarray
    index: int = 0

    def __post_init__(self):
        eps = np.atleast_2d(np.asarray(self.eps, dtype=float))
        eps_bar = np.atleast_2d(np.asarray(self.eps_bar, dtype=float))
        if eps.shape != eps_bar.shape:
            raise ValueError("eps and eps_bar must have the same shape")
        rho = np.asarray(self.rho, dtype=float)
        if rho.shape[0] < eps.shape[0] or np.any(rho < 0):
            raise ValueError("need one nonnegative weight per window offset")
        object.__setattr__(self, "eps", eps)
        object.__setattr__(self, "eps_bar", eps_bar)
        object.__setattr__(self, "rho", rho[: eps.shape[0]])

    def combined(self, lam):
        return self.eps_bar + lam * (self.eps - self.eps_bar)

    def __call__(self, lam):
        return xi_t(self, lam)


def xi_t(loss: SurrogateLoss, lam: float) -> float:
    """``(sum_j rho_j ||lam eps_j + (1 - lam) eps_bar_j||)^2``."""
    norms = np.linalg.norm(loss.combined(lam), axis=1)
    return float(np.dot(loss.rho, norms)) ** 2


def xi_grad(loss: SurrogateLoss, lam: float) -> float:
    """Derivative of :func:`xi_t` in ``lam``; zero-norm terms contribute 0."""
    v = loss.combined(lam)
    diff = loss.eps - loss.eps_bar
    norms = np.linalg.norm(v, axis=1)
    s = float(np.dot(loss.rho, norms))
    nz = norms > 0
    inner = np.einsum("ij,ij->i", v[nz], diff[nz]) / norms[nz]
    return 2.0 * s * float(np.dot(loss.rho[nz], inner))


def window_losses(bundle, rho, scale=1.0):
    """Hindsight surrogate losses for every window of a bundle."""
    out = []
    for t in range(bundle.T):
        eps, eps_bar = bundle.errors(t)
        out.append(SurrogateLoss(rho, eps / scale, eps_bar / scale, index=t))
    return out


class DelayedConfidenceLearner:
    """Delayed projected gradient on ``[0, 1]``.

    For ``t < k`` the initial value is used. Afterwards
    ``lam_t = clip(lam_{t-k} - beta * xi_grad(loss_{t-k}, lam_{t-k}))``,
    with the loss of the window issued at ``t - k`` (the most recent one
    that is fully revealed). ``beta`` may be a callable of ``t``.
    """

    def __init__(self, k, beta=0.05, init=0.5):
        if k < 1:
            raise ValueError("window must be >= 1")
        if not 0.0 <= init <= 1.0:
            raise ValueError("initial confidence must lie in [0, 1]")
        self.k = k
        self.beta = beta
        self.init = init
        self.reset()

    def reset(self):
        self.lambdas = []
        self.grads = []
        self.used_index = []
        self.consumed = -1

    def _step_size(self, t):
        return self.beta(t) if callable(self.beta) else self.beta

    def step(self, t, loss=None):
        """Return ``lam_t``; ``loss`` is required from ``t = k`` onwards."""
        if t != len(self.lambdas):
            raise OutOfOrderFeedback(f"expected step {len(self.lambdas)}, got {t}")
        if t < self.k:
            lam, grad, idx = self.init, 0.0, None
        else:
            if loss is None:
                raise ValueError(f"step {t} needs the loss of window {t - self.k}")
            if loss.index != t - self.k:
                raise OutOfOrderFeedback(f"step {t} received loss {loss.index}, expected {t - self.k}")
            prev = self.lambdas[t - self.k]
            grad = xi_grad(loss, prev)
            lam = min(1.0, max(0.0, prev - self._step_size(t) * grad))
            idx = self.consumed = loss.index
        self.lambdas.append(lam)
        self.grads.append(grad)
        self.used_index.append(idx)
        return lam


def dcl_step(state: DelayedConfidenceLearner, t, loss=None):
    return state.step(t, loss)


def run_dcl(losses, k, beta=0.05, init=0.5):
    """Feed hindsight losses through the delayed learner; returns the λ trajectory."""
    learner = DelayedConfidenceLearner(k, beta, init)
    for t in range(len(losses)):
        learner.step(t, losses[t - k] if t >= k else None)
    return np.array(learner.lambdas)


def theory_step_size(grad_bound, T, k):
    """``1 / (2 G sqrt(T/k + 1))``, the per-subroutine tuning behind the regret bound."""
    return 1.0 / (2.0 * grad_bound * math.sqrt(T / k + 1))


class FTLSelfTuning:
    """Follow-the-leader confidence over all revealed error pairs.

    Minimises ``sum ||lam eps + (1 - lam) eps_bar||^2`` over the revealed
    pairs, in closed form, and clips to ``[0, 1]``.
    """

    def __init__(self, init=0.5):
        self.init = init
        self.reset()

    def reset(self):
        self.num = 0.0
        self.den = 0.0
        self.value = self.init
        self.lambdas = []

    def observe(self, eps, eps_bar):
        eps = np.atleast_2d(eps)
        eps_bar = np.atleast_2d(eps_bar)
        diff = eps_bar - eps
        self.num += float(np.sum(eps_bar * diff))
        self.den += float(np.sum(diff * diff))

    def current(self):
        if self.den > 0:
            self.value = min(1.0, max(0.0, self.num / self.den))
        return self.value


def ftl_self_tuning_step(eps_pairs, eps_bar_pairs, previous=0.5):
    """Stateless form of :class:`FTLSelfTuning` on a full history."""
    ftl = FTLSelfTuning(previous)
    for e, eb in zip(eps_pairs, eps_bar_pairs):
        ftl.observe(e, eb)
    return ftl.current()


def golden_section(f, a=0.0, b=1.0, tol=1e-6):
    """Minimise a unimodal ``f`` on ``[a, b]``; endpoints are also compared."""
    invphi = (math.sqrt(5) - 1) / 2
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    cands = [(f(0.0), 0.0), (f(1.0), 1.0), (f(0.5 * (a + b)), 0.5 * (a + b))]
    val, x = min(cands)
    return x, val


def cumulative_xi(losses, lam):
    return sum(xi_t(loss, lam) for loss in losses)


def lambda_star(losses, tol=1e-6):
    """Best fixed confidence in hindsight: ``(lam*, sum_t xi_t(lam*))``."""
    return golden_section(lambda lam: cumulative_xi(losses, lam), 0.0, 1.0, tol)


def varpi_gram(eps, b, with_flag=False):
    """``(||e||^2 ||b||^2 - <e, b>^2) / ||e - b||^2`` for stacked vectors.

    This is ``min_lam ||lam e + (1 - lam) b||^2`` over the real line. When
    ``e == b`` exactly the value is defined as 0 and flagged degenerate.
    """
    e = np.ravel(np.asarray(eps, dtype=float))
    b = np.ravel(np.asarray(b, dtype=float))
    d = e - b
    den = float(d @ d)
    if den == 0.0:
        return (0.0, True) if with_flag else 0.0
    # residual of b projected off d; avoids cancellation in the Gram form
    r = b - (float(b @ d) / den) * d
    val = min(float(r @ r), float(e @ e), float(b @ b))
    return (val, False) if with_flag else val


def rho_norm_sq(windows, rho):
    """``sum_t (sum_j rho_j ||err_{t+j|t}||)^2`` over a list of error windows."""
    rho = np.asarray(rho, dtype=float)
    total = 0.0
    for win in windows:
        norms = np.linalg.norm(np.atleast_2d(win), axis=1)
        total += float(np.dot(rho[: len(norms)], norms)) ** 2
    return total


def varpi_rho(eps_windows, eps_bar_windows, rho):
    """``||e||_rho^2 ||eb||_rho^2 / (||e||_rho^2 + ||eb||_rho^2)``; 0 if both vanish."""
    a = rho_norm_sq(eps_windows, rho)
    b = rho_norm_sq(eps_bar_windows, rho)
    if a + b == 0.0:
        return 0.0
    return a * b / (a + b)


def lemma3_bound(C, gamma, T, k):
    """``4 C^2 gamma^2 sqrt(T k + k^2)``."""
    return 4.0 * C**2 * gamma**2 * math.sqrt(T * k + k * k)


def gradient_bound(C, gamma):
    return 2.0 * C**2 * gamma**2


def dcl_regret(losses, lambdas, C, gamma, k):
    """Realised regret against the best fixed λ, and its theoretical bound."""
    T = len(losses)
    incurred = sum(xi_t(loss, lam) for loss, lam in zip(losses, lambdas))
    _, best = lambda_star(losses)
    return incurred - best, lemma3_bound(C, gamma, T, k)


def learning_weights(rho):
    """Scale EDPB weights to unit sum for the learner.

    Only the decay profile of ``rho`` enters the learner; its overall scale
    acts like a factor ``C^2`` on the step size.
    """
    rho = np.asarray(rho, dtype=float)
    total = float(np.sum(rho))
    if total <= 0:
        return np.ones_like(rho) / len(rho)
    return rho / total
