import numpy as np
import pytest

from lac.lqc import solve_dare

# filled by the acceptance module, printed once at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


def random_lq(rng, n=None, m=None):
    """Random stabilisable (A, B, Q, R) with n, m <= 4."""
    n = int(rng.integers(1, 5)) if n is None else n
    m = int(rng.integers(1, 5)) if m is None else m
    A = rng.standard_normal((n, n))
    A *= rng.uniform(0.5, 1.4) / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-9)
    B = rng.standard_normal((n, m))
    M = rng.standard_normal((n, n))
    N = rng.standard_normal((m, m))
    return A, B, M @ M.T + 0.1 * np.eye(n), N @ N.T + 0.1 * np.eye(m)


def random_gains(rng, n=None, m=None, horizon=50):
    return solve_dare(*random_lq(rng, n, m), horizon=horizon)


def dense_finite_horizon(A, B, Q, R, P, x0, params):
    """Minimise ``sum_j x'Qx + u'Ru + x_w'Px_w`` over stacked controls via normal equations.

    Returns the optimal control sequence with shape ``(w, m)``.
    """
    n, m = B.shape
    w = len(params)
    # x_j = A^j x0 + sum_{i<j} A^{j-1-i} (B u_i + phi_i)
    Gu = np.zeros(((w + 1) * n, w * m))
    c = np.zeros((w + 1) * n)
    c[:n] = x0
    for j in range(1, w + 1):
        c[j * n:(j + 1) * n] = A @ c[(j - 1) * n:j * n] + params[j - 1]
        Gu[j * n:(j + 1) * n] = A @ Gu[(j - 1) * n:j * n]
        Gu[j * n:(j + 1) * n, (j - 1) * m:j * m] += B
    W = np.zeros(((w + 1) * n, (w + 1) * n))
    for j in range(w):
        W[j * n:(j + 1) * n, j * n:(j + 1) * n] = Q
    W[w * n:, w * n:] = P
    H = Gu.T @ W @ Gu + np.kron(np.eye(w), R)
    g = Gu.T @ W @ c
    return np.linalg.solve(H, -g).reshape(w, m)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
