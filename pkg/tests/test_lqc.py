import numpy as np
import pytest
from scipy.linalg import solve_discrete_are

from conftest import dense_finite_horizon, random_gains, random_lq
from lac.lqc import (
    NonConvergenceError,
    UnstableClosedLoopError,
    adversity,
    clairvoyant_optimal_lqc,
    decay_constants,
    edpb_weights,
    j_star_lower_bound,
    lower_bound_constant,
    lqc_receding_action,
    regret_identity_check,
    regret_witness,
    solve_dare,
    write_gains,
)
from lac.model import make_bundle, make_lqc_tracking_system, perfect_bundle

GOLDEN = (1 + 5**0.5) / 2


def tracking_gains(c1=0.2, T=200):
    system, truth = make_lqc_tracking_system(c1, None, T)
    L = system.linear
    return solve_dare(L.A, L.B, L.Q, L.R, horizon=T), truth


class TestDare:
    def test_scalar_zero_dynamics(self):
        g = solve_dare(0.0, 1.0, 1.0, 1.0)
        assert g.P[0, 0] == pytest.approx(1.0, abs=1e-14)
        assert g.K[0, 0] == pytest.approx(0.0, abs=1e-14)

    def test_scalar_golden_ratio(self):
        g = solve_dare(1.0, 1.0, 1.0, 1.0)
        assert abs(g.P[0, 0] - GOLDEN) <= 1e-12

    @pytest.mark.parametrize("c1", [0.2, 1.0])
    def test_tracking_system_residual(self, c1):
        g, _ = tracking_gains(c1)
        assert g.riccati_residual <= 1e-9
        assert np.max(np.abs(np.linalg.eigvals(g.F))) < 1

    def test_matches_scipy(self, rng):
        for _ in range(30):
            A, B, Q, R = random_lq(rng)
            g = solve_dare(A, B, Q, R)
            ref = solve_discrete_are(A, B, Q, R)
            assert np.allclose(g.P, ref, rtol=1e-9, atol=1e-9)

    def test_gain_identities(self, rng):
        g = random_gains(rng, 3, 2)
        M = g.R + g.B.T @ g.P @ g.B
        assert np.allclose(g.S, np.linalg.solve(M, g.B.T))
        assert np.allclose(g.K, g.S @ g.P @ g.A)
        assert np.allclose(g.F, g.A - g.B @ g.K)
        assert np.allclose(g.H, g.B @ g.S)

    def test_asymmetric_cost_rejected(self):
        with pytest.raises(ValueError):
            solve_dare(np.eye(2), np.eye(2), [[1.0, 1.0], [0.0, 1.0]], np.eye(2))

    def test_uncontrollable_unstable_mode_does_not_converge(self):
        with pytest.raises(NonConvergenceError):
            solve_dare(2.0, 0.0, 1.0, 1.0, max_iter=500)


class TestDecay:
    def test_zero_matrix(self):
        assert decay_constants(np.zeros((2, 2)), 10) == (1.0, 0.5)

    def test_half_identity(self):
        C, rho = decay_constants(0.5 * np.eye(2), 50)
        assert rho == 0.75 and C == pytest.approx(1.0)

    def test_inequality_holds_on_horizon(self):
        g, _ = tracking_gains()
        Ft = np.eye(4)
        for t in range(201):
            assert np.linalg.norm(Ft, 2) <= g.C_F * g.rho_F**t * (1 + 1e-12)
            Ft = Ft @ g.F

    def test_long_horizon_does_not_overflow(self):
        C, rho = decay_constants(np.array([[0.9]]), 100_000)
        assert np.isfinite(C) and C == pytest.approx(1.0)

    def test_unstable_rejected(self):
        with pytest.raises(UnstableClosedLoopError):
            decay_constants(np.array([[1.2]]), 10)


class TestRecedingAction:
    def test_zero_params_is_state_feedback(self, rng):
        g = random_gains(rng, 3, 2)
        x = rng.standard_normal(3)
        assert np.allclose(lqc_receding_action(g, x, np.zeros((4, 3))), -g.K @ x)

    def test_single_prediction(self, rng):
        g = random_gains(rng, 3, 2)
        w = rng.standard_normal(3)
        u = lqc_receding_action(g, np.zeros(3), w[None])
        ref = -np.linalg.solve(g.R + g.B.T @ g.P @ g.B, g.B.T @ g.P @ w)
        assert np.allclose(u, ref, atol=1e-13)

    def test_scalar_k3_dense_oracle(self, rng):
        g = random_gains(rng, 1, 1)
        x, params = rng.standard_normal(1), rng.standard_normal((3, 1))
        u = dense_finite_horizon(g.A, g.B, g.Q, g.R, g.P, x, params)[0]
        assert np.allclose(lqc_receding_action(g, x, params), u, atol=1e-10)

    def test_clamped(self, rng):
        g = random_gains(rng, 2, 2)
        box = (-0.1 * np.ones(2), 0.1 * np.ones(2))
        u = lqc_receding_action(g, 100 * np.ones(2), np.zeros((2, 2)), box)
        assert np.all(np.abs(u) <= 0.1)

    def test_dimension_mismatch(self, rng):
        g = random_gains(rng, 2, 1)
        with pytest.raises(ValueError):
            lqc_receding_action(g, np.zeros(3), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            lqc_receding_action(g, np.zeros(2), np.zeros((2, 3)))


class TestClairvoyant:
    def test_zero_everything(self, rng):
        g = random_gains(rng, 2, 1)
        xs, us, J = clairvoyant_optimal_lqc(g, np.zeros(2), np.zeros((10, 2)))
        assert J == 0.0 and not np.any(us)

    def test_lqr_value(self, rng):
        g = random_gains(rng, 3, 2)
        x0 = rng.standard_normal(3)
        _, _, J = clairvoyant_optimal_lqc(g, x0, np.zeros((25, 3)))
        assert J == pytest.approx(x0 @ g.P @ x0, rel=1e-10)

    def test_dense_full_horizon(self, rng):
        g = random_gains(rng, 3, 2)
        x0, truth = rng.standard_normal(3), rng.standard_normal((20, 3))
        _, us, J = clairvoyant_optimal_lqc(g, x0, truth)
        ref = dense_finite_horizon(g.A, g.B, g.Q, g.R, g.P, x0, truth)
        assert np.allclose(us, ref, rtol=1e-8, atol=1e-8 * np.max(np.abs(ref)))


class TestRegretIdentity:
    def test_perfect_predictions_full_window(self, rng):
        g = random_gains(rng, 2, 2)
        truth = rng.standard_normal((15, 2))
        w, regret, _ = regret_identity_check(g, 1.0, perfect_bundle(truth, 15), rng.standard_normal(2))
        assert abs(regret) < 1e-9 and abs(w.total) < 1e-9

    def test_zero_confidence_full_window(self, rng):
        g = random_gains(rng, 3, 2)
        truth = rng.standard_normal((20, 3))
        bundle = perfect_bundle(truth, 20)
        w, regret, res = regret_identity_check(g, 0.0, bundle, np.zeros(3))
        assert res <= 1e-6
        tail = np.zeros(3)
        for t in range(19, -1, -1):
            tail = g.P @ truth[t] + g.F.T @ tail
            assert np.allclose(w.psi[t], -tail)

    def test_witness_nonnegative(self, rng):
        g = random_gains(rng, 3, 2)
        truth = rng.standard_normal((10, 3))
        used = [rng.standard_normal((3, 3)) for _ in range(10)]
        assert np.all(regret_witness(g, used, truth).contributions >= -1e-12)


def test_j_star_lower_bound_examples(rng):
    g = random_gains(rng, 2, 2)
    assert j_star_lower_bound(g, np.zeros((5, 2))) == 0.0
    truth = np.zeros((6, 2))
    truth[4] = [0.3, -0.4]
    # a single unit disturbance isolates the prefactor
    c0 = j_star_lower_bound(g, np.array([[1.0, 0.0]]))
    expected = c0 * sum(g.rho_F ** (2 * (4 - t)) for t in range(5)) * 0.25
    assert j_star_lower_bound(g, truth) == pytest.approx(expected, rel=1e-12)


def test_j_star_lower_bound_below_optimum(rng):
    g, truth = tracking_gains()
    _, _, J = clairvoyant_optimal_lqc(g, np.zeros(4), truth)
    # Q is only semidefinite here, so the prefactor vanishes
    assert 0 <= j_star_lower_bound(g, truth) <= J
    g = random_gains(rng, 3, 2)
    truth = rng.standard_normal((40, 3))
    _, _, J = clairvoyant_optimal_lqc(g, np.zeros(3), truth)
    assert 0 < j_star_lower_bound(g, truth) <= J


def test_adversity_counts():
    _, truth = tracking_gains()
    assert adversity(np.zeros((7, 2))) == 0
    assert adversity(truth) == 200
    one = np.zeros((5, 3))
    one[2, 1] = 1e-300
    assert adversity(one) == 1


def test_edpb_weights_decay(rng):
    g = random_gains(rng, 3, 2)
    rho = edpb_weights(g, 6)
    assert np.all(np.diff(rho) < 0) and rho[1] / rho[0] == pytest.approx(g.rho_F)


def test_lower_bound_constant_scalar():
    g = solve_dare(1.0, 1.0, 1.0, 1.0)
    assert lower_bound_constant(g) == pytest.approx(GOLDEN**2 / (1 + GOLDEN))


def test_write_gains(tmp_path, rng):
    g = random_gains(rng, 2, 1)
    path = tmp_path / "gains.csv"
    write_gains(path, g)
    rows = path.read_text().splitlines()
    assert rows[0] == "name,i,j,value"
    P01 = [r for r in rows if r.startswith("P,0,1,")][0]
    assert float(P01.split(",")[-1]) == g.P[0, 1]


def test_bundle_with_constant_shift_regret(rng):
    # shifting every prediction by a constant changes only the witness term
    g = random_gains(rng, 2, 2)
    truth = rng.standard_normal((12, 2))
    preds = [truth[t:min(t + 4, 12)] + 0.1 for t in range(12)]
    bundle = make_bundle(truth, preds, k=4)
    _, regret, res = regret_identity_check(g, 0.7, bundle, np.ones(2))
    assert regret > 0 and res <= 1e-6
