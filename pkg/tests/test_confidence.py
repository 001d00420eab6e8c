import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lac.confidence import (
    DelayedConfidenceLearner,
    FTLSelfTuning,
    OutOfOrderFeedback,
    SurrogateLoss,
    dcl_regret,
    ftl_self_tuning_step,
    golden_section,
    lambda_star,
    learning_weights,
    lemma3_bound,
    run_dcl,
    theory_step_size,
    varpi_gram,
    varpi_rho,
    window_losses,
    xi_grad,
    xi_t,
)
from lac.model import make_bundle

finite = st.floats(-3, 3, allow_nan=False)
window = arrays(float, (3, 2), elements=finite)


def loss_of(eps, eps_bar, rho=(1.0, 0.6, 0.3), index=0):
    return SurrogateLoss(np.array(rho), eps, eps_bar, index)


class TestXi:
    def test_hand_example(self):
        loss = SurrogateLoss(np.array([1.0, 0.5]), [[1, 0], [0, 1]], [[0, 0], [0, 0]])
        assert xi_t(loss, 0.5) == pytest.approx(0.5625)

    def test_hand_example_grid(self):
        loss = SurrogateLoss(np.array([1.0, 0.5]), [[1, 0], [0, 1]], [[0, 0], [0, 0]])
        grid = np.linspace(0, 1, 101)
        vals = [(1.0 * lam + 0.5 * lam) ** 2 for lam in grid]
        assert np.allclose([xi_t(loss, lam) for lam in grid], vals)

    def test_zero_errors(self):
        loss = loss_of(np.zeros((3, 2)), np.zeros((3, 2)))
        assert xi_t(loss, 0.3) == 0.0 and xi_grad(loss, 0.3) == 0.0

    @given(window, window)
    def test_lambda_one_uses_predictions(self, e, b):
        loss = loss_of(e, b)
        ref = float(np.dot(loss.rho, np.linalg.norm(e, axis=1))) ** 2
        assert xi_t(loss, 1.0) == pytest.approx(ref, abs=1e-12)

    @given(window, st.floats(0, 1))
    def test_equal_errors_flat(self, e, lam):
        loss = loss_of(e, e)
        assert xi_grad(loss, lam) == 0.0
        assert xi_t(loss, lam) == pytest.approx(xi_t(loss, 0.0))

    @given(window, window, st.floats(0, 1), st.floats(0, 1))
    def test_convex(self, e, b, a, c):
        loss = loss_of(e, b)
        mid = xi_t(loss, 0.5 * (a + c))
        assert mid <= 0.5 * (xi_t(loss, a) + xi_t(loss, c)) + 1e-9

    def test_shape_and_weight_validation(self):
        with pytest.raises(ValueError):
            SurrogateLoss(np.ones(3), np.zeros((3, 2)), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            SurrogateLoss(np.array([1.0, -1.0]), np.zeros((2, 1)), np.zeros((2, 1)))
        with pytest.raises(ValueError):
            SurrogateLoss(np.ones(1), np.zeros((2, 1)), np.zeros((2, 1)))

    def test_truncated_window_uses_leading_weights(self):
        loss = SurrogateLoss(np.array([1.0, 0.5, 0.25]), [[1.0]], [[0.0]])
        assert xi_t(loss, 1.0) == 1.0


class TestLearner:
    def test_initial_value_before_window(self):
        lams = run_dcl([loss_of(np.ones((3, 2)), np.zeros((3, 2)), index=t) for t in range(4)], k=4)
        assert np.all(lams == 0.5)

    def test_zero_gradient_keeps_value(self):
        e = np.ones((3, 2))
        losses = [loss_of(e, e, index=t) for t in range(9)]
        assert np.all(run_dcl(losses, k=3, init=0.3) == 0.3)

    def test_clamp_from_zero(self):
        # at lam=0 with eps=0 the gradient is -2 (sum rho |b|)^2 < 0
        b = np.array([[1.0, 0.0]])
        loss = SurrogateLoss(np.array([1.0]), np.zeros((1, 2)), b, index=0)
        g = -xi_grad(loss, 0.0)
        for beta in (0.1, 1.0):
            learner = DelayedConfidenceLearner(1, beta, init=0.0)
            learner.step(0)
            assert learner.step(1, loss) == pytest.approx(min(beta * g, 1.0))

    def test_interleaving_equals_independent_runs(self, rng):
        k, T, beta = 2, 40, 0.07
        losses = [loss_of(rng.standard_normal((3, 2)), rng.standard_normal((3, 2)), index=t) for t in range(T)]
        lams = run_dcl(losses, k, beta, 0.5)
        for r in range(k):
            lam = 0.5
            for t in range(r, T, k):
                assert lams[t] == lam
                lam = min(1.0, max(0.0, lam - beta * xi_grad(losses[t], lam)))

    def test_callable_step_size(self, rng):
        losses = [loss_of(rng.standard_normal((3, 2)), np.zeros((3, 2)), index=t) for t in range(10)]
        a = run_dcl(losses, 2, 0.05)
        b = run_dcl(losses, 2, lambda t: 0.05)
        assert np.array_equal(a, b)

    def test_out_of_order(self):
        learner = DelayedConfidenceLearner(2)
        learner.step(0)
        with pytest.raises(OutOfOrderFeedback):
            learner.step(2)
        learner.step(1)
        with pytest.raises(OutOfOrderFeedback):
            learner.step(2, loss_of(np.zeros((3, 2)), np.zeros((3, 2)), index=1))
        with pytest.raises(ValueError):
            learner.step(2)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            DelayedConfidenceLearner(0)
        with pytest.raises(ValueError):
            DelayedConfidenceLearner(1, init=1.5)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 2**31 - 1))
    def test_stays_in_unit_interval(self, k, seed):
        rng = np.random.default_rng(seed)
        losses = [loss_of(5 * rng.standard_normal((3, 2)), 5 * rng.standard_normal((3, 2)), index=t)
                  for t in range(20)]
        lams = run_dcl(losses, k, beta=1.0)
        assert np.all((lams >= 0) & (lams <= 1))


class TestSelfTuning:
    def test_perfect_predictions(self, rng):
        e = [np.zeros(2) for _ in range(5)]
        b = [rng.standard_normal(2) for _ in range(5)]
        assert ftl_self_tuning_step(e, b) == 1.0

    def test_perfect_nominals(self, rng):
        e = [rng.standard_normal(2) for _ in range(5)]
        b = [np.zeros(2) for _ in range(5)]
        assert ftl_self_tuning_step(e, b) == 0.0

    def test_grid_oracle(self, rng):
        e = [rng.standard_normal(3) for _ in range(30)]
        b = [0.5 * rng.standard_normal(3) for _ in range(30)]
        grid = np.linspace(0, 1, 10_001)
        obj = [sum(np.sum((lam * x + (1 - lam) * y) ** 2) for x, y in zip(e, b)) for lam in grid]
        assert abs(ftl_self_tuning_step(e, b) - grid[int(np.argmin(obj))]) <= 1e-3

    def test_empty_history_keeps_initial(self):
        assert FTLSelfTuning(0.4).current() == 0.4


class TestHindsight:
    def test_golden_section_vs_grid(self, rng):
        for _ in range(20):
            a, c = rng.uniform(-1, 2), rng.uniform(0.1, 3)
            x, _ = golden_section(lambda z: c * (z - a) ** 2)
            assert x == pytest.approx(min(1.0, max(0.0, a)), abs=1e-5)

    def test_lambda_star_trivial(self, rng):
        b = rng.standard_normal((3, 2))
        assert lambda_star([loss_of(np.zeros((3, 2)), b)]) == pytest.approx((1.0, 0.0), abs=1e-9)
        assert lambda_star([loss_of(b, np.zeros((3, 2)))]) == pytest.approx((0.0, 0.0), abs=1e-9)

    def test_lambda_star_orthogonal_closed_form(self):
        rho = np.array([1.0, 0.5])
        e = np.array([[1.0, 0.0], [2.0, 0.0]])
        b = np.array([[0.0, 1.0], [0.0, 2.0]])
        loss = SurrogateLoss(rho, e, b)
        lam, val = lambda_star([loss])
        a = float(np.dot(rho, np.linalg.norm(e, axis=1))) ** 2
        c = float(np.dot(rho, np.linalg.norm(b, axis=1))) ** 2
        assert lam == pytest.approx(0.5, abs=1e-5)
        assert val == pytest.approx(a * c / (a + c), rel=1e-9)
        assert varpi_rho([e], [b], rho) == pytest.approx(val, rel=1e-9)


class TestVarpi:
    def test_collinear(self):
        assert varpi_gram([1.0, 2.0], [2.0, 4.0]) == 0.0

    def test_orthogonal_unit(self):
        assert varpi_gram([1.0, 0.0], [0.0, 1.0]) == pytest.approx(0.5)

    def test_degenerate_flag(self):
        assert varpi_gram([1.0, 2.0], [1.0, 2.0], with_flag=True) == (0.0, True)

    def test_line_search_oracle(self, rng):
        for _ in range(5):
            e, b = rng.standard_normal(6), rng.standard_normal(6)
            grid = np.linspace(-5, 5, 100_001)
            vals = np.sum((grid[:, None] * e + (1 - grid[:, None]) * b) ** 2, axis=1)
            assert varpi_gram(e, b) == pytest.approx(vals.min(), rel=1e-6, abs=1e-9)

    @given(arrays(float, 4, elements=finite), arrays(float, 4, elements=finite))
    def test_bounded_by_endpoints(self, e, b):
        v = varpi_gram(e, b)
        assert 0 <= v <= min(e @ e, b @ b) + 1e-9

    def test_nearly_collinear_stays_below_endpoints(self):
        e = np.array([3.0, 0.7026196, 0.0, 0.0])
        b = np.array([3.0, 0.7026196, 2**-9, 2**-9])
        assert varpi_gram(e, b) <= e @ e

    def test_rho_cases(self):
        rho = np.array([1.0, 0.5])
        assert varpi_rho([np.zeros((2, 1))], [np.ones((2, 1))], rho) == 0.0
        assert varpi_rho([np.zeros((2, 1))], [np.zeros((2, 1))], rho) == 0.0
        w = [np.ones((2, 1))]
        c = 1.5**2
        assert varpi_rho(w, w, rho) == pytest.approx(c / 2)


class TestRegret:
    def test_lambda_constant_losses(self, rng):
        e = [rng.standard_normal((3, 2)) for _ in range(30)]
        losses = [loss_of(x, x, index=t) for t, x in enumerate(e)]
        lams = run_dcl(losses, 3)
        regret, bound = dcl_regret(losses, lams, 1.9, 1.0, 3)
        assert regret == pytest.approx(0.0, abs=1e-12)
        assert bound == pytest.approx(4 * 1.9**2 * math.sqrt(30 * 3 + 9))

    def test_lemma3_and_step_size(self):
        assert lemma3_bound(1.0, 2.0, 200, 5) == pytest.approx(16 * math.sqrt(1025))
        assert theory_step_size(8.0, 200, 5) == pytest.approx(1 / (16 * math.sqrt(41)))

    def test_window_losses_scale(self, rng):
        truth = rng.standard_normal((6, 2))
        preds = [truth[t:t + 2] + 0.1 for t in range(6)]
        bundle = make_bundle(truth, preds, k=2)
        a = window_losses(bundle, np.ones(2))
        b = window_losses(bundle, np.ones(2), scale=2.0)
        assert [x.index for x in a] == list(range(6))
        for x, y in zip(a, b):
            assert xi_t(x, 0.3) == pytest.approx(4 * xi_t(y, 0.3))


def test_learning_weights():
    assert np.allclose(learning_weights([2.0, 1.0, 1.0]), [0.5, 0.25, 0.25])
    assert np.allclose(learning_weights([0.0, 0.0]), [0.5, 0.5])
