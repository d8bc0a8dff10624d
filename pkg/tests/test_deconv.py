import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldpot.deconv import (
    EntropicDeconvolver,
    GridModel,
    ProjectionNotConverged,
    additive_kernel,
    entropic_projection,
    forward_push,
    kl_discrete,
    lemma1_gap,
    projection_objective,
    total_variation,
)

GRID = np.linspace(0.0, 1.0, 16)


def random_stochastic(rng, k, m):
    K = rng.random((k, m)) + 1e-3
    return K / K.sum(1, keepdims=True)


class TestForwardPush:
    def test_atom_selects_row(self):
        K = random_stochastic(np.random.default_rng(0), 5, 7)
        p = np.zeros(5)
        p[3] = 1.0
        np.testing.assert_array_equal(forward_push(p, K), K[3])

    def test_identity(self):
        p = np.array([0.1, 0.2, 0.7])
        np.testing.assert_array_equal(forward_push(p, np.eye(3)), p)

    def test_double_loop(self):
        rng = np.random.default_rng(1)
        K = random_stochastic(rng, 6, 4)
        p = rng.dirichlet(np.ones(6))
        ref = [sum(p[i] * K[i, j] for i in range(6)) for j in range(4)]
        np.testing.assert_allclose(forward_push(p, K), ref, atol=1e-15)

    def test_shape_error(self):
        with pytest.raises(ValueError):
            forward_push(np.ones(3) / 3, np.ones((4, 2)) / 2)


class TestGridModel:
    def test_push_forward_default(self):
        px = np.random.default_rng(2).dirichlet(np.ones(16))
        m = GridModel.additive(GRID, 0.2, "gaussian", p_x=px)
        np.testing.assert_allclose(m.p_y, px @ m.kernel, atol=1e-12)
        np.testing.assert_allclose(m.kernel.sum(1), 1.0, atol=1e-12)

    def test_rejects_zero_entry(self):
        with pytest.raises(ValueError, match="positive"):
            GridModel(GRID[:2], GRID[:2], np.array([[1.0, 0.0], [0.5, 0.5]]))

    def test_rejects_non_stochastic(self):
        with pytest.raises(ValueError, match="sum to 1"):
            GridModel(GRID[:2], GRID[:2], np.array([[0.6, 0.6], [0.5, 0.5]]))

    def test_laplace_kernel_ratio(self):
        K = additive_kernel(GRID, GRID, 0.2, "laplace")
        # neighbouring columns differ by exp(grid step / sigma) away from the diagonal
        step = GRID[1] - GRID[0]
        assert K[0, 3] / K[0, 4] == pytest.approx(math.exp(step / 0.2), rel=1e-12)


class TestKL:
    def test_equal(self):
        p = np.array([0.3, 0.7])
        assert kl_discrete(p, p) == 0.0

    def test_closed_form(self):
        assert kl_discrete([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), rel=1e-15)

    def test_support_violation(self):
        with pytest.raises(ValueError):
            kl_discrete([0.5, 0.5], [1.0, 0.0])

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10**6), k=st.integers(1, 10))
    def test_against_summation(self, seed, k):
        rng = np.random.default_rng(seed)
        p, q = rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k))
        ref = math.fsum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
        value = kl_discrete(p, q)
        assert value == pytest.approx(ref, abs=1e-12)
        assert value >= -1e-12


class TestProjection:
    @pytest.mark.parametrize("mech", ["gaussian", "laplace"])
    @pytest.mark.parametrize("atom", [0, 5, 15])
    def test_single_atom_recovered(self, mech, atom):
        px = np.zeros(16)
        px[atom] = 1.0
        m = GridModel.additive(GRID, 0.2, mech, p_x=px)
        res = entropic_projection(m, tol=1e-15, max_iter=500)
        assert total_variation(res.q, px) <= 1e-6

    @pytest.mark.parametrize("mech", ["gaussian", "laplace"])
    def test_symmetric_uniform(self, mech):
        px = np.full(16, 1 / 16)
        res = entropic_projection(GridModel.additive(GRID, 0.2, mech, p_x=px), tol=1e-14)
        assert total_variation(res.q, px) <= 1e-6

    def test_optimum_value_is_output_entropy(self):
        px = np.random.default_rng(3).dirichlet(np.ones(16))
        m = GridModel.additive(GRID, 0.2, "laplace", p_x=px)
        value, _ = projection_objective(m, px)
        assert value == pytest.approx(-np.sum(m.p_y * np.log(m.p_y)), abs=1e-10)

    @pytest.mark.parametrize("rule", ["accelerated", "backtracking"])
    def test_monotone_history(self, rule):
        px = np.random.default_rng(4).dirichlet(np.ones(16))
        m = GridModel.additive(GRID, 0.2, "laplace", p_x=px)
        res = entropic_projection(m, tol=1e-12, max_iter=300, step_rule=rule, record_every=1)
        objs = [o for _, o, _ in res.history]
        assert len(objs) > 5
        assert all(b <= a + 1e-13 for a, b in zip(objs, objs[1:]))

    def test_optimality_and_push_forward(self):
        rng = np.random.default_rng(5)
        for _ in range(3):
            px = rng.dirichlet(np.ones(16))
            m = GridModel.additive(GRID, 0.2, "laplace", p_x=px)
            tol = 1e-8
            res = entropic_projection(m, tol=tol, max_iter=3000)
            assert res.converged
            value_px, _ = projection_objective(m, px)
            assert res.objective <= value_px + tol
            tv_q = total_variation(res.q, px)
            assert total_variation(forward_push(res.q, m.kernel), m.p_y) <= 2 * tv_q + 1e-12
            assert tv_q <= 0.02

    def test_first_variation_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        K = random_stochastic(rng, 8, 10)
        m = GridModel(np.arange(8.0), np.arange(10.0), K, p_y=rng.dirichlet(np.ones(10)))
        q = rng.dirichlet(np.ones(8) * 3)
        _, grad = projection_objective(m, q)
        h = 1e-5
        for i, j in [(0, 1), (2, 7), (5, 3), (6, 4)]:
            d = np.zeros(8)
            d[i], d[j] = 1.0, -1.0
            up, _ = projection_objective(m, q + h * d)
            dn, _ = projection_objective(m, q - h * d)
            fd = (up - dn) / (2 * h)
            analytic = grad[i] - grad[j]
            assert abs(fd - analytic) <= 1e-4 * abs(analytic)

    def test_failure_raises_with_result(self):
        px = np.random.default_rng(7).dirichlet(np.ones(16))
        m = GridModel.additive(GRID, 0.2, "gaussian", p_x=px)
        with pytest.raises(ProjectionNotConverged, match="last residual") as exc:
            entropic_projection(m, tol=1e-14, max_iter=3, raise_on_failure=True)
        assert exc.value.result.iterations == 3

    def test_argument_errors(self):
        m = GridModel.additive(GRID, 0.2, "gaussian", p_x=np.full(16, 1 / 16))
        with pytest.raises(ValueError):
            entropic_projection(m, lam=2.0)
        with pytest.raises(ValueError):
            entropic_projection(m, step_rule="newton")
        with pytest.raises(ValueError):
            entropic_projection(GridModel.additive(GRID, 0.2))


class TestLemma1:
    def test_equal_distributions(self):
        px = np.random.default_rng(8).dirichlet(np.ones(8))
        m = GridModel.additive(np.linspace(0, 1, 8), 0.5, p_x=px)
        lhs, rhs = lemma1_gap(m, px, sigma=0.5, s=2000, seed=1)
        assert lhs == 0.0
        assert rhs == 0.0

    def test_far_point_mass(self):
        x = np.linspace(0, 6, 13)
        px = np.zeros(13)
        px[:3] = 1 / 3
        q = np.zeros(13)
        q[-1] = 1.0
        m = GridModel.additive(x, 0.5, p_x=px)
        lhs, rhs = lemma1_gap(m, q, sigma=0.5, s=2000, seed=2)
        assert lhs > 1.0 and rhs > 1.0
        assert lhs <= 1.1 * rhs + 0.05

    def test_laplace_variant(self):
        px = np.array([0.5, 0.5, 0.0])
        q = np.array([0.0, 0.5, 0.5])
        m = GridModel.additive(np.array([0.0, 0.5, 1.0]), 0.5, "laplace", p_x=px)
        lhs, rhs = lemma1_gap(m, q, p=1, sigma=0.5, s=2000, seed=3)
        assert lhs > 0 and rhs > 0

    def test_rejects_multidimensional(self):
        m = GridModel.additive(np.zeros((2, 2)) + [[0, 0], [1, 1]], 0.5, p_x=[0.5, 0.5])
        with pytest.raises(ValueError):
            lemma1_gap(m, [0.5, 0.5])


def test_deconvolver_estimator():
    rng = np.random.default_rng(9)
    grid = np.linspace(0, 1, 6)
    truth = np.array([0.4, 0.0, 0.1, 0.0, 0.0, 0.5])
    X = grid[rng.choice(6, size=20000, p=truth)]
    Y = X + rng.laplace(scale=0.2, size=X.size)
    est = EntropicDeconvolver(support_x=grid, sigma=0.2, mech="laplace", support_y=np.linspace(-1, 2, 31),
                              tol=1e-8, max_iter=300).fit(Y[:, None])
    assert est.weights_.shape == (6,)
    # binning onto the output grid adds bias on top of sampling error
    assert total_variation(est.weights_, truth) <= 0.05
