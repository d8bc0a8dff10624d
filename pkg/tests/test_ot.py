import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from ldpot.datasets import EmpiricalDistribution
from ldpot.ot import (
    CostSpec,
    GaussianKernel,
    LaplaceKernel,
    cost_matrix,
    dual_residual,
    entropic_wasserstein,
    exact_ot_lp,
    lp_cost,
    mutual_information,
    sinkhorn,
    sinkhorn_divergence,
)


def brute_assignment(C):
    n = C.shape[0]
    return min(sum(C[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n))) / n


def plan_sums(plan):
    return plan.pi.sum(1), plan.pi.sum(0)


def reference_sinkhorn(C, a, b, lam, iters):
    f, g = np.zeros(len(a)), np.zeros(len(b))
    for _ in range(iters):
        f = -lam * logsumexp((g[None, :] - C) / lam + np.log(b)[None, :], axis=1)
        g = -lam * logsumexp((f[:, None] - C) / lam + np.log(a)[:, None], axis=0)
    return a[:, None] * b[None, :] * np.exp((f[:, None] + g[None, :] - C) / lam)


class TestCostMatrix:
    def test_zero(self):
        np.testing.assert_array_equal(cost_matrix([[0.0]], [[0.0]], CostSpec(p=2)).entries, [[0.0]])

    @pytest.mark.parametrize("p,val", [(1, 3.0), (2, 9.0)])
    def test_single_pair(self, p, val):
        assert cost_matrix([[0.0]], [[3.0]], CostSpec(p=p)).entries[0, 0] == val

    def test_gaussian_kernel_diagonal(self):
        X = np.array([[0.3, -1.0, 2.0]])
        C = cost_matrix(X, X, CostSpec("neg_log_kernel", kernel=GaussianKernel(1.0))).entries
        assert C[0, 0] == pytest.approx(1.5 * math.log(2 * math.pi), rel=1e-15)

    def test_laplace_kernel(self):
        C = cost_matrix([[0.0]], [[1.0]], CostSpec("neg_log_kernel", kernel=LaplaceKernel(0.5))).entries
        assert C[0, 0] == pytest.approx(2.0 + math.log(1.0), abs=1e-15)

    def test_callable_and_table(self):
        dens = lambda x, y: np.exp(-((x - y) ** 2).sum(-1))  # noqa: E731
        C = cost_matrix([[0.0], [1.0]], [[0.0]], CostSpec("neg_log_kernel", kernel=dens)).entries
        np.testing.assert_allclose(C, [[0.0], [1.0]])
        table = np.array([[0.5, 0.5], [0.25, 0.75]])
        C = cost_matrix([[0.0], [1.0]], [[0.0], [1.0]], CostSpec("neg_log_kernel", kernel=table)).entries
        np.testing.assert_allclose(C, -np.log(table))

    def test_zero_kernel_names_pair(self):
        table = np.array([[0.5, 0.5], [0.0, 1.0]])
        with pytest.raises(ValueError, match=r"\(1, 0\)"):
            cost_matrix([[0.0], [1.0]], [[0.0], [1.0]], CostSpec("neg_log_kernel", kernel=table))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            cost_matrix(np.zeros((2, 2)), np.zeros((2, 3)), CostSpec())

    def test_lp_matches_loops(self):
        rng = np.random.default_rng(0)
        X, Y = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        for p in (1, 2):
            ref = np.array([[np.sum(np.abs(x - y) ** p) for y in Y] for x in X])
            np.testing.assert_allclose(lp_cost(X, Y, p), ref, rtol=1e-14)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            CostSpec(p=3)
        with pytest.raises(ValueError):
            CostSpec(lam=0.0)
        with pytest.raises(ValueError):
            CostSpec("neg_log_kernel")


class TestSinkhorn:
    def test_single_coupling(self):
        for lam in (1e-3, 1.0, 1e3):
            plan = sinkhorn([[3.7]], lam=lam)
            assert plan.pi[0, 0] == pytest.approx(1.0, abs=1e-15)
            assert plan.transport_cost == pytest.approx(3.7)
            assert plan.mutual_information == pytest.approx(0.0, abs=1e-15)
            assert dual_residual(plan, [[3.7]]) <= 1e-12

    def test_max_entropy_limit(self):
        plan = sinkhorn([[0.0, 1.0], [1.0, 0.0]], lam=1e6)
        np.testing.assert_allclose(plan.pi, 0.25, atol=1e-6)
        assert plan.transport_cost == pytest.approx(0.5, abs=1e-6)

    def test_small_lambda_matches_lp(self):
        C = np.array([[0.0, 1.0], [1.0, 0.0]])
        plan = sinkhorn(C, lam=1e-3)
        assert abs(plan.transport_cost - exact_ot_lp(C)[0]) <= 1e-3

    def test_marginals_and_gauge(self):
        rng = np.random.default_rng(1)
        C = rng.random((7, 9))
        a = rng.dirichlet(np.ones(7))
        b = rng.dirichlet(np.ones(9))
        plan = sinkhorn(C, a, b, lam=0.1, tol=1e-10)
        assert plan.converged
        r, c = plan_sums(plan)
        assert np.abs(r - a).sum() <= 1e-10
        assert np.abs(c - b).sum() <= 1e-10
        assert a @ plan.f == pytest.approx(b @ plan.g, abs=1e-13)

    def test_primal_equals_dual(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            C = rng.random((6, 6)) * 3
            lam = 10 ** rng.uniform(-0.7, 0.5)
            plan = sinkhorn(C, lam=lam, tol=1e-12)
            assert plan.converged
            assert plan.objective == pytest.approx(plan.primal, rel=1e-9)
            assert abs(plan.dual - plan.primal) <= 1e-6

    def test_plan_matches_reference(self):
        rng = np.random.default_rng(20)
        C = rng.random((5, 7))
        a, b = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(7))
        ref = reference_sinkhorn(C, a, b, 0.2, 3000)
        plan = sinkhorn(C, a, b, lam=0.2, tol=1e-13)
        np.testing.assert_allclose(plan.pi, ref, atol=1e-12)

    def test_dual_residual_random(self):
        C = np.random.default_rng(3).random((10, 10))
        plan = sinkhorn(C, tol=1e-9)
        assert dual_residual(plan, C) <= 1e-6

    def test_dual_residual_gauge_invariant(self):
        C = np.random.default_rng(4).random((5, 4))
        plan = sinkhorn(C, tol=1e-12)
        before = dual_residual(plan, C)
        plan.f = plan.f + 1.0
        plan.g = plan.g - 1.0
        assert dual_residual(plan, C) == pytest.approx(before, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        C = rng.random((6, 8))
        a, b = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(8))
        p1 = sinkhorn(C, a, b, lam=0.3, tol=1e-12)
        p2 = sinkhorn(C.T, b, a, lam=0.3, tol=1e-12)
        assert p1.objective == pytest.approx(p2.objective, rel=1e-9)

    def test_deterministic_bits(self):
        rng = np.random.default_rng(6)
        C = rng.random((30, 20))
        p1 = sinkhorn(C, lam=0.05, tol=1e-9, epsilon_scaling=0.99)
        p2 = sinkhorn(C.copy(), lam=0.05, tol=1e-9, epsilon_scaling=0.99)
        assert p1.f.tobytes() == p2.f.tobytes() and p1.g.tobytes() == p2.g.tobytes()

    def test_epsilon_scaling_agrees(self):
        C = np.random.default_rng(7).random((12, 12))
        direct = sinkhorn(C, lam=0.02, tol=1e-10, max_iter=100000)
        scaled = sinkhorn(C, lam=0.02, tol=1e-10, max_iter=100000, epsilon_scaling=0.9)
        assert direct.converged and scaled.converged
        assert scaled.objective == pytest.approx(direct.objective, rel=1e-8)

    def test_large_cost_ratio_stays_finite(self):
        C = np.random.default_rng(8).random((8, 8)) * 1e4
        plan = sinkhorn(C, lam=1.0, max_iter=50)
        assert np.all(np.isfinite(plan.f)) and np.all(np.isfinite(plan.pi))

    def test_warm_start(self):
        C = np.random.default_rng(9).random((10, 10))
        first = sinkhorn(C, lam=0.05, tol=1e-10)
        again = sinkhorn(C, lam=0.05, tol=1e-10, init=(first.f, first.g))
        assert again.iterations <= 2
        assert again.objective == pytest.approx(first.objective, rel=1e-10)

    def test_non_convergence_flagged(self):
        C = np.random.default_rng(10).random((10, 10))
        plan = sinkhorn(C, lam=1e-3, tol=1e-12, max_iter=3)
        assert not plan.converged and plan.iterations == 3

    def test_bad_weights(self):
        with pytest.raises(ValueError):
            sinkhorn(np.zeros((2, 2)), a=[0.7, 0.7])

    def test_transport_cost_monotone_in_lambda(self):
        rng = np.random.default_rng(11)
        C = rng.random((8, 8))
        m = C.mean()
        lams = [1e-3 * m, 1e-2 * m, 0.1 * m, m]
        costs = [sinkhorn(C, lam=l, tol=1e-11, max_iter=200000, epsilon_scaling=0.95).transport_cost for l in lams]
        assert all(b >= a - 1e-9 for a, b in zip(costs, costs[1:]))
        lp = exact_ot_lp(C)[0]
        objs = [sinkhorn(C, lam=l, tol=1e-11, max_iter=200000, epsilon_scaling=0.95).objective for l in lams]
        gaps = [o - lp for o in objs]
        assert all(g >= -1e-9 for g in gaps)
        assert all(b >= a for a, b in zip(gaps, gaps[1:]))
        assert gaps[0] < 0.01 * m


class TestMutualInformation:
    def test_product(self):
        a, b = np.array([0.2, 0.8]), np.array([0.5, 0.3, 0.2])
        assert mutual_information(np.outer(a, b), a, b) == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("m", [2, 5, 9])
    def test_diagonal(self, m):
        assert mutual_information(np.eye(m) / m, np.full(m, 1 / m), np.full(m, 1 / m)) == pytest.approx(math.log(m))

    def test_against_loops(self):
        rng = np.random.default_rng(12)
        P = rng.random((4, 6))
        P[0, 2] = 0.0
        P /= P.sum()
        a, b = P.sum(1), P.sum(0)
        ref = 0.0
        for i in range(4):
            for j in range(6):
                if P[i, j] > 0:
                    ref += P[i, j] * math.log(P[i, j] / (a[i] * b[j]))
        assert mutual_information(P, a, b) == pytest.approx(ref, abs=1e-12)
        assert mutual_information(P, a, b) >= -1e-12


class TestEntropicWasserstein:
    def test_same_atom(self):
        assert entropic_wasserstein([[1.0, 2.0]], [[1.0, 2.0]], p=2, lam=0.7) == pytest.approx(0.0, abs=1e-15)

    def test_forced_coupling(self):
        assert entropic_wasserstein([[0.0]], [[3.0]], p=2, lam=1.0) == pytest.approx(9.0)

    def test_identity_with_scaled_cost(self):
        rng = np.random.default_rng(13)
        X, Y = rng.normal(size=(6, 2)), rng.normal(size=(7, 2))
        for p, lam in ((1, 0.4), (2, 3.2)):
            w = entropic_wasserstein(X, Y, p=p, lam=lam)
            s = sinkhorn(lp_cost(X, Y, p) / lam, lam=1.0, tol=1e-9).objective
            assert w == pytest.approx(lam * s, rel=1e-9)

    @pytest.mark.filterwarnings("ignore:Sinkhorn stopped:RuntimeWarning")
    def test_bounds_exact_and_converges(self):
        rng = np.random.default_rng(14)
        for _ in range(5):
            X, Y = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
            exact = brute_assignment(lp_cost(X, Y, 2))
            vals = [entropic_wasserstein(X, Y, p=2, lam=lam, tol=1e-7, max_iter=200000, epsilon_scaling=0.95)
                    for lam in (1.0, 0.1, 0.01)]
            assert all(v >= exact - 1e-9 for v in vals)
            assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))
            # mutual information of any coupling of 5 uniform atoms is at most log 5
            assert vals[-1] - exact <= 0.01 * math.log(5) + 1e-9

    def test_weighted_inputs(self):
        X = EmpiricalDistribution(np.array([[0.0], [1.0]]), weights=[0.25, 0.75])
        Y = EmpiricalDistribution(np.array([[0.0], [1.0]]), weights=[0.25, 0.75])
        assert entropic_wasserstein(X, Y, p=1, lam=1e-3, epsilon_scaling=0.9) == pytest.approx(
            1e-3 * (-(0.25 * math.log(0.25) + 0.75 * math.log(0.75))), rel=1e-3)


class TestExactOT:
    def test_zero_diagonal(self):
        C = np.array([[0.0, 1.0, 2.0], [1.0, 0.0, 1.0], [2.0, 1.0, 0.0]])
        value, plan = exact_ot_lp(C)
        assert value == 0.0
        np.testing.assert_array_equal(plan, np.eye(3) / 3)

    def test_brute_force(self):
        rng = np.random.default_rng(15)
        for _ in range(20):
            C = rng.random((5, 5))
            assert exact_ot_lp(C)[0] == pytest.approx(brute_assignment(C), abs=1e-15)

    def test_identical_supports(self):
        X = np.random.default_rng(16).normal(size=(6, 2))
        a = np.random.default_rng(17).dirichlet(np.ones(6))
        value, plan = exact_ot_lp(lp_cost(X, X, 1), a, a)
        assert value == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(plan.sum(1), a, atol=1e-12)

    def test_lp_route_against_vertex_enumeration(self):
        # 2 x 3 transport polytope: one free parameter pair; brute force over a fine grid
        rng = np.random.default_rng(18)
        C = rng.random((2, 3))
        a, b = np.array([0.4, 0.6]), np.array([0.2, 0.3, 0.5])
        value, plan = exact_ot_lp(C, a, b)
        best = np.inf
        for p0 in np.linspace(0, 0.2, 201):
            for p1 in np.linspace(0, 0.3, 301):
                p2 = 0.4 - p0 - p1
                if -1e-12 <= p2 <= 0.5 + 1e-12:
                    row2 = b - np.array([p0, p1, p2])
                    if np.all(row2 >= -1e-12):
                        best = min(best, C[0] @ [p0, p1, p2] + C[1] @ row2)
        assert value == pytest.approx(best, abs=1e-9)
        np.testing.assert_allclose(plan.sum(1), a, atol=1e-9)

    def test_size_cap(self):
        with pytest.raises(ValueError, match="4096"):
            exact_ot_lp(np.zeros((4097, 1)))


class TestDivergence:
    def test_identical(self):
        X = np.random.default_rng(19).normal(size=(8, 2))
        assert abs(sinkhorn_divergence(X, X, CostSpec(p=2, lam=0.5))) <= 1e-9

    def test_single_atoms(self):
        assert sinkhorn_divergence([[0.0]], [[3.0]], CostSpec(p=2, lam=1.0)) == pytest.approx(9.0)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10**6), lam=st.floats(0.05, 5.0))
    def test_nonnegative(self, seed, lam):
        rng = np.random.default_rng(seed)
        X, Y = rng.normal(size=(6, 2)), rng.normal(size=(5, 2))
        assert sinkhorn_divergence(X, Y, CostSpec(p=2, lam=lam)) >= -1e-9


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), m=st.integers(1, 8), k=st.integers(1, 8), lam=st.floats(0.05, 10.0))
def test_sinkhorn_certificates_property(seed, m, k, lam):
    rng = np.random.default_rng(seed)
    C = rng.random((m, k)) * 2
    a, b = rng.dirichlet(np.ones(m)), rng.dirichlet(np.ones(k))
    plan = sinkhorn(C, a, b, lam=lam, tol=1e-9)
    if plan.converged:
        assert plan.marginal_residual <= 1e-9
        assert abs(plan.dual - plan.primal) <= 1e-6
        assert plan.objective == pytest.approx(plan.primal, rel=1e-9, abs=1e-12)
    assert plan.mutual_information >= -1e-12
