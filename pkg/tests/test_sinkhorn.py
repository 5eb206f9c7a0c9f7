import math

import numpy as np
import pytest

from sclip.errors import BadLambda, ZeroKernelRow
from sclip.sinkhorn import (
    DEFAULT_ITERATIONS,
    cost_from_embeddings,
    marginal_residual,
    solve,
    uniform,
)

# Symmetric 2x2 problem: the optimal plan is [[a, b], [b, a]] with a + b = 1/2
# and a / b = exp(1 / 0.5).
A22 = 0.4403985389889412
B22 = 0.05960146101105877


def scalar_sinkhorn(cost, lam, rounds):
    """Independent scalar-loop Sinkhorn for tiny problems."""
    m, n = len(cost), len(cost[0])
    k = [[math.exp(-cost[i][j] / lam) for j in range(n)] for i in range(m)]
    a = [1.0 / m] * m
    b = [1.0 / n] * n
    for _ in range(rounds):
        for i in range(m):
            a[i] = (1.0 / m) / sum(k[i][j] * b[j] for j in range(n))
        for j in range(n):
            b[j] = (1.0 / n) / sum(k[i][j] * a[i] for i in range(m))
    return [[a[i] * k[i][j] * b[j] for j in range(n)] for i in range(m)]


def _unit(rng, n, d):
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _random_cost(seed, m=64, n=32, d=8):
    rng = np.random.default_rng(seed)
    return cost_from_embeddings(_unit(rng, m, d), _unit(rng, n, d))


class TestCost:
    def test_identical(self):
        v = np.array([[0.6, 0.8]])
        assert cost_from_embeddings(v, v)[0, 0] == pytest.approx(0.0, abs=1e-15)

    def test_antipodal(self):
        v = np.array([[0.6, 0.8]])
        assert cost_from_embeddings(v, -v)[0, 0] == pytest.approx(2.0, abs=1e-15)

    def test_orthogonal(self):
        assert cost_from_embeddings([[1.0, 0.0]], [[0.0, 1.0]])[0, 0] == 1.0

    def test_range(self):
        c = _random_cost(0)
        assert c.min() >= -1e-9 and c.max() <= 2 + 1e-9


class TestSolve:
    @pytest.mark.parametrize("iters", [0, 1, 10, 50])
    def test_constant_cost_uniform_plan(self, iters):
        plan = solve(np.full((3, 5), 0.7), lam=0.1, iterations=iters)
        np.testing.assert_allclose(plan.values, np.full((3, 5), 1 / 15), atol=1e-15)

    def test_two_by_two_against_scalar_oracle(self):
        cost = [[0.0, 1.0], [1.0, 0.0]]
        oracle = scalar_sinkhorn(cost, 0.5, 2000)
        np.testing.assert_allclose(oracle, [[A22, B22], [B22, A22]], atol=1e-15)
        plan = solve(np.array(cost), lam=0.5, iterations=200)
        row, col = marginal_residual(plan)
        assert row < 1e-12 and col < 1e-12
        np.testing.assert_allclose(plan.values, oracle, atol=1e-10)

    def test_iteration_zero_is_normalized_kernel(self):
        cost = _random_cost(1, 5, 4)
        plan = solve(cost, lam=0.2, iterations=0)
        k = np.exp(-cost / 0.2)
        np.testing.assert_allclose(plan.values, k / k.sum(), atol=1e-15)
        assert plan.iterations_run == 0

    def test_default_iterations(self):
        assert DEFAULT_ITERATIONS == 10
        assert solve(np.zeros((2, 2))).iterations_run == 10

    def test_deterministic(self):
        c = _random_cost(2)
        a = solve(c, lam=0.07).values
        b = solve(c, lam=0.07).values
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("lam", [0.0, -0.1])
    def test_bad_lambda(self, lam):
        with pytest.raises(BadLambda):
            solve(np.zeros((2, 2)), lam=lam)

    def test_kernel_underflow(self):
        cost = np.array([[0.0, 0.0], [2.0, 2.0]])
        with pytest.raises(ZeroKernelRow) as exc:
            solve(cost, lam=1e-3)
        assert exc.value.row == 1

    def test_non_uniform_marginals(self):
        p = np.array([0.2, 0.3, 0.5])
        q = np.array([0.6, 0.4])
        plan = solve(_random_cost(3, 3, 2), p, q, lam=0.3, iterations=500)
        assert max(marginal_residual(plan)) < 1e-12

    def test_bad_marginal(self):
        with pytest.raises(ValueError):
            solve(np.zeros((2, 2)), p=[0.5, 0.6], lam=1.0)


class TestResidual:
    def test_product_plan(self):
        plan = solve(np.ones((4, 6)), lam=0.5, iterations=0)
        row, col = marginal_residual(plan)
        assert row < 1e-12 and col < 1e-12

    def test_iteration_zero_nonconstant_cost(self):
        # 2x2 with unequal column pulls: row sums of the normalized kernel differ from 1/2
        plan = solve(np.array([[0.0, 1.0], [0.5, 1.0]]), lam=0.5, iterations=0)
        row, col = marginal_residual(plan)
        assert row > 0 and col > 0

    def test_converges(self):
        plan = solve(_random_cost(4), lam=0.07, iterations=500)
        row, col = marginal_residual(plan)
        assert row < 1e-9 and col < 1e-9


class TestInvariants:
    def test_column_exact_after_update(self):
        c = _random_cost(5)
        for iters in (1, 2, 5, 10):
            _, col = marginal_residual(solve(c, lam=0.07, iterations=iters))
            assert col <= 1e-12

    def test_row_residual_non_increasing(self):
        for seed in range(100):
            c = _random_cost(seed, 16, 8)
            prev = math.inf
            for iters in range(1, 15):
                row, _ = marginal_residual(solve(c, lam=0.07, iterations=iters))
                assert row <= prev + 1e-12
                prev = row

    def test_scale_invariance(self):
        c = _random_cost(6, 10, 7)
        for alpha in (0.5, 3.0):
            a = solve(c, lam=0.1, iterations=10).values
            b = solve(alpha * c, lam=0.1 * alpha, iterations=10).values
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_total_mass(self):
        c = _random_cost(7)
        for iters in range(0, 12):
            assert solve(c, lam=0.07, iterations=iters).values.sum() == pytest.approx(1.0, abs=1e-9)

    def test_uniform_helper(self):
        assert uniform(4).sum() == 1.0
