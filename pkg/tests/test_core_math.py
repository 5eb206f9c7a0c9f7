import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sclip.core_math import (
    cosine_matrix,
    cross_entropy,
    entropy,
    normalize_rows,
    softmax,
    softmax_classifier,
)
from sclip.errors import BadTemperature, DimMismatch, LengthMismatch, NonFinite, ZeroRow


def _random_unit(rng, n, d):
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


class TestNormalizeRows:
    def test_three_four_five(self):
        np.testing.assert_allclose(normalize_rows([[3.0, 4.0]]), [[0.6, 0.8]], atol=1e-15)

    def test_identity_unchanged(self):
        np.testing.assert_array_equal(normalize_rows(np.eye(4)), np.eye(4))

    def test_zero_row(self):
        with pytest.raises(ZeroRow) as exc:
            normalize_rows([[1.0, 0.0], [0.0, 0.0]])
        assert exc.value.index == 1

    def test_first_zero_row_reported(self):
        with pytest.raises(ZeroRow) as exc:
            normalize_rows([[0.0, 0.0]])
        assert exc.value.index == 0

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite(self, bad):
        with pytest.raises(NonFinite):
            normalize_rows([[1.0, bad]])

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (5, 4), elements=st.floats(-100, 100)))
    def test_idempotent(self, m):
        if np.any(np.linalg.norm(m, axis=1) <= 1e-6):
            return
        once = normalize_rows(m)
        np.testing.assert_allclose(normalize_rows(once), once, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(once, axis=1), 1.0, atol=1e-12)


class TestCosineMatrix:
    def test_basis(self):
        np.testing.assert_array_equal(cosine_matrix(np.eye(3), np.eye(3)), np.eye(3))

    def test_antipodal(self):
        a = normalize_rows([[1.0, 2.0, -1.0]])
        assert cosine_matrix(a, -a)[0, 0] == pytest.approx(-1.0, abs=1e-15)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(3)
        a = _random_unit(rng, 3, 4)
        b = _random_unit(rng, 3, 4)
        expected = [[sum(a[i, k] * b[j, k] for k in range(4)) for j in range(3)] for i in range(3)]
        np.testing.assert_allclose(cosine_matrix(a, b), expected, atol=1e-12)

    def test_range(self):
        rng = np.random.default_rng(4)
        c = cosine_matrix(_random_unit(rng, 20, 6), _random_unit(rng, 30, 6))
        assert c.max() <= 1 + 1e-9 and c.min() >= -1 - 1e-9

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            cosine_matrix(np.eye(2), np.eye(3))


class TestSoftmaxClassifier:
    def test_equidistant_is_uniform(self):
        targets = np.eye(3)
        query = normalize_rows([[1.0, 1.0, 1.0]])[0]
        np.testing.assert_allclose(softmax_classifier(query, targets, 0.5), np.full(3, 1 / 3), atol=1e-15)

    def test_two_orthonormal_targets(self):
        p = softmax_classifier([1.0, 0.0], np.eye(2), 1.0)
        np.testing.assert_allclose(p, [math.e / (math.e + 1), 1 / (math.e + 1)], atol=1e-12)
        assert p[0] == pytest.approx(0.73106, abs=1e-5)

    def test_small_temperature_is_sharp(self):
        p = softmax_classifier([1.0, 0.0], np.eye(2), 0.01)
        # 1 / (1 + e^-100)
        assert p[0] > 1 - 1e-6

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_bad_temperature(self, tau):
        with pytest.raises(BadTemperature):
            softmax_classifier([1.0, 0.0], np.eye(2), tau)

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            softmax_classifier([1.0, 0.0, 0.0], np.eye(2), 1.0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1e-3, 10.0))
    def test_sums_to_one(self, seed, tau):
        rng = np.random.default_rng(seed)
        t = _random_unit(rng, 7, 5)
        q = _random_unit(rng, 1, 5)[0]
        assert softmax_classifier(q, t, tau).sum() == pytest.approx(1.0, abs=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-50, 50))
    def test_shift_invariance(self, seed, shift):
        rng = np.random.default_rng(seed)
        z = rng.uniform(-1, 1, 9) / 0.07
        np.testing.assert_allclose(softmax(z + shift), softmax(z), atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1e-3, 10.0))
    def test_argmax_preserved(self, seed, tau):
        rng = np.random.default_rng(seed)
        t = _random_unit(rng, 6, 4)
        q = _random_unit(rng, 1, 4)[0]
        sims = t @ q
        if np.sort(sims)[-1] - np.sort(sims)[-2] < 1e-9:
            return
        assert np.argmax(softmax_classifier(q, t, tau)) == np.argmax(sims)


class TestCrossEntropy:
    def test_perfect_prediction(self):
        assert cross_entropy([0, 1, 0], [0, 1, 0]) == 0.0

    @pytest.mark.parametrize("c", [2, 5, 32])
    def test_uniform_prediction(self, c):
        target = np.eye(c)[0]
        assert cross_entropy(np.full(c, 1 / c), target) == pytest.approx(math.log(c), abs=1e-12)

    def test_scalar_case(self):
        assert cross_entropy([0.7, 0.3], [1.0, 0.0]) == pytest.approx(0.35667494393873245, abs=1e-12)

    def test_zero_prediction_clamped(self):
        assert cross_entropy([0.0, 1.0], [1.0, 0.0]) == pytest.approx(-math.log(1e-12))

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            cross_entropy([0.5, 0.5], [1.0, 0.0, 0.0])

    def test_gibbs_inequality(self):
        rng = np.random.default_rng(7)
        for _ in range(500):
            p = rng.dirichlet(np.ones(6))
            q = rng.dirichlet(np.ones(6) * 0.5)
            assert cross_entropy(p, q) >= entropy(q) - 1e-9
