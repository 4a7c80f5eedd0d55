import math

import numpy as np
import pytest

from pmdkg.autograd import NonFiniteError, Tensor
from pmdkg.scoring import cosine_matrix, cosine_score, cross_entropy_loss, score_matrix


class TestCosine:
    def test_known_values(self):
        assert cosine_score([1, 0], [1, 1]) == pytest.approx(math.sqrt(2) / 2, abs=1e-12)
        assert cosine_score([1, 2], [2, 4]) == pytest.approx(1.0)
        assert cosine_score([1, 0], [-1, 0]) == pytest.approx(-1.0)

    def test_zero_vector(self):
        with pytest.raises(ValueError):
            cosine_score([0, 0], [1, 0])
        with pytest.raises(ValueError):
            cosine_matrix(np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]))

    def test_matrix_matches_pairwise(self, rng):
        a, b = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
        m = cosine_matrix(a, b).data
        for i in range(3):
            for j in range(4):
                assert m[i, j] == pytest.approx(cosine_score(a[i], b[j]), abs=1e-12)

    def test_temperature_scaling(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        np.testing.assert_allclose(score_matrix(a, b, 0.05).data, cosine_matrix(a, b).data * 20, rtol=1e-14)
        with pytest.raises(ValueError):
            score_matrix(a, b, 0.0)


class TestCrossEntropy:
    def test_known_row(self):
        expected = -math.log(math.exp(2) / (math.exp(2) + 2))
        assert expected == pytest.approx(0.23954, abs=1e-5)
        loss = cross_entropy_loss(np.array([[2.0, 0.0, 0.0]]), [0])
        assert float(loss.data) == pytest.approx(expected, rel=1e-14)

    def test_diagonal_labels_mean_over_rows(self, rng):
        logits = rng.normal(size=(4, 4))
        per_row = [-(logits[i, i] - np.log(np.exp(logits[i]).sum())) for i in range(4)]
        assert float(cross_entropy_loss(logits, np.arange(4)).data) == pytest.approx(np.mean(per_row), rel=1e-13)

    def test_non_finite_scores(self):
        with pytest.raises(NonFiniteError):
            cross_entropy_loss(np.array([[np.nan, 0.0]]), [0])

    def test_bad_labels(self):
        with pytest.raises(ValueError):
            cross_entropy_loss(np.zeros((2, 2)), [0, 2])

    def test_gradient_is_softmax_minus_onehot(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        cross_entropy_loss(x, [1, 0, 3]).backward()
        p = np.exp(x.data) / np.exp(x.data).sum(1, keepdims=True)
        p[[0, 1, 2], [1, 0, 3]] -= 1
        np.testing.assert_allclose(x.grad, p / 3, rtol=1e-12)
