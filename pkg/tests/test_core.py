import numpy as np
import pytest

from cbmrobust.core import (
    ConceptVector,
    LinearHead,
    MlpHead,
    MlpLayer,
    linear_head_as_mlp,
    logits,
    mlp_forward,
    mlp_jacobian,
    pseudoinverse,
    predict,
    sigmoid,
    spectral_norm,
)
from cbmrobust.errors import NonFiniteError, ParameterError, ShapeError

from helpers import random_head


def naive_matvec(w, b, c):
    out = []
    for i in range(len(w)):
        acc = 0.0
        for j in range(len(c)):
            acc += w[i][j] * c[j]
        out.append(acc + b[i])
    return np.array(out)


def power_iteration_norm(a, iters=5000):
    rng = np.random.default_rng(0)
    v = rng.normal(size=a.shape[1])
    for _ in range(iters):
        v = a.T @ (a @ v)
        nv = np.linalg.norm(v)
        if nv == 0:
            return 0.0
        v /= nv
    return float(np.linalg.norm(a @ v))


class TestLogits:
    def test_worked_example(self, two_class_head):
        assert np.array_equal(logits(two_class_head, [1.0, 0.0]), [1.0, -1.0])

    def test_zero_input_returns_bias(self, rng):
        head = random_head(rng, 4, 7)
        assert np.array_equal(logits(head, np.zeros(7)), head.bias)

    def test_matches_naive_matmul(self, rng):
        head = random_head(rng, 5, 10)
        c = rng.normal(size=10)
        expected = naive_matvec(head.weights, head.bias, c)
        np.testing.assert_allclose(logits(head, c), expected, atol=1e-12)

    def test_dimension_mismatch(self, two_class_head):
        with pytest.raises(ShapeError):
            logits(two_class_head, [1.0, 2.0, 3.0])


class TestPredict:
    def test_basic(self, two_class_head):
        assert predict(two_class_head, [1.0, 0.0]) == 0

    def test_tie_goes_to_lowest_index(self):
        head = LinearHead(weights=[[1.0], [1.0]], bias=[0.5, 0.5])
        assert predict(head, [2.0]) == 0

    def test_matches_linear_scan(self, rng):
        for _ in range(25):
            head = random_head(rng, 6, 4)
            c = rng.normal(size=4)
            scores = logits(head, c)
            best, best_idx = -np.inf, -1
            for i, s in enumerate(scores):
                if s > best:
                    best, best_idx = s, i
            assert predict(head, c) == best_idx

    def test_bias_shift_invariance(self, rng):
        for _ in range(20):
            head = random_head(rng, 5, 6)
            shift = rng.normal()
            shifted = LinearHead(weights=head.weights, bias=head.bias + shift)
            c = rng.normal(size=6)
            assert predict(head, c) == predict(shifted, c)


class TestPseudoinverse:
    def test_identity(self):
        np.testing.assert_allclose(pseudoinverse(np.eye(2)), np.eye(2), atol=1e-14)

    def test_zero_matrix(self):
        assert pseudoinverse(np.zeros((3, 5))).shape == (5, 3)
        assert np.all(pseudoinverse(np.zeros((3, 5))) == 0.0)

    @pytest.mark.parametrize("shape", [(3, 2), (2, 3), (6, 6), (50, 400)])
    def test_moore_penrose_conditions(self, rng, shape):
        a = rng.normal(size=shape)
        self._check_conditions(a)

    def test_rank_deficient(self, rng):
        a = rng.normal(size=(8, 3)) @ rng.normal(size=(3, 12))
        self._check_conditions(a)

    @staticmethod
    def _check_conditions(a):
        pinv = pseudoinverse(a)
        assert np.linalg.norm(a @ pinv @ a - a) < 1e-8
        assert np.linalg.norm(pinv @ a @ pinv - pinv) < 1e-8
        assert np.linalg.norm((a @ pinv).T - a @ pinv) < 1e-8
        assert np.linalg.norm((pinv @ a).T - pinv @ a) < 1e-8

    def test_rejects_nonfinite(self):
        with pytest.raises(NonFiniteError):
            pseudoinverse(np.array([[1.0, np.nan], [0.0, 1.0]]))

    def test_rejects_bad_rcond(self):
        with pytest.raises(ParameterError):
            pseudoinverse(np.eye(2), rcond=0.0)


class TestSpectralNorm:
    def test_identity(self):
        assert spectral_norm(np.eye(3)) == pytest.approx(1.0)

    def test_diagonal(self):
        assert spectral_norm(np.diag([3.0, 1.0])) == pytest.approx(3.0)

    def test_matches_power_iteration(self, rng):
        a = rng.normal(size=(4, 6))
        assert spectral_norm(a) == pytest.approx(power_iteration_norm(a), rel=1e-6)

    def test_absolute_homogeneity(self, rng):
        a = rng.normal(size=(5, 3))
        for alpha in (-2.7, 0.4, 13.0):
            assert spectral_norm(alpha * a) == pytest.approx(
                abs(alpha) * spectral_norm(a), rel=1e-9
            )

    def test_rejects_nonfinite(self):
        with pytest.raises(NonFiniteError):
            spectral_norm(np.array([[np.inf, 0.0]]))


def two_layer_head(rng, k=4, hidden=6, c=3, activation="relu"):
    return MlpHead(layers=(
        MlpLayer(rng.normal(size=(hidden, k)), rng.normal(size=hidden), activation),
        MlpLayer(rng.normal(size=(c, hidden)), rng.normal(size=c), "identity"),
    ))


class TestMlp:
    def test_identity_layer_matches_linear_head_bitwise(self, rng):
        head = random_head(rng, 4, 6)
        mlp = linear_head_as_mlp(head)
        c = rng.normal(size=6)
        assert np.array_equal(mlp_forward(mlp, c), logits(head, c))

    def test_zero_weights_return_bias(self, rng):
        mlp = MlpHead(layers=(
            MlpLayer(np.zeros((5, 3)), np.zeros(5), "relu"),
            MlpLayer(np.zeros((2, 5)), np.array([0.3, -0.7]), "identity"),
        ))
        assert np.array_equal(mlp_forward(mlp, rng.normal(size=3)), [0.3, -0.7])

    def test_matches_scalar_loop(self, rng):
        mlp = two_layer_head(rng)
        c = rng.normal(size=4)
        hidden = naive_matvec(mlp.layers[0].weights, mlp.layers[0].bias, c)
        hidden = np.maximum(hidden, 0.0)
        expected = naive_matvec(mlp.layers[1].weights, mlp.layers[1].bias, hidden)
        np.testing.assert_allclose(mlp_forward(mlp, c), expected, atol=1e-12)

    def test_dims_must_chain(self, rng):
        with pytest.raises(ShapeError):
            MlpHead(layers=(
                MlpLayer(rng.normal(size=(5, 3)), np.zeros(5), "relu"),
                MlpLayer(rng.normal(size=(2, 4)), np.zeros(2), "identity"),
            ))

    def test_final_activation_must_be_identity(self, rng):
        with pytest.raises(ParameterError):
            MlpHead(layers=(MlpLayer(rng.normal(size=(2, 3)), np.zeros(2), "sigmoid"),))


class TestMlpJacobian:
    def test_linear_case_exact(self, rng):
        head = random_head(rng, 4, 6)
        mlp = linear_head_as_mlp(head)
        jac = mlp_jacobian(mlp, rng.normal(size=6))
        np.testing.assert_allclose(jac, head.weights, atol=1e-8)

    def test_constant_head_zero_jacobian(self):
        mlp = MlpHead(layers=(MlpLayer(np.zeros((3, 2)), np.ones(3), "identity"),))
        assert np.allclose(mlp_jacobian(mlp, [0.1, 0.2]), 0.0)

    def test_matches_chain_rule_on_two_layer_net(self, rng):
        # sigmoid hidden layer keeps the analytic chain rule smooth
        w1 = rng.normal(size=(5, 4))
        b1 = rng.normal(size=5)
        w2 = rng.normal(size=(3, 5))
        b2 = rng.normal(size=3)
        mlp = MlpHead(layers=(MlpLayer(w1, b1, "sigmoid"), MlpLayer(w2, b2, "identity")))
        c = rng.normal(size=4)
        hidden = sigmoid(w1 @ c + b1)
        analytic = w2 @ ((hidden * (1.0 - hidden))[:, None] * w1)
        np.testing.assert_allclose(mlp_jacobian(mlp, c), analytic, atol=1e-4)

    def test_rejects_nonpositive_step(self, rng):
        mlp = linear_head_as_mlp(random_head(rng, 2, 2))
        with pytest.raises(ParameterError):
            mlp_jacobian(mlp, [0.0, 0.0], step=0.0)


class TestTypes:
    def test_concept_vector_validation(self):
        with pytest.raises(ShapeError):
            ConceptVector([])
        with pytest.raises(NonFiniteError):
            ConceptVector([1.0, np.nan])
        cv = ConceptVector([0.2, 1.4], clamped=False)
        assert not cv.in_unit_range()
        assert len(cv) == 2

    def test_head_needs_two_classes(self):
        with pytest.raises(ShapeError):
            LinearHead(weights=[[1.0, 2.0]], bias=[0.0])

    def test_head_values_immutable(self, two_class_head):
        with pytest.raises(ValueError):
            two_class_head.weights[0, 0] = 5.0
