import numpy as np
import pytest

from mtlbench.errors import ConfigError, DegenerateBatchError
from mtlbench.nn import (BatchNorm, Dense, Dropout, ReLU, Sigmoid, activation_apply,
                         batchnorm_forward, dense_forward, dropout_forward)


def make_dense(weights, bias):
    layer = Dense(len(weights), len(weights[0]), np.random.default_rng(0))
    layer.weights[...] = weights
    layer.bias[...] = bias
    return layer


class TestDense:
    def test_identity_weights(self):
        layer = make_dense([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
        out = dense_forward(np.array([[1.0, 2.0]]), layer)
        assert np.array_equal(out, [[1.0, 2.0]])

    def test_zero_input_yields_bias(self):
        layer = make_dense([[0.3, -0.7], [1.1, 0.2]], [3.0, -1.0])
        out = dense_forward(np.array([[0.0, 0.0]]), layer)
        assert np.array_equal(out, [[3.0, -1.0]])

    def test_hand_matrix_multiply(self):
        # [1,2] @ [[1,0],[1,1]] + [0.5,0] = [1+2+0.5, 0+2+0] = [3.5, 2]
        layer = make_dense([[1.0, 0.0], [1.0, 1.0]], [0.5, 0.0])
        out = dense_forward(np.array([[1.0, 2.0]]), layer)
        assert np.allclose(out, [[3.5, 2.0]], atol=1e-15)

    def test_dimension_mismatch(self):
        layer = make_dense([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
        with pytest.raises(ConfigError):
            layer.forward(np.zeros((1, 3)))

    def test_backward_without_forward(self):
        layer = Dense(2, 2, np.random.default_rng(0))
        with pytest.raises(RuntimeError):
            layer.backward(np.zeros((1, 2)))


class TestActivations:
    def test_relu_sign_split(self):
        out = activation_apply(np.array([[-1.0, 0.0, 2.0]]), "relu")
        assert np.array_equal(out, [[0.0, 0.0, 2.0]])

    def test_sigmoid_symmetry_point(self):
        assert activation_apply(np.array([[0.0]]), "sigmoid")[0, 0] == 0.5

    def test_sigmoid_closed_form(self):
        # sigmoid(ln 3) = 1 / (1 + 1/3) = 0.75
        out = activation_apply(np.array([[np.log(3.0)]]), "sigmoid")
        assert out[0, 0] == pytest.approx(0.75, abs=1e-15)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            activation_apply(np.zeros((1, 1)), "tanh")

    def test_sigmoid_extreme_inputs_finite(self):
        out = activation_apply(np.array([[-1000.0, 1000.0]]), "sigmoid")
        assert np.all(np.isfinite(out))
        assert out[0, 0] == 0.0 and out[0, 1] == 1.0


class TestBatchNorm:
    def test_constant_column_maps_to_beta(self):
        layer = BatchNorm(1)
        layer.beta[...] = 2.0
        out = batchnorm_forward(np.array([[5.0], [5.0]]), layer, "train")
        assert np.allclose(out, [[2.0], [2.0]])

    def test_hand_normalization(self):
        # column [0, 2]: mean 1, population std 1 -> [-1, 1]
        layer = BatchNorm(1, epsilon=1e-12)
        out = batchnorm_forward(np.array([[0.0], [2.0]]), layer, "train")
        assert np.allclose(out, [[-1.0], [1.0]], atol=1e-6)

    def test_eval_unit_running_stats_is_identity(self):
        layer = BatchNorm(3, epsilon=1e-12)
        x = np.random.default_rng(1).normal(size=(4, 3))
        out = batchnorm_forward(x, layer, "eval")
        assert np.allclose(out, x, atol=1e-9)

    def test_train_batch_of_one_rejected(self):
        layer = BatchNorm(2)
        with pytest.raises(DegenerateBatchError):
            batchnorm_forward(np.zeros((1, 2)), layer, "train")

    def test_train_output_standardized_before_scale_shift(self):
        layer = BatchNorm(4)
        x = np.random.default_rng(2).normal(loc=3.0, scale=2.5, size=(64, 4))
        out = layer.forward(x, mode="train")
        assert np.allclose(out.mean(axis=0), 0.0, atol=1e-10)
        assert np.allclose(out.var(axis=0), 1.0, atol=1e-3)

    def test_running_stats_move_toward_batch_stats(self):
        layer = BatchNorm(1, momentum=0.1)
        x = np.full((10, 1), 4.0) + np.arange(10)[:, None]  # mean 8.5
        layer.forward(x, mode="train")
        assert layer.running_mean[0] == pytest.approx(0.9 * 0.0 + 0.1 * 8.5)
        # running update uses the unbiased variance
        assert layer.running_var[0] == pytest.approx(0.9 * 1.0 + 0.1 * x.var(ddof=1))


class TestDropout:
    def test_zero_rate_train_is_identity(self):
        x = np.random.default_rng(3).normal(size=(5, 4))
        out, mask = dropout_forward(x, 0.0, "train", np.random.default_rng(0))
        assert np.array_equal(out, x)
        assert np.all(mask == 1.0)

    def test_eval_is_identity(self):
        x = np.random.default_rng(4).normal(size=(5, 4))
        out, mask = dropout_forward(x, 0.3, "eval")
        assert np.array_equal(out, x)
        assert np.all(mask == 1.0)

    def test_monte_carlo_expectation(self):
        # E[output] = input under inverted dropout; 10,000 draws within 2%.
        rng = np.random.default_rng(42)
        x = np.full((1, 8), 1.0) + np.linspace(0.0, 0.7, 8)
        total = np.zeros_like(x)
        draws = 10_000
        for _ in range(draws):
            out, _ = dropout_forward(x, 0.3, "train", rng)
            total += out
        assert np.all(np.abs(total / draws - x) / np.abs(x) < 0.02)

    def test_invalid_rate(self):
        with pytest.raises(ConfigError):
            Dropout(1.0)

    def test_train_mode_requires_rng(self):
        with pytest.raises(ConfigError):
            Dropout(0.3).forward(np.zeros((2, 2)), mode="train")


def test_relu_sigmoid_backward_shapes():
    x = np.random.default_rng(5).normal(size=(3, 4))
    for layer in (ReLU(), Sigmoid()):
        out = layer.forward(x)
        grad = layer.backward(np.ones_like(out))
        assert grad.shape == x.shape
