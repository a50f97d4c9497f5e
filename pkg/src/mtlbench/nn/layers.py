"""Dense-network building blocks with hand-derived backward passes.

All arrays are float64, batches are 2-D (batch x features). Each layer
caches during forward whatever its backward pass needs; backward
accumulates parameter gradients in place (call ``zero_grad`` between
optimizer steps).
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, DegenerateBatchError

TRAIN = "train"
EVAL = "eval"


def _check_batch(x: np.ndarray, cols: int | None = None) -> np.ndarray:
    if type(x) is not np.ndarray or x.dtype != np.float64:
        x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigError(f"expected a 2-D batch, got shape {x.shape}")
    if cols is not None and x.shape[1] != cols:
        raise ConfigError(f"expected {cols} input columns, got {x.shape[1]}")
    return x


class Layer:
    """A differentiable transform with optional parameters.

    ``params()``/``grads()`` return dicts of same-keyed arrays; gradient
    arrays are accumulated into by ``backward``. ``buffers()`` holds
    non-trained state (batchnorm running statistics).
    """

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def zero_grad(self) -> None:
        for g in self.grads().values():
            g[...] = 0.0

    def forward(self, x: np.ndarray, mode: str = EVAL, rng=None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _require_cache(self):
        if getattr(self, "_cache", None) is None:
            raise RuntimeError(f"{type(self).__name__}.backward called without a cached forward pass")
        return self._cache


class Dense(Layer):
    """Affine map: y = x @ weights + bias, weights shaped (fan_in, fan_out)."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        # Fan-in-scaled uniform init, zero bias; keeps ReLU stacks bounded early.
        bound = np.sqrt(6.0 / fan_in)
        self.weights = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        self.bias = np.zeros(fan_out)
        self.d_weights = np.zeros_like(self.weights)
        self.d_bias = np.zeros_like(self.bias)
        self._cache = None

    @property
    def fan_in(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[1]

    def params(self):
        return {"weights": self.weights, "bias": self.bias}

    def grads(self):
        return {"weights": self.d_weights, "bias": self.d_bias}

    def forward(self, x, mode=EVAL, rng=None):
        x = _check_batch(x, self.fan_in)
        self._cache = x
        return x @ self.weights + self.bias

    def backward(self, grad_out):
        x = self._require_cache()
        self.d_weights += x.T @ grad_out
        self.d_bias += grad_out.sum(axis=0)
        return grad_out @ self.weights.T


class BatchNorm(Layer):
    """Batch normalization over the batch dimension, one statistic per feature.

    Train mode normalizes with biased batch statistics and updates running
    statistics with momentum (running <- (1-m)*running + m*batch, unbiased
    variance for the update). Eval mode normalizes with the running
    statistics.
    """

    def __init__(self, dim: int, momentum: float = 0.1, epsilon: float = 1e-5):
        if not 0.0 < momentum < 1.0:
            raise ConfigError(f"batchnorm momentum must be in (0,1), got {momentum}")
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.epsilon = epsilon
        self.d_gamma = np.zeros_like(self.gamma)
        self.d_beta = np.zeros_like(self.beta)
        self._cache = None

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.d_gamma, "beta": self.d_beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, mode=EVAL, rng=None):
        x = _check_batch(x, self.dim)
        n = x.shape[0]
        if mode == TRAIN:
            if n < 2:
                raise DegenerateBatchError("batchnorm train mode needs batch size >= 2")
            mean = x.mean(axis=0)
            var = x.var(axis=0)  # biased, used for normalization
            std = np.sqrt(var + self.epsilon)
            x_norm = (x - mean) / std
            m = self.momentum
            self.running_mean[...] = (1.0 - m) * self.running_mean + m * mean
            self.running_var[...] = (1.0 - m) * self.running_var + m * var * n / (n - 1)
        else:
            std = np.sqrt(self.running_var + self.epsilon)
            x_norm = (x - self.running_mean) / std
        self._cache = (mode, x_norm, std, n)
        return self.gamma * x_norm + self.beta

    def backward(self, grad_out):
        mode, x_norm, std, n = self._require_cache()
        self.d_gamma += (grad_out * x_norm).sum(axis=0)
        self.d_beta += grad_out.sum(axis=0)
        dx_norm = grad_out * self.gamma
        if mode == TRAIN:
            # Compact form of the full chain rule through batch mean/variance.
            s1 = dx_norm.sum(axis=0)
            s2 = (dx_norm * x_norm).sum(axis=0)
            return (dx_norm - s1 / n - x_norm * s2 / n) / std
        return dx_norm / std


class ReLU(Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x, mode=EVAL, rng=None):
        x = _check_batch(x)
        self._cache = x
        return np.maximum(x, 0.0)

    def backward(self, grad_out):
        x = self._require_cache()
        return grad_out * (x > 0)


class Sigmoid(Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x, mode=EVAL, rng=None):
        x = _check_batch(x)
        out = sigmoid(x)
        self._cache = out
        return out

    def backward(self, grad_out):
        out = self._require_cache()
        return grad_out * out * (1.0 - out)


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-rate) so eval is identity."""

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0,1), got {rate}")
        self.rate = rate
        self.last_mask = None
        self._cache = None

    def forward(self, x, mode=EVAL, rng=None):
        x = _check_batch(x)
        if mode != TRAIN or self.rate == 0.0:
            mask = np.ones_like(x)
            scale = 1.0
        else:
            if rng is None:
                raise ConfigError("dropout in train mode needs an rng")
            mask = (rng.random(x.shape) >= self.rate).astype(np.float64)
            scale = 1.0 / (1.0 - self.rate)
        self.last_mask = mask
        self._cache = (mask, scale)
        return x * mask * scale

    def backward(self, grad_out):
        mask, scale = self._require_cache()
        return grad_out * mask * scale


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable elementwise logistic: 0.5 * (1 + tanh(x/2))."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


# Functional forms of the layer operations, for direct use and testing.

def dense_forward(x: np.ndarray, layer: Dense) -> np.ndarray:
    return layer.forward(x)


def activation_apply(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigError(f"unknown activation kind {kind!r}")


def batchnorm_forward(x: np.ndarray, layer: BatchNorm, mode: str) -> np.ndarray:
    return layer.forward(x, mode=mode)


def dropout_forward(x: np.ndarray, rate: float, mode: str, rng=None) -> tuple[np.ndarray, np.ndarray]:
    layer = Dropout(rate)
    out = layer.forward(x, mode=mode, rng=rng)
    return out, layer.last_mask
