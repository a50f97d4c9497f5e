"""Layer containers and parameter bookkeeping helpers."""

from __future__ import annotations

import numpy as np

from .layers import EVAL, BatchNorm, Dense, Dropout, Layer, ReLU


class Sequential(Layer):
    """Applies layers in order; backward runs them in reverse."""

    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)

    def forward(self, x, mode=EVAL, rng=None):
        for layer in self.layers:
            x = layer.forward(x, mode=mode, rng=rng)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def params(self):
        return self._collect("params")

    def grads(self):
        return self._collect("grads")

    def buffers(self):
        return self._collect("buffers")

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def _collect(self, attr: str) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in getattr(layer, attr)().items():
                out[f"{i}.{name}"] = arr
        return out


def mlp_block(fan_in: int, fan_out: int, dropout_rate: float, rng: np.random.Generator) -> list[Layer]:
    """One hidden block: dense -> batchnorm -> ReLU -> dropout."""
    return [Dense(fan_in, fan_out, rng), BatchNorm(fan_out), ReLU(), Dropout(dropout_rate)]


def n_params(params: dict[str, np.ndarray]) -> int:
    return sum(arr.size for arr in params.values())


def snapshot_state(params: dict[str, np.ndarray], buffers: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Copy all trainable and buffer arrays under a single namespaced dict."""
    state = {f"param:{k}": v.copy() for k, v in params.items()}
    state.update({f"buffer:{k}": v.copy() for k, v in buffers.items()})
    return state


def restore_state(params: dict[str, np.ndarray], buffers: dict[str, np.ndarray], state: dict[str, np.ndarray]) -> None:
    """Write a snapshot back into live arrays, preserving views held elsewhere."""
    for k, arr in params.items():
        np.copyto(arr, state[f"param:{k}"])
    for k, arr in buffers.items():
        np.copyto(arr, state[f"buffer:{k}"])
