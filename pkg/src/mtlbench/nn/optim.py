"""Adam with L2 weight decay folded into the gradient."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, NumericError


@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_adam(params: dict[str, np.ndarray], beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8) -> AdamState:
    return AdamState(
        first_moment={k: np.zeros_like(v) for k, v in params.items()},
        second_moment={k: np.zeros_like(v) for k, v in params.items()},
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              learning_rate: float, weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update, in place.

    Weight decay is applied as an L2 term added to the gradient
    (g <- g + weight_decay * theta) before the moment updates. Raises
    NumericError on non-finite gradients without touching any state.
    """
    if params.keys() != grads.keys() or params.keys() != state.first_moment.keys():
        raise ConfigError("params, grads and Adam state must share the same keys")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}; step aborted")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for name, theta in params.items():
        g = grads[name]
        if weight_decay != 0.0:
            g = g + weight_decay * theta
        m = state.first_moment[name]
        v = state.second_moment[name]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        theta -= learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
