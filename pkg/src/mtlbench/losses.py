"""Masked per-task losses, weighted multi-task combination, relation regularization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ConfigError

BCE_CLAMP = 1e-7

TASK_KINDS = ("regression", "classification")
LOSS_KINDS = ("mse", "bce")


def loss_kind_for_task(task_kind: str) -> str:
    if task_kind == "regression":
        return "mse"
    if task_kind == "classification":
        return "bce"
    raise ConfigError(f"unknown task kind {task_kind!r}")


@dataclass
class MaskedTaskLoss:
    """Value and gradient of a masked loss over one task.

    ``grad`` is d(value)/d(preds), full length, zero at masked-out indices.
    A batch with no labels for the task yields the zero-contribution
    sentinel: value 0, gradient 0 (0/0 := 0).
    """

    value: float
    grad: np.ndarray
    n_labeled: int

    @property
    def zero_contribution(self) -> bool:
        return self.n_labeled == 0


def masked_loss_with_grad(preds: np.ndarray, targets: np.ndarray, mask: np.ndarray,
                          kind: str) -> MaskedTaskLoss:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    sel = np.asarray(mask, dtype=bool)
    if not (preds.shape == targets.shape == sel.shape):
        raise ConfigError("preds, targets and mask must have equal shapes")
    n = int(sel.sum())
    grad = np.zeros_like(preds)
    if n == 0:
        return MaskedTaskLoss(0.0, grad, 0)

    p = preds[sel]
    y = targets[sel]
    if kind == "mse":
        err = p - y
        value = float(np.sum(err * err) / n)
        grad[sel] = 2.0 * err / n
    elif kind == "bce":
        pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
        value = float(np.sum(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))) / n)
        grad[sel] = (pc - y) / (pc * (1.0 - pc)) / n
    else:
        raise ConfigError(f"unknown loss kind {kind!r}")
    return MaskedTaskLoss(value, grad, n)


def masked_loss(preds: np.ndarray, targets: np.ndarray, mask: np.ndarray, kind: str) -> float:
    """Masked mean loss: sum_i m_i * l(y_i, p_i) / sum_i m_i, with 0/0 := 0."""
    return masked_loss_with_grad(preds, targets, mask, kind).value


@dataclass
class TaskWeights:
    """Positive per-task loss weights."""

    weights: dict[str, float]

    def __post_init__(self):
        for task, w in self.weights.items():
            if not w > 0:
                raise ConfigError(f"task weight for {task!r} must be positive, got {w}")

    def __getitem__(self, task: str) -> float:
        return self.weights[task]

    @classmethod
    def uniform(cls, task_names) -> "TaskWeights":
        return cls({t: 1.0 for t in task_names})

    @classmethod
    def from_counts(cls, counts: Mapping[str, int]) -> "TaskWeights":
        """Weights inversely proportional to labeled-sample counts, majority task at 1.0."""
        biggest = max(counts.values())
        return cls({t: biggest / n for t, n in counts.items()})


def combined_mtl_loss(task_losses: Mapping[str, float], weights: TaskWeights) -> float:
    """Weighted sum of per-task losses; zero-contribution tasks add nothing."""
    total = 0.0
    for task, loss in task_losses.items():
        value = loss.value if isinstance(loss, MaskedTaskLoss) else float(loss)
        total += weights[task] * value
    return total


@dataclass
class RegularizationConfig:
    """Relation-matrix penalties: lambda1 on ||W||_1, lambda2 on the trace term.

    ``trace_sign=+1`` keeps the trace term as lambda2 * (1 - tr(W)), which
    rewards large diagonal entries; ``-1`` flips it to lambda2 * tr(W),
    penalizing self-loops instead.
    """

    lambda1: float = 0.01
    lambda2: float = 0.1
    trace_sign: int = 1

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("regularization strengths must be non-negative")
        if self.trace_sign not in (1, -1):
            raise ConfigError("trace_sign must be +1 or -1")


def relation_penalty(W: np.ndarray, reg: RegularizationConfig) -> float:
    W = np.asarray(getattr(W, "matrix", W), dtype=np.float64)
    l1 = float(np.abs(W).sum())
    tr = float(np.trace(W))
    if reg.trace_sign == 1:
        return reg.lambda1 * l1 + reg.lambda2 * (1.0 - tr)
    return reg.lambda1 * l1 + reg.lambda2 * tr


def relation_penalty_grad(W: np.ndarray, reg: RegularizationConfig) -> np.ndarray:
    W = np.asarray(getattr(W, "matrix", W), dtype=np.float64)
    grad = reg.lambda1 * np.sign(W)
    diag = -reg.lambda2 if reg.trace_sign == 1 else reg.lambda2
    grad[np.diag_indices_from(grad)] += diag
    return grad


def structured_loss(mtl_loss: float, W: np.ndarray, reg: RegularizationConfig) -> float:
    """Multi-task loss plus relation-matrix regularization."""
    return float(mtl_loss) + relation_penalty(W, reg)
