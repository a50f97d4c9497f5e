"""Finite-difference verification of the hand-derived backward passes.

The check runs models in eval mode (dropout off, batchnorm on running
stats). For structured models with stop-gradient fusion the numeric side
freezes the auxiliary fusion inputs at their unperturbed values so both
routes differentiate the same function.
"""

from __future__ import annotations

import numpy as np

from ..losses import (RegularizationConfig, TaskWeights, loss_kind_for_task,
                      masked_loss_with_grad, relation_penalty, relation_penalty_grad)
from .layers import EVAL

REL_ERR_FLOOR = 1e-8


def jitter_params(model, rng: np.random.Generator, scale: float = 0.01) -> None:
    """Nudge every parameter off special values (zero biases put preactivations
    exactly on ReLU kinks, where central differences and subgradients disagree)."""
    for arr in model.parameters().values():
        arr += rng.uniform(-scale, scale, size=arr.shape)


def _is_structured(model) -> bool:
    return hasattr(model, "relation_matrix")


def _split_columns(model, targets, mask):
    targets = np.asarray(targets, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if targets.ndim == 1:
        targets = targets[:, None]
        mask = mask[:, None]
    return {t: (targets[:, i], mask[:, i]) for i, t in enumerate(model.task_names)}


def model_loss(model, features, targets, mask, weights: TaskWeights | None = None,
               reg: RegularizationConfig | None = None, fusion_inputs_override=None) -> float:
    """Combined masked multi-task loss (plus relation penalty when reg given)."""
    if weights is None:
        weights = TaskWeights.uniform(model.task_names)
    if fusion_inputs_override is not None:
        preds = model.forward(features, mode=EVAL, fusion_inputs_override=fusion_inputs_override)
    else:
        preds = model.forward(features, mode=EVAL)
    cols = _split_columns(model, targets, mask)
    total = 0.0
    for t, kind in zip(model.task_names, model.task_kinds):
        y, m = cols[t]
        total += weights[t] * masked_loss_with_grad(preds[t], y, m, loss_kind_for_task(kind)).value
    if reg is not None and _is_structured(model):
        total += relation_penalty(model.last_W, reg)
    return total


def analytic_gradients(model, features, targets, mask, weights: TaskWeights | None = None,
                       reg: RegularizationConfig | None = None) -> dict[str, np.ndarray]:
    if weights is None:
        weights = TaskWeights.uniform(model.task_names)
    preds = model.forward(features, mode=EVAL)
    cols = _split_columns(model, targets, mask)
    pred_grads = {}
    for t, kind in zip(model.task_names, model.task_kinds):
        y, m = cols[t]
        ml = masked_loss_with_grad(preds[t], y, m, loss_kind_for_task(kind))
        pred_grads[t] = weights[t] * ml.grad
    model.zero_grads()
    if _is_structured(model):
        rg = relation_penalty_grad(model.last_W, reg) if reg is not None else None
        model.backward(pred_grads, relation_grad=rg)
    else:
        model.backward(pred_grads)
    return {k: v.copy() for k, v in model.grads_dict().items()}


def _fast_loss_fn(model, features, targets, mask, weights, reg, override):
    """Precompile mask selections into a value-only loss closure (the numeric
    loop evaluates it hundreds of thousands of times)."""
    if weights is None:
        weights = TaskWeights.uniform(model.task_names)
    cols = _split_columns(model, targets, mask)
    terms = []
    for t, kind in zip(model.task_names, model.task_kinds):
        y, m = cols[t]
        sel = np.asarray(m, dtype=bool)
        n = int(sel.sum())
        if n:
            terms.append((t, loss_kind_for_task(kind), sel, y[sel], n, weights[t]))
    structured = _is_structured(model) and reg is not None

    def loss_fn() -> float:
        if override is not None:
            preds = model.forward(features, mode=EVAL, fusion_inputs_override=override)
        else:
            preds = model.forward(features, mode=EVAL)
        total = 0.0
        for t, kind, sel, y, n, w in terms:
            p = preds[t][sel]
            if kind == "mse":
                err = p - y
                total += w * (float(np.sum(err * err)) / n)
            else:
                pc = np.clip(p, 1e-7, 1.0 - 1e-7)
                total += w * (float(np.sum(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))) / n)
        if structured:
            total += relation_penalty(model.last_W, reg)
        return total

    return loss_fn


def numeric_gradients(model, features, targets, mask, weights: TaskWeights | None = None,
                      reg: RegularizationConfig | None = None, step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences over every parameter entry."""
    override = None
    if _is_structured(model) and not model.fusion_backprop:
        model.forward(features, mode=EVAL)
        override = {t: v.copy() for t, v in model.last_raw.items()}
    loss_fn = _fast_loss_fn(model, features, targets, mask, weights, reg, override)

    out = {}
    for name, arr in model.parameters().items():
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            up = loss_fn()
            flat[idx] = orig - step
            down = loss_fn()
            flat[idx] = orig
            gflat[idx] = (up - down) / (2.0 * step)
        out[name] = grad
    return out


def max_relative_error(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray]) -> float:
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_ERR_FLOOR)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def finite_diff_check(model, features, targets, mask, weights: TaskWeights | None = None,
                      reg: RegularizationConfig | None = None, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    analytic = analytic_gradients(model, features, targets, mask, weights, reg)
    numeric = numeric_gradients(model, features, targets, mask, weights, reg, step)
    return max_relative_error(analytic, numeric)
