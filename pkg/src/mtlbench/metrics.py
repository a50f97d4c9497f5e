"""Evaluation metrics, seed aggregation, and paired significance testing."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

from .errors import ConfigError

ALPHA = 0.05
CLASSIFICATION_THRESHOLD = 0.5

REGRESSION_METRICS = ("rmse", "mae", "r2")
CLASSIFICATION_METRICS = ("accuracy", "f1", "auc", "recall")


@dataclass
class MetricRecord:
    task: str
    model_kind: str
    seed: int
    metric: str
    value: float


@dataclass
class TTestResult:
    t_statistic: float
    degrees_of_freedom: int
    p_value: float
    significant: bool
    degenerate: bool = False


def metric_names_for(task_kind: str) -> tuple[str, ...]:
    return CLASSIFICATION_METRICS if task_kind == "classification" else REGRESSION_METRICS


def regression_metrics(preds, targets) -> dict[str, float]:
    """RMSE, MAE and R^2 = 1 - SSE/SST (SST about the target mean)."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.size == 0:
        raise ConfigError("preds and targets must be equal-length and non-empty")
    err = preds - targets
    rmse = float(np.sqrt(np.mean(err * err)))
    mae = float(np.mean(np.abs(err)))
    sst = float(np.sum((targets - targets.mean()) ** 2))
    if sst == 0.0:
        warnings.warn("constant targets: R^2 is undefined", stacklevel=2)
        r2 = float("nan")
    else:
        r2 = 1.0 - float(np.sum(err * err)) / sst
    return {"rmse": rmse, "mae": mae, "r2": r2}


def classification_metrics(probs, labels, threshold: float = CLASSIFICATION_THRESHOLD) -> dict[str, float]:
    """Threshold metrics at 0.5 plus rank-statistic AUC (ties get half credit)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape or probs.size == 0:
        raise ConfigError("probs and labels must be equal-length and non-empty")
    if probs.min() < 0.0 or probs.max() > 1.0:
        raise ConfigError("probs must lie in [0,1]")
    if not set(np.unique(labels)) <= {0.0, 1.0}:
        raise ConfigError("labels must be 0 or 1")

    pred_pos = probs >= threshold
    pos = labels == 1.0
    tp = float(np.sum(pred_pos & pos))
    fp = float(np.sum(pred_pos & ~pos))
    fn = float(np.sum(~pred_pos & pos))
    tn = float(np.sum(~pred_pos & ~pos))
    accuracy = (tp + tn) / labels.size
    recall = tp / (tp + fn) if (tp + fn) > 0 else float("nan")
    if tp + fp == 0:
        f1 = 0.0  # no predicted positives
    else:
        precision = tp / (tp + fp)
        f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return {"accuracy": accuracy, "f1": f1, "auc": auc_score(probs, labels), "recall": recall}


def auc_score(probs, labels) -> float:
    """Probability that a random positive outranks a random negative (Mann-Whitney)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    pos = probs[labels == 1.0]
    neg = probs[labels == 0.0]
    if pos.size == 0 or neg.size == 0:
        warnings.warn("AUC undefined with a single class", stacklevel=2)
        return float("nan")
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (pos.size * neg.size))


def student_t_sf(t_abs: float, df: int) -> float:
    """One-sided tail P(T > t_abs) via the regularized incomplete beta function."""
    x = df / (df + t_abs * t_abs)
    return 0.5 * float(betainc(df / 2.0, 0.5, x))


def paired_t_test(values_a, values_b, alpha: float = ALPHA) -> TTestResult:
    """Two-tailed paired t-test; pairs must be aligned (e.g. by seed).

    Degenerate zero-variance differences give p = 1 when the mean difference
    is 0 and p = 0 otherwise, with the ``degenerate`` flag set.
    """
    a = np.asarray(values_a, dtype=np.float64)
    b = np.asarray(values_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ConfigError("paired t-test needs two equal-length vectors, n >= 2")
    d = a - b
    n = d.size
    df = n - 1
    sd = float(d.std(ddof=1))
    mean = float(d.mean())
    if sd == 0.0:
        p = 1.0 if mean == 0.0 else 0.0
        t = 0.0 if mean == 0.0 else float("inf") * np.sign(mean)
        return TTestResult(t, df, p, p < alpha, degenerate=True)
    t = mean / (sd / np.sqrt(n))
    p = 2.0 * student_t_sf(abs(t), df)
    return TTestResult(float(t), df, float(p), p < alpha)


@dataclass
class AggregateRecord:
    task: str
    model_kind: str
    metric: str
    mean: float
    std: float
    n: int


def aggregate_seeds(records: list[MetricRecord]) -> list[AggregateRecord]:
    """Group by (task, model, metric); mean and sample (n-1) std per group.

    Groups appear in first-seen order; single-record groups report std 0
    with a warning.
    """
    groups: dict[tuple, list[float]] = {}
    for rec in records:
        groups.setdefault((rec.task, rec.model_kind, rec.metric), []).append(rec.value)
    out = []
    for (task, model, metric), values in groups.items():
        arr = np.asarray(values, dtype=np.float64)
        if arr.size == 1:
            warnings.warn(f"single record for ({task}, {model}, {metric}); std set to 0",
                          stacklevel=2)
            std = 0.0
        else:
            std = float(arr.std(ddof=1))
        out.append(AggregateRecord(task, model, metric, float(arr.mean()), std, arr.size))
    return out
