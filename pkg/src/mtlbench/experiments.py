"""Study orchestration: the three-way model comparison, learned-relation
extraction, and the three negative-transfer diagnostics (imbalance sweep,
gradient-conflict analysis, transfer-utility assessment)."""

from __future__ import annotations

import time
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__
from .data import Dataset, apply_normalize, downsample_task, fit_normalize, stratified_split
from .errors import ConfigError
from .losses import TaskWeights
from .metrics import (AggregateRecord, MetricRecord, aggregate_seeds, metric_names_for,
                      paired_t_test)
from .models import INDEPENDENT, STANDARD_MTL, STRUCTURED_MTL, compute_task_relation_matrix
from .training import TrainConfig, evaluate_metrics, pretrain_and_transfer, predict, train

COMPARISONS = ((STRUCTURED_MTL, INDEPENDENT), (STRUCTURED_MTL, STANDARD_MTL))


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    split_seed: int = 42
    ratios: tuple = (0.70, 0.15, 0.15)
    data_descriptor: dict = field(default_factory=dict)
    conflict_stride: int = 1

    def snapshot(self) -> dict:
        snap = asdict(self)
        snap["ratios"] = list(self.ratios)
        snap["train"]["seeds"] = list(self.train.seeds)
        tw = self.train.task_weights
        snap["train"]["task_weights"] = tw.weights if isinstance(tw, TaskWeights) else tw
        return snap


@dataclass
class TTestRecord:
    task: str
    metric: str
    comparison: str
    t_statistic: float
    degrees_of_freedom: int
    p_value: float
    significant: bool
    degenerate: bool


@dataclass
class RelationRecord:
    source: str
    target: str
    mean: float
    std: float
    n: int


@dataclass
class PredictionDump:
    model_kind: str
    seed: int
    task: str
    y_true: list
    y_pred: list


@dataclass
class CurvePoint:
    model_kind: str
    task: str  # "" for joint models
    seed: int
    epoch: int
    train_loss: float
    val_loss: float
    learning_rate: float


@dataclass
class SweepPointRecord:
    majority_count: int
    ratio: float
    records: list  # MetricRecord, minority task
    aggregates: list  # AggregateRecord


@dataclass
class ConflictPairStats:
    task_a: str
    task_b: str
    seed: int  # -1 marks the pooled summary over all seeds
    mean: float
    std: float
    n_steps: int


@dataclass
class ExperimentReport:
    experiment_id: str
    config_snapshot: dict
    provenance: dict
    records: list = field(default_factory=list)
    aggregates: list = field(default_factory=list)
    ttests: list = field(default_factory=list)
    relations: list = field(default_factory=list)
    sweep: list = field(default_factory=list)
    conflict: list = field(default_factory=list)
    conflict_tasks: list = field(default_factory=list)
    conflict_matrix: list = field(default_factory=list)
    predictions: list = field(default_factory=list)
    curves: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = asdict(self)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(
            experiment_id=d["experiment_id"],
            config_snapshot=d["config_snapshot"],
            provenance=d["provenance"],
            records=[MetricRecord(**r) for r in d["records"]],
            aggregates=[AggregateRecord(**r) for r in d["aggregates"]],
            ttests=[TTestRecord(**r) for r in d["ttests"]],
            relations=[RelationRecord(**r) for r in d["relations"]],
            sweep=[SweepPointRecord(majority_count=s["majority_count"], ratio=s["ratio"],
                                    records=[MetricRecord(**r) for r in s["records"]],
                                    aggregates=[AggregateRecord(**a) for a in s["aggregates"]])
                   for s in d["sweep"]],
            conflict=[ConflictPairStats(**c) for c in d["conflict"]],
            conflict_tasks=d["conflict_tasks"],
            conflict_matrix=d["conflict_matrix"],
            predictions=[PredictionDump(**p) for p in d["predictions"]],
            curves=[CurvePoint(**c) for c in d["curves"]],
        )


def _provenance(cfg: ExperimentConfig) -> dict:
    return {
        "package_version": __version__,
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "seeds": list(cfg.train.seeds),
    }


def prepare_splits(dataset: Dataset, cfg: ExperimentConfig):
    """Stratified split plus train-fitted normalization applied to all parts."""
    train_ds, val_ds, test_ds = stratified_split(dataset, cfg.ratios, cfg.split_seed)
    stats = fit_normalize(train_ds)
    return (apply_normalize(train_ds, stats), apply_normalize(val_ds, stats),
            apply_normalize(test_ds, stats))


def _metric_records(model_kind: str, seed: int, metrics_by_task: dict) -> list:
    out = []
    for task, metrics in metrics_by_task.items():
        for name, value in metrics.items():
            out.append(MetricRecord(task, model_kind, seed, name, float(value)))
    return out


def _prediction_dumps(model, test_ds: Dataset, model_kind: str, seed: int) -> list:
    preds = predict(model, test_ds)
    dumps = []
    for j, task in enumerate(test_ds.task_names):
        if task not in model.task_names:
            continue
        sel = test_ds.mask[:, j] == 1.0
        if not sel.any():
            continue
        dumps.append(PredictionDump(model_kind, seed, task,
                                    [float(v) for v in test_ds.targets[sel, j]],
                                    [float(v) for v in preds[task][sel]]))
    return dumps


def _curve_points(history, model_kind: str, seed: int, task: str = "") -> list:
    return [CurvePoint(model_kind, task, seed, r.epoch, float(r.train_loss),
                       float(r.val_loss), float(r.learning_rate))
            for r in history.records]


def _paired_tests(records: list, task_names, task_kinds, seeds) -> list:
    by_key = {}
    for r in records:
        by_key.setdefault((r.task, r.model_kind, r.metric), {})[r.seed] = r.value
    out = []
    for task, kind in zip(task_names, task_kinds):
        for metric in metric_names_for(kind):
            for kind_a, kind_b in COMPARISONS:
                key_a = (task, kind_a, metric)
                key_b = (task, kind_b, metric)
                if key_a not in by_key or key_b not in by_key:
                    continue
                a = [by_key[key_a][s] for s in seeds]
                b = [by_key[key_b][s] for s in seeds]
                if len(a) < 2 or not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                    continue
                res = paired_t_test(a, b)
                out.append(TTestRecord(task, metric, f"{kind_a}_vs_{kind_b}",
                                       float(res.t_statistic), res.degrees_of_freedom,
                                       float(res.p_value), res.significant, res.degenerate))
    return out


def run_main_comparison(dataset: Dataset, cfg: ExperimentConfig) -> ExperimentReport:
    """Train all three model kinds across all seeds; aggregate and test.

    Independent baselines train per task on that task's labeled subset
    only. Learned relation matrices from the structured models are
    aggregated per ordered task pair (the Table 4 analog).
    """
    if len(dataset.task_names) < 2:
        raise ConfigError("the comparison needs at least 2 tasks")
    splits = prepare_splits(dataset, cfg)
    train_ds, val_ds, test_ds = splits
    report = ExperimentReport("main_comparison", cfg.snapshot(), _provenance(cfg))
    relation_matrices = []

    for seed in cfg.train.seeds:
        for task in dataset.task_names:
            sub_train = train_ds.project([task])
            sub_val = val_ds.project([task])
            sub_test = test_ds.project([task])
            model, history = train(INDEPENDENT, sub_train, sub_val, cfg.train, seed)
            report.records += _metric_records(INDEPENDENT, seed,
                                              evaluate_metrics(model, sub_test))
            report.predictions += _prediction_dumps(model, sub_test, INDEPENDENT, seed)
            report.curves += _curve_points(history, INDEPENDENT, seed, task)

        for kind in (STANDARD_MTL, STRUCTURED_MTL):
            model, history = train(kind, train_ds, val_ds, cfg.train, seed)
            report.records += _metric_records(kind, seed, evaluate_metrics(model, test_ds))
            report.predictions += _prediction_dumps(model, test_ds, kind, seed)
            report.curves += _curve_points(history, kind, seed)
            if kind == STRUCTURED_MTL:
                relation_matrices.append(compute_task_relation_matrix(model))

    report.aggregates = aggregate_seeds(report.records)
    report.ttests = _paired_tests(report.records, dataset.task_names, dataset.task_kinds,
                                  cfg.train.seeds)
    report.relations = extract_task_relations(relation_matrices)
    return report


def extract_task_relations(graphs) -> list:
    """Per ordered task pair, mean and sample std of w_ij across trained models."""
    if not graphs:
        raise ConfigError("need at least one trained structured model")
    task_names = graphs[0].task_names
    stack = np.stack([np.asarray(g.matrix, dtype=np.float64) for g in graphs])
    if stack.shape[0] == 1:
        warnings.warn("single relation matrix: std reported as 0", stacklevel=2)
    out = []
    for i, target in enumerate(task_names):
        for j, source in enumerate(task_names):
            values = stack[:, i, j]
            std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
            out.append(RelationRecord(source, target, float(values.mean()), std, len(values)))
    return out


def run_relations(dataset: Dataset, cfg: ExperimentConfig) -> ExperimentReport:
    """Train structured models across seeds and extract learned relations."""
    splits = prepare_splits(dataset, cfg)
    train_ds, val_ds, test_ds = splits
    report = ExperimentReport("relations", cfg.snapshot(), _provenance(cfg))
    graphs = []
    for seed in cfg.train.seeds:
        model, history = train(STRUCTURED_MTL, train_ds, val_ds, cfg.train, seed)
        graphs.append(compute_task_relation_matrix(model))
        report.records += _metric_records(STRUCTURED_MTL, seed,
                                          evaluate_metrics(model, test_ds))
        report.curves += _curve_points(history, STRUCTURED_MTL, seed)
    report.aggregates = aggregate_seeds(report.records)
    report.relations = extract_task_relations(graphs)
    return report


def pick_minority_task(train_ds: Dataset, majority_task: str) -> str:
    counts = train_ds.labeled_counts()
    others = {t: c for t, c in counts.items() if t != majority_task}
    if not others:
        raise ConfigError("no minority task available")
    return min(others, key=lambda t: (others[t], train_ds.task_index(t)))


def run_imbalance_sweep(dataset: Dataset, majority_task: str, counts,
                        cfg: ExperimentConfig, minority_task: str | None = None) -> ExperimentReport:
    """Downsample the majority task's training samples to each count and
    retrain the shared-backbone model across seeds, recording the minority
    task's metrics; the split and its holdouts stay fixed."""
    raw_train, raw_val, raw_test = stratified_split(dataset, cfg.ratios, cfg.split_seed)
    available = raw_train.labeled_counts().get(majority_task, 0)
    counts = [int(c) for c in counts]
    too_big = [c for c in counts if c > available]
    if too_big:
        raise ConfigError(
            f"sweep counts {too_big} exceed the {available} labeled "
            f"training samples for {majority_task!r}")
    if minority_task is None:
        minority_task = pick_minority_task(raw_train, majority_task)
    minority_count = raw_train.labeled_counts()[minority_task]

    # Task weights are pinned to the undownsampled training split, so the
    # only variable across sweep points is the amount of majority data.
    fixed_weights = cfg.train.resolve_weights(raw_train)
    point_train = replace(cfg.train, task_weights=fixed_weights)

    report = ExperimentReport("imbalance_sweep", cfg.snapshot(), _provenance(cfg))
    report.config_snapshot["sweep"] = {
        "majority_task": majority_task,
        "minority_task": minority_task,
        "counts": counts,
        "task_weights": dict(fixed_weights.weights),
    }
    for count in counts:
        ds_train = downsample_task(raw_train, majority_task, count, seed=cfg.split_seed)
        stats = fit_normalize(ds_train)
        tr = apply_normalize(ds_train, stats)
        va = apply_normalize(raw_val, stats)
        te = apply_normalize(raw_test, stats)
        point_records = []
        for seed in cfg.train.seeds:
            model, _ = train(STANDARD_MTL, tr, va, point_train, seed)
            metrics = evaluate_metrics(model, te)
            point_records += _metric_records(STANDARD_MTL, seed,
                                             {minority_task: metrics[minority_task]})
        point = SweepPointRecord(count, count / minority_count, point_records,
                                 aggregate_seeds(point_records))
        report.sweep.append(point)
        report.records += point_records
    return report


class _ConflictProbe:
    """Accumulates inter-task backbone-gradient cosines during training."""

    def __init__(self, task_names, stride: int = 1):
        self.task_names = list(task_names)
        self.stride = max(1, stride)
        self._step = 0
        self.sums = {}  # (a, b) -> [n, sum, sumsq]

    def _backbone_grad(self, model) -> np.ndarray:
        grads = model.grads_dict()
        return np.concatenate([grads[k].ravel()
                               for k in sorted(grads) if k.startswith("backbone.")])

    def __call__(self, model, task_losses, epoch, step):
        self._step += 1
        if (self._step - 1) % self.stride:
            return
        present = [t for t in self.task_names if task_losses[t].n_labeled > 0]
        if not present:
            return
        vecs = {}
        for t in present:
            model.zero_grads()
            model.backward({name: (task_losses[name].grad if name == t
                                   else np.zeros_like(task_losses[name].grad))
                            for name in self.task_names})
            vecs[t] = self._backbone_grad(model)
        norms_sq = {t: float(np.dot(vecs[t], vecs[t])) for t in present}
        for i, a in enumerate(present):
            for b in present[i:]:
                if norms_sq[a] == 0.0 or norms_sq[b] == 0.0:
                    continue
                # sqrt(d*d) == d exactly for correctly rounded IEEE sqrt, so
                # self-pairs come out as exactly 1.0
                cos = float(np.dot(vecs[a], vecs[b]) / np.sqrt(norms_sq[a] * norms_sq[b]))
                acc = self.sums.setdefault((a, b), [0, 0.0, 0.0])
                acc[0] += 1
                acc[1] += cos
                acc[2] += cos * cos

    def stats(self, seed: int) -> list:
        out = []
        for (a, b), (n, s, s2) in sorted(self.sums.items()):
            mean = s / n
            var = max(s2 / n - mean * mean, 0.0)
            std = float(np.sqrt(var * n / (n - 1))) if n > 1 else 0.0
            out.append(ConflictPairStats(a, b, seed, float(mean), std, n))
        return out


def run_gradient_conflict(dataset: Dataset, cfg: ExperimentConfig) -> ExperimentReport:
    """Cosine similarity between per-task loss gradients on the shared
    backbone, recorded at every step where both tasks have labels in the
    batch; self-pairs serve as a harness check (must be exactly 1)."""
    if len(dataset.task_names) < 2:
        raise ConfigError("gradient conflict needs at least 2 tasks")
    splits = prepare_splits(dataset, cfg)
    train_ds, val_ds, _ = splits
    report = ExperimentReport("gradient_conflict", cfg.snapshot(), _provenance(cfg))
    report.conflict_tasks = list(dataset.task_names)
    pooled = {}
    for seed in cfg.train.seeds:
        probe = _ConflictProbe(dataset.task_names, cfg.conflict_stride)
        train(STANDARD_MTL, train_ds, val_ds, cfg.train, seed, step_hook=probe)
        report.conflict += probe.stats(seed)
        for pair, acc in probe.sums.items():
            agg = pooled.setdefault(pair, [0, 0.0, 0.0])
            for i in range(3):
                agg[i] += acc[i]

    T = len(dataset.task_names)
    matrix = [[float("nan")] * T for _ in range(T)]
    for (a, b), (n, s, s2) in sorted(pooled.items()):
        mean = s / n
        var = max(s2 / n - mean * mean, 0.0)
        std = float(np.sqrt(var * n / (n - 1))) if n > 1 else 0.0
        report.conflict.append(ConflictPairStats(a, b, -1, float(mean), std, n))
        ia, ib = dataset.task_names.index(a), dataset.task_names.index(b)
        matrix[ia][ib] = matrix[ib][ia] = float(mean)
    report.conflict_matrix = matrix
    return report


def run_transfer_utility(dataset: Dataset, source: str, target: str,
                         cfg: ExperimentConfig) -> ExperimentReport:
    """Pre-train-and-transfer versus from-scratch on the target task, across
    seeds, with a paired t-test between the arms."""
    splits = prepare_splits(dataset, cfg)
    report = ExperimentReport("transfer_utility", cfg.snapshot(), _provenance(cfg))
    report.config_snapshot["transfer"] = {"source": source, "target": target}
    for seed in cfg.train.seeds:
        outcome = pretrain_and_transfer(source, target, splits, cfg.train, seed)
        report.records += _metric_records("transfer", seed, {target: outcome.transfer_metrics})
        report.records += _metric_records("scratch", seed, {target: outcome.scratch_metrics})
        report.curves += _curve_points(outcome.pretrain_history, "pretrain", seed, source)
        report.curves += _curve_points(outcome.transfer_history, "transfer", seed, target)
        report.curves += _curve_points(outcome.scratch_history, "scratch", seed, target)
    report.aggregates = aggregate_seeds(report.records)

    by_key = {}
    for r in report.records:
        by_key.setdefault((r.model_kind, r.metric), {})[r.seed] = r.value
    kind = dataset.kind_of(target)
    for metric in metric_names_for(kind):
        a = [by_key[("transfer", metric)][s] for s in cfg.train.seeds]
        b = [by_key[("scratch", metric)][s] for s in cfg.train.seeds]
        if len(a) >= 2 and np.all(np.isfinite(a)) and np.all(np.isfinite(b)):
            res = paired_t_test(a, b)
            report.ttests.append(TTestRecord(target, metric, "transfer_vs_scratch",
                                             float(res.t_statistic), res.degrees_of_freedom,
                                             float(res.p_value), res.significant,
                                             res.degenerate))
    return report
