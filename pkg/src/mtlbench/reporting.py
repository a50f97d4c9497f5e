"""Report serialization: JSON round-trip, flat CSV tables, and per-figure
plot-data CSVs. All numbers are written with repr() so emission is
locale-independent and loading reproduces values exactly."""

from __future__ import annotations

import csv
import json
import os
import time
from pathlib import Path

from .errors import ConfigError
from .experiments import ExperimentReport
from .metrics import CLASSIFICATION_THRESHOLD


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def save_report_json(report: ExperimentReport, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    return path


def load_report_json(path) -> ExperimentReport:
    with open(path, encoding="utf-8") as fh:
        return ExperimentReport.from_dict(json.load(fh))


def emit_report(report: ExperimentReport, fmt: str, out_dir) -> list[Path]:
    """Write the report as JSON and/or flat CSV tables; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if fmt not in ("json", "csv", "both"):
        raise ConfigError(f"unknown report format {fmt!r}")
    paths = []
    if fmt in ("json", "both"):
        paths.append(save_report_json(report, out_dir / "report.json"))
    if fmt in ("csv", "both"):
        if report.aggregates:
            paths.append(_write_csv(
                out_dir / "metrics.csv",
                ["task", "model", "metric", "mean", "std", "n_seeds"],
                [(a.task, a.model_kind, a.metric, a.mean, a.std, a.n)
                 for a in report.aggregates]))
        if report.ttests:
            paths.append(_write_csv(
                out_dir / "ttests.csv",
                ["task", "metric", "comparison", "t_statistic", "degrees_of_freedom",
                 "p_value", "significant"],
                [(t.task, t.metric, t.comparison, t.t_statistic, t.degrees_of_freedom,
                  t.p_value, t.significant) for t in report.ttests]))
        if report.relations:
            paths.append(_write_csv(
                out_dir / "relations.csv",
                ["source", "target", "mean", "std", "n_seeds"],
                [(r.source, r.target, r.mean, r.std, r.n) for r in report.relations]))
        if report.sweep:
            rows = []
            for point in report.sweep:
                for a in point.aggregates:
                    rows.append((point.majority_count, point.ratio, a.task, a.metric,
                                 a.mean, a.std, a.n))
            paths.append(_write_csv(
                out_dir / "sweep.csv",
                ["majority_count", "ratio", "task", "metric", "mean", "std", "n_seeds"],
                rows))
        if report.conflict:
            paths.append(_write_csv(
                out_dir / "conflict.csv",
                ["task_a", "task_b", "seed", "mean_cosine", "std_cosine", "n_steps"],
                [(c.task_a, c.task_b, c.seed, c.mean, c.std, c.n_steps)
                 for c in report.conflict]))
    return paths


def emit_plot_data(report: ExperimentReport, out_dir) -> list[Path]:
    """Per-figure CSVs derived from the report's raw dumps; studies absent
    from the report are skipped with a notice."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    if report.curves:
        rows = []
        for c in report.curves:
            rows.append((c.model_kind, c.task, c.seed, c.epoch, "train", c.train_loss))
            rows.append((c.model_kind, c.task, c.seed, c.epoch, "val", c.val_loss))
        paths.append(_write_csv(out_dir / "training_curves.csv",
                                ["model", "task", "seed", "epoch", "split", "loss"], rows))
    else:
        print("note: no training curves in report; skipping training_curves.csv")

    if report.predictions:
        rows = []
        conf_rows = []
        for dump in report.predictions:
            for yt, yp in zip(dump.y_true, dump.y_pred):
                rows.append((dump.model_kind, dump.task, dump.seed, yt, yp, yp - yt))
            if set(dump.y_true) <= {0.0, 1.0}:
                tp = fp = fn = tn = 0
                for yt, yp in zip(dump.y_true, dump.y_pred):
                    hard = yp >= CLASSIFICATION_THRESHOLD
                    if hard and yt == 1.0:
                        tp += 1
                    elif hard:
                        fp += 1
                    elif yt == 1.0:
                        fn += 1
                    else:
                        tn += 1
                conf_rows.append((dump.model_kind, dump.task, dump.seed, tn, fp, fn, tp))
        paths.append(_write_csv(out_dir / "error_distributions.csv",
                                ["model", "task", "seed", "y_true", "y_pred", "residual"],
                                rows))
        if conf_rows:
            paths.append(_write_csv(out_dir / "confusion.csv",
                                    ["model", "task", "seed", "tn", "fp", "fn", "tp"],
                                    conf_rows))
    else:
        print("note: no prediction dumps in report; skipping error_distributions.csv")

    if report.sweep:
        rows = []
        for point in report.sweep:
            r2 = {a.metric: a for a in point.aggregates}.get("r2")
            if r2 is not None:
                rows.append((point.majority_count, point.ratio, r2.mean, r2.std))
        paths.append(_write_csv(out_dir / "sweep_curve.csv",
                                ["majority_count", "ratio", "r2_mean", "r2_std"], rows))
    else:
        print("note: no imbalance sweep in report; skipping sweep_curve.csv")

    if report.conflict_matrix:
        tasks = report.conflict_tasks
        rows = [[t] + list(row) for t, row in zip(tasks, report.conflict_matrix)]
        paths.append(_write_csv(out_dir / "cosine_matrix.csv", ["task"] + tasks, rows))
    else:
        print("note: no gradient-conflict data in report; skipping cosine_matrix.csv")

    transfer_aggs = [a for a in report.aggregates if a.model_kind in ("transfer", "scratch")]
    if transfer_aggs:
        paths.append(_write_csv(out_dir / "transfer_bars.csv",
                                ["arm", "task", "metric", "mean", "std"],
                                [(a.model_kind, a.task, a.metric, a.mean, a.std)
                                 for a in transfer_aggs]))
    return paths


def make_run_dir(base, experiment_id: str) -> Path:
    """Create a fresh run directory named by experiment id and timestamp;
    existing directories are never reused or overwritten."""
    base = Path(base)
    base.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    for k in range(1000):
        suffix = "" if k == 0 else f"-{k}"
        candidate = base / f"{experiment_id}-{stamp}{suffix}"
        try:
            os.makedirs(candidate)
            return candidate
        except FileExistsError:
            continue
    raise ConfigError(f"could not allocate a run directory under {base}")
