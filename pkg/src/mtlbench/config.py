"""Run configuration: a TOML file with [data], [train], [model] and
[experiment] sections, plus command-line overrides."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import (Dataset, SyntheticSpec, alloy_schema, generate_synthetic,
                   generic_schema, load_csv)
from .errors import ConfigError
from .experiments import ExperimentConfig
from .losses import RegularizationConfig, TaskWeights
from .models import ModelConfig
from .training import DEFAULT_SEEDS, SchedulerConfig, TrainConfig

_DATA_KEYS = {"csv", "schema", "synthetic", "feature_dim", "task_names", "task_kinds",
              "task_counts", "relatedness", "teacher_width", "noise_std",
              "classification_balance", "seed"}
_TRAIN_KEYS = {"learning_rate", "batch_size", "max_epochs", "early_stop_patience",
               "weight_decay", "seeds", "task_weights", "scheduler_factor",
               "scheduler_patience", "scheduler_min_lr", "scheduler_threshold",
               "alpha", "lambda1", "lambda2", "trace_sign", "fusion_backprop"}
_MODEL_KEYS = {"hidden", "head_hidden", "embed_dim", "gcn_hidden", "edge_hidden",
               "fusion_hidden", "dropout"}
_EXPERIMENT_KEYS = {"split_seed", "out_dir", "report_format", "sweep_counts",
                    "sweep_majority_task", "sweep_minority_task", "transfer_source",
                    "transfer_target", "conflict_stride"}


@dataclass
class RunConfig:
    data: dict
    experiment: ExperimentConfig
    out_dir: str | None = None
    report_format: str = "both"
    sweep_counts: list = field(default_factory=list)
    sweep_majority_task: str | None = None
    sweep_minority_task: str | None = None
    transfer_source: str | None = None
    transfer_target: str | None = None
    raw_task_weights: object = "inverse_count"

    def load_dataset(self) -> Dataset:
        """Materialize the configured data source."""
        data = self.data
        if "csv" in data:
            schema_name = data.get("schema", "alloy")
            if schema_name == "alloy":
                schema = alloy_schema()
            elif schema_name == "generic":
                try:
                    schema = generic_schema(int(data["feature_dim"]),
                                            list(data["task_names"]),
                                            list(data["task_kinds"]))
                except KeyError as missing:
                    raise ConfigError(
                        f"generic csv schema needs {missing} in the [data] section") from None
            else:
                raise ConfigError(f"unknown schema {schema_name!r}; use alloy or generic")
            return load_csv(data["csv"], schema)
        return generate_synthetic(self.synthetic_spec())

    def synthetic_spec(self) -> SyntheticSpec:
        data = self.data
        try:
            return SyntheticSpec(
                feature_dim=int(data.get("feature_dim", 21)),
                task_names=list(data["task_names"]),
                task_kinds=list(data["task_kinds"]),
                task_counts=[int(c) for c in data["task_counts"]],
                relatedness=float(data.get("relatedness", 0.5)),
                teacher_width=int(data.get("teacher_width", 16)),
                noise_std=float(data.get("noise_std", 0.1)),
                classification_balance=float(data.get("classification_balance", 0.3)),
                seed=int(data.get("seed", 0)),
            )
        except KeyError as missing:
            raise ConfigError(f"synthetic data needs {missing} in the [data] section") from None

    def resolve_task_weights(self, ds: Dataset) -> None:
        """Turn a positional weight list into named weights once tasks are known."""
        raw = self.raw_task_weights
        if isinstance(raw, (list, tuple)):
            if len(raw) != len(ds.task_names):
                raise ConfigError(
                    f"task_weights lists {len(raw)} values for {len(ds.task_names)} tasks")
            self.experiment.train.task_weights = TaskWeights(
                {t: float(w) for t, w in zip(ds.task_names, raw)})
        else:
            self.experiment.train.task_weights = raw


def _check_keys(section: str, table: dict, allowed: set) -> None:
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"{path}: invalid TOML ({err})") from None
    known_sections = {"data", "train", "model", "experiment"}
    _check_keys("<top level>", doc, known_sections)

    data = dict(doc.get("data", {}))
    _check_keys("data", data, _DATA_KEYS)
    if ("csv" in data) == bool(data.get("synthetic", False)):
        raise ConfigError("[data] must set exactly one source: csv = \"...\" or synthetic = true")

    train_tbl = dict(doc.get("train", {}))
    _check_keys("train", train_tbl, _TRAIN_KEYS)
    model_tbl = dict(doc.get("model", {}))
    _check_keys("model", model_tbl, _MODEL_KEYS)
    exp_tbl = dict(doc.get("experiment", {}))
    _check_keys("experiment", exp_tbl, _EXPERIMENT_KEYS)

    model_cfg = ModelConfig(
        hidden=int(model_tbl.get("hidden", 128)),
        head_hidden=int(model_tbl.get("head_hidden", 64)),
        embed_dim=int(model_tbl.get("embed_dim", 64)),
        gcn_hidden=int(model_tbl.get("gcn_hidden", 64)),
        edge_hidden=int(model_tbl.get("edge_hidden", 32)),
        fusion_hidden=int(model_tbl.get("fusion_hidden", 16)),
        dropout=float(model_tbl.get("dropout", 0.3)),
    )
    scheduler = SchedulerConfig(
        factor=float(train_tbl.get("scheduler_factor", 0.5)),
        patience=int(train_tbl.get("scheduler_patience", 10)),
        min_lr=float(train_tbl.get("scheduler_min_lr", 1e-6)),
        threshold=float(train_tbl.get("scheduler_threshold", 1e-4)),
    )
    regularization = RegularizationConfig(
        lambda1=float(train_tbl.get("lambda1", 0.01)),
        lambda2=float(train_tbl.get("lambda2", 0.1)),
        trace_sign=int(train_tbl.get("trace_sign", 1)),
    )
    raw_weights = train_tbl.get("task_weights", "inverse_count")
    train_cfg = TrainConfig(
        learning_rate=float(train_tbl.get("learning_rate", 0.001)),
        batch_size=int(train_tbl.get("batch_size", 32)),
        max_epochs=int(train_tbl.get("max_epochs", 200)),
        early_stop_patience=int(train_tbl.get("early_stop_patience", 30)),
        weight_decay=float(train_tbl.get("weight_decay", 1e-5)),
        scheduler=scheduler,
        seeds=tuple(int(s) for s in train_tbl.get("seeds", DEFAULT_SEEDS)),
        task_weights=raw_weights if isinstance(raw_weights, str) else "inverse_count",
        regularization=regularization,
        alpha=float(train_tbl.get("alpha", 0.1)),
        model=model_cfg,
        fusion_backprop=bool(train_tbl.get("fusion_backprop", False)),
    )
    experiment = ExperimentConfig(
        train=train_cfg,
        split_seed=int(exp_tbl.get("split_seed", 42)),
        data_descriptor=dict(data),
        conflict_stride=int(exp_tbl.get("conflict_stride", 1)),
    )
    return RunConfig(
        data=data,
        experiment=experiment,
        out_dir=exp_tbl.get("out_dir"),
        report_format=str(exp_tbl.get("report_format", "both")),
        sweep_counts=[int(c) for c in exp_tbl.get("sweep_counts", [])],
        sweep_majority_task=exp_tbl.get("sweep_majority_task"),
        sweep_minority_task=exp_tbl.get("sweep_minority_task") or None,
        transfer_source=exp_tbl.get("transfer_source"),
        transfer_target=exp_tbl.get("transfer_target"),
        raw_task_weights=raw_weights,
    )
