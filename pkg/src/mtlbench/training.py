"""Training loop: Adam, plateau LR scheduling, early stopping, masked
multi-task batching, seeded determinism, and the pre-train/transfer
procedure."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, iter_batches
from .errors import ConfigError, NumericError
from .losses import (RegularizationConfig, TaskWeights, combined_mtl_loss,
                     loss_kind_for_task, masked_loss_with_grad, relation_penalty,
                     relation_penalty_grad)
from .metrics import classification_metrics, regression_metrics
from .models import STRUCTURED_MTL, ModelConfig, SharedMTLModel, build_model
from .nn.layers import EVAL, TRAIN
from .nn.optim import adam_step, init_adam

EVAL_BATCH = 512

DEFAULT_SEEDS = (42, 123, 456, 789, 1024)


@dataclass
class SchedulerConfig:
    factor: float = 0.5
    patience: int = 10
    min_lr: float = 1e-6
    threshold: float = 1e-4


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    max_epochs: int = 200
    early_stop_patience: int = 30
    weight_decay: float = 1e-5
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    seeds: tuple = DEFAULT_SEEDS
    task_weights: object = "inverse_count"  # "inverse_count" | "uniform" | TaskWeights
    regularization: RegularizationConfig = field(default_factory=RegularizationConfig)
    alpha: float = 0.1
    model: ModelConfig = field(default_factory=ModelConfig)
    fusion_backprop: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("learning_rate, batch_size and max_epochs must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be at least 1")

    def resolve_weights(self, ds: Dataset) -> TaskWeights:
        if isinstance(self.task_weights, TaskWeights):
            return self.task_weights
        if self.task_weights == "uniform":
            return TaskWeights.uniform(ds.task_names)
        if self.task_weights == "inverse_count":
            return TaskWeights.from_counts(ds.labeled_counts())
        raise ConfigError(f"unknown task_weights setting {self.task_weights!r}")


class ReduceLROnPlateau:
    """Halve (by ``factor``) the learning rate after ``patience`` epochs
    without the validation loss improving by more than ``threshold``."""

    def __init__(self, learning_rate: float, cfg: SchedulerConfig):
        self.learning_rate = learning_rate
        self.cfg = cfg
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.cfg.threshold:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.cfg.patience:
                self.learning_rate = max(self.learning_rate * self.cfg.factor, self.cfg.min_lr)
                self.bad_epochs = 0
        return self.learning_rate


@dataclass
class EarlyStopState:
    patience: int
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    best_state: dict = None

    def update(self, val_loss: float, epoch: int, model) -> str:
        """Snapshot on strict improvement; return "stop" once patience is spent."""
        if val_loss < self.best_val_loss:
            self.best_val_loss = val_loss
            self.best_epoch = epoch
            self.epochs_since_improvement = 0
            self.best_state = model.state_dict()
        else:
            self.epochs_since_improvement += 1
        return "stop" if self.epochs_since_improvement >= self.patience else "continue"


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    learning_rate: float
    val_metrics: dict[str, float]  # keyed "task:metric"


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0

    def __len__(self):
        return len(self.records)

    @property
    def val_losses(self) -> list[float]:
        return [r.val_loss for r in self.records]

    def metric_columns(self) -> list[str]:
        cols: list[str] = []
        for r in self.records:
            for k in r.val_metrics:
                if k not in cols:
                    cols.append(k)
        return cols

    def to_csv(self, path) -> None:
        cols = self.metric_columns()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "learning_rate"]
                            + [f"val_{c}" for c in cols])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss),
                                 repr(r.learning_rate)]
                                + [repr(r.val_metrics.get(c, float("nan"))) for c in cols])


def predict(model, ds: Dataset, batch_size: int = EVAL_BATCH) -> dict[str, np.ndarray]:
    """Eval-mode predictions for every row, per task."""
    outs = {t: [] for t in model.task_names}
    for X, _, _ in iter_batches(ds, batch_size, shuffle=False):
        preds = model.forward(X, mode=EVAL)
        for t in model.task_names:
            outs[t].append(preds[t])
    return {t: np.concatenate(chunks) for t, chunks in outs.items()}


def evaluate_metrics(model, ds: Dataset, batch_size: int = EVAL_BATCH) -> dict[str, dict[str, float]]:
    """Per-task metrics on each task's labeled subset."""
    preds = predict(model, ds, batch_size)
    out = {}
    for j, (t, kind) in enumerate(zip(ds.task_names, ds.task_kinds)):
        sel = ds.mask[:, j] == 1.0
        if not sel.any():
            continue
        y = ds.targets[sel, j]
        p = preds[t][sel]
        out[t] = (classification_metrics(p, y) if kind == "classification"
                  else regression_metrics(p, y))
    return out


def validation_loss(model, ds: Dataset, weights: TaskWeights,
                    reg: RegularizationConfig | None = None,
                    batch_size: int = EVAL_BATCH) -> tuple[float, dict[str, float]]:
    """Exact masked loss over the full split (sums accumulated across batches)."""
    num = {t: 0.0 for t in ds.task_names}
    den = {t: 0 for t in ds.task_names}
    for X, Y, M in iter_batches(ds, batch_size, shuffle=False):
        preds = model.forward(X, mode=EVAL)
        for j, (t, kind) in enumerate(zip(ds.task_names, ds.task_kinds)):
            ml = masked_loss_with_grad(preds[t], Y[:, j], M[:, j], loss_kind_for_task(kind))
            num[t] += ml.value * ml.n_labeled
            den[t] += ml.n_labeled
    task_losses = {t: (num[t] / den[t] if den[t] else 0.0) for t in ds.task_names}
    total = combined_mtl_loss(task_losses, weights)
    if reg is not None and model.model_kind == STRUCTURED_MTL:
        total += relation_penalty(model.relation_matrix(), reg)
    return total, task_losses


def fit_model(model, train_ds: Dataset, val_ds: Dataset, config: TrainConfig, seed: int,
              frozen_prefixes: tuple = (), verbose: bool = False,
              step_hook=None) -> TrainHistory:
    """Run the full training loop on an existing model, in place.

    ``frozen_prefixes`` excludes matching parameters from optimization;
    freezing the backbone also keeps its normalization statistics fixed by
    running forward passes in eval mode. ``step_hook(model, task_losses,
    epoch, step)`` runs after each forward pass with the batch's caches
    intact, before the optimizer step; it may run extra backward passes.
    """
    if train_ds.task_names != model.task_names:
        raise ConfigError("model and dataset task lists must match")
    weights = config.resolve_weights(train_ds)
    all_params = model.parameters()
    trainable = {k: v for k, v in all_params.items()
                 if not any(k.startswith(p) for p in frozen_prefixes)}
    if not trainable:
        raise ConfigError("all parameters are frozen; nothing to train")
    adam = init_adam(trainable)
    sched = ReduceLROnPlateau(config.learning_rate, config.scheduler)
    stopper = EarlyStopState(patience=config.early_stop_patience)
    history = TrainHistory()
    freeze_norm_layers = any(p.startswith("backbone") for p in frozen_prefixes)
    train_mode = EVAL if freeze_norm_layers else TRAIN
    lr = config.learning_rate

    for epoch in range(1, config.max_epochs + 1):
        shuffle_rng = np.random.default_rng(np.random.SeedSequence([seed, 2, epoch]))
        dropout_rng = np.random.default_rng(np.random.SeedSequence([seed, 1, epoch]))
        batch_losses = []
        for batch_no, (X, Y, M) in enumerate(
                iter_batches(train_ds, config.batch_size, rng=shuffle_rng)):
            loss, task_losses, relation_grad = _forward_and_loss(
                model, X, Y, M, weights, config, epoch, batch_no,
                dropout_rng if train_mode == TRAIN else None, train_mode)
            if step_hook is not None:
                step_hook(model, task_losses, epoch, batch_no)
            _backward_combined(model, task_losses, weights, relation_grad)
            grads = model.grads_dict()
            adam_step(trainable, {k: grads[k] for k in trainable}, adam, lr,
                      config.weight_decay)
            batch_losses.append(loss)
        val_loss, _ = validation_loss(model, val_ds, weights, config.regularization)
        val_metrics = {}
        for t, metrics in evaluate_metrics(model, val_ds).items():
            for name, value in metrics.items():
                val_metrics[f"{t}:{name}"] = value
        history.records.append(EpochRecord(epoch, float(np.mean(batch_losses)), val_loss,
                                           lr, val_metrics))
        if verbose:
            print(f"epoch {epoch}: train {np.mean(batch_losses):.5f} "
                  f"val {val_loss:.5f} lr {lr:.2e}")
        decision = stopper.update(val_loss, epoch, model)
        lr = sched.step(val_loss)
        if decision == "stop":
            break

    history.stopped_epoch = history.records[-1].epoch
    history.best_epoch = stopper.best_epoch
    if stopper.best_state is not None:
        model.load_state_dict(stopper.best_state)
    return history


def _forward_and_loss(model, X, Y, M, weights, config, epoch, batch_no, rng, mode):
    structured = model.model_kind == STRUCTURED_MTL
    preds = model.forward(X, mode=mode, rng=rng)
    task_losses = {}
    for j, (t, kind) in enumerate(zip(model.task_names, model.task_kinds)):
        task_losses[t] = masked_loss_with_grad(preds[t], Y[:, j], M[:, j],
                                               loss_kind_for_task(kind))
    loss = combined_mtl_loss(task_losses, weights)
    relation_grad = None
    if structured:
        loss += relation_penalty(model.last_W, config.regularization)
        relation_grad = relation_penalty_grad(model.last_W, config.regularization)
    if not math.isfinite(loss):
        detail = {t: ml.value for t, ml in task_losses.items()}
        raise NumericError(
            f"non-finite loss at epoch {epoch}, batch {batch_no}: per-task losses {detail}; "
            f"batch had {int(M.sum())} labels over {X.shape[0]} samples")
    return loss, task_losses, relation_grad


def _backward_combined(model, task_losses, weights, relation_grad):
    pred_grads = {t: weights[t] * ml.grad for t, ml in task_losses.items()}
    model.zero_grads()
    if model.model_kind == STRUCTURED_MTL:
        model.backward(pred_grads, relation_grad=relation_grad)
    else:
        model.backward(pred_grads)


def train(model_kind: str, train_ds: Dataset, val_ds: Dataset, config: TrainConfig,
          seed: int, verbose: bool = False, step_hook=None):
    """Build a seeded model and train it; returns (model, history)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    model = build_model(model_kind, train_ds.task_names, train_ds.task_kinds,
                        train_ds.feature_dim, config.model, rng, alpha=config.alpha,
                        fusion_backprop=config.fusion_backprop)
    history = fit_model(model, train_ds, val_ds, config, seed, verbose=verbose,
                        step_hook=step_hook)
    return model, history


@dataclass
class TransferOutcome:
    transfer_model: SharedMTLModel
    scratch_model: SharedMTLModel
    transfer_metrics: dict[str, float]
    scratch_metrics: dict[str, float]
    pretrain_history: TrainHistory
    transfer_history: TrainHistory
    scratch_history: TrainHistory


def pretrain_and_transfer(source: str, target: str, splits, config: TrainConfig,
                          seed: int) -> TransferOutcome:
    """Arm A: backbone+head trained on the source task, backbone frozen, new
    head fit on the target task. Arm B: backbone+head trained from scratch on
    the target task. Same budget and early stopping for both arms."""
    train_ds, val_ds, test_ds = splits
    for task in (source, target):
        if train_ds.labeled_counts().get(task, 0) == 0:
            raise ConfigError(f"task {task!r} has no labeled training samples")

    src_train = train_ds.project([source])
    src_val = val_ds.project([source])
    tgt_train = train_ds.project([target])
    tgt_val = val_ds.project([target])
    tgt_test = test_ds.project([target])

    # Arm A: pre-train on the source task.
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    pre_model = SharedMTLModel(src_train.task_names, src_train.task_kinds,
                               src_train.feature_dim, config.model, rng)
    pretrain_history = fit_model(pre_model, src_train, src_val, config, seed)

    transfer_model = SharedMTLModel(tgt_train.task_names, tgt_train.task_kinds,
                                    tgt_train.feature_dim, config.model,
                                    np.random.default_rng(np.random.SeedSequence([seed, 3])))
    backbone_state = {k: v for k, v in pre_model.state_dict().items()
                      if k.startswith(("param:backbone.", "buffer:backbone."))}
    state = transfer_model.state_dict()
    state.update(backbone_state)
    transfer_model.load_state_dict(state)
    transfer_history = fit_model(transfer_model, tgt_train, tgt_val, config, seed,
                                 frozen_prefixes=("backbone.",))

    # Arm B: scratch training on the target task only.
    scratch_model, scratch_history = train("standard_mtl", tgt_train, tgt_val, config, seed)

    return TransferOutcome(
        transfer_model=transfer_model,
        scratch_model=scratch_model,
        transfer_metrics=evaluate_metrics(transfer_model, tgt_test)[target],
        scratch_metrics=evaluate_metrics(scratch_model, tgt_test)[target],
        pretrain_history=pretrain_history,
        transfer_history=transfer_history,
        scratch_history=scratch_history,
    )
