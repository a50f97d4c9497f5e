"""The three model families: independent nets, shared-backbone MTL, structured MTL.

All models share a small protocol: ``forward(X, mode, rng)`` returns a dict
of per-task predictions (probabilities for classification tasks, raw values
for regression); ``backward(pred_grads, ...)`` accumulates parameter
gradients given d(loss)/d(prediction) per task; ``parameters()`` /
``grads_dict()`` / ``buffers_dict()`` expose flat name->array views.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .nn.layers import EVAL, Dense, ReLU, Sigmoid, sigmoid
from .nn.network import Sequential, mlp_block, n_params, restore_state, snapshot_state

INDEPENDENT = "independent"
STANDARD_MTL = "standard_mtl"
STRUCTURED_MTL = "structured_mtl"
MODEL_KINDS = (INDEPENDENT, STANDARD_MTL, STRUCTURED_MTL)

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture sizes; defaults follow the benchmark configuration."""

    hidden: int = 128
    head_hidden: int = 64
    embed_dim: int = 64
    gcn_hidden: int = 64
    edge_hidden: int = 32
    fusion_hidden: int = 16
    dropout: float = 0.3


@dataclass
class TaskRelationGraph:
    """Directed task relation matrix; entry [i, j] is task j's influence on task i."""

    matrix: np.ndarray
    task_names: list[str]

    def __post_init__(self):
        W = np.asarray(self.matrix, dtype=np.float64)
        if W.ndim != 2 or W.shape[0] != W.shape[1] or W.shape[0] != len(self.task_names):
            raise ConfigError(f"relation matrix shape {W.shape} does not match task list")
        if not np.all(np.isfinite(W)) or W.min() < 0.0 or W.max() > 1.0:
            raise ConfigError("relation strengths must be finite and within [0,1]")
        self.matrix = W


class _ModelBase:
    task_names: list[str]
    task_kinds: list[str]

    def kind_of(self, task: str) -> str:
        return self.task_kinds[self.task_names.index(task)]

    def grads_dict(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def parameters(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def buffers_dict(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def zero_grads(self) -> None:
        for g in self.grads_dict().values():
            g[...] = 0.0

    def state_dict(self) -> dict[str, np.ndarray]:
        return snapshot_state(self.parameters(), self.buffers_dict())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        restore_state(self.parameters(), self.buffers_dict(), state)

    def num_parameters(self) -> int:
        return n_params(self.parameters())


class IndependentModel(_ModelBase):
    """Single-task net: feature_dim -> hidden -> hidden -> 1 with BN/ReLU/dropout blocks."""

    model_kind = INDEPENDENT

    def __init__(self, task_name: str, task_kind: str, feature_dim: int,
                 cfg: ModelConfig, rng: np.random.Generator):
        self.task_names = [task_name]
        self.task_kinds = [task_kind]
        self.feature_dim = feature_dim
        self.cfg = cfg
        layers = (mlp_block(feature_dim, cfg.hidden, cfg.dropout, rng)
                  + mlp_block(cfg.hidden, cfg.hidden, cfg.dropout, rng)
                  + [Dense(cfg.hidden, 1, rng)])
        if task_kind == "classification":
            layers.append(Sigmoid())
        self.net = Sequential(layers)

    @property
    def task_name(self) -> str:
        return self.task_names[0]

    def parameters(self):
        return {f"net.{k}": v for k, v in self.net.params().items()}

    def grads_dict(self):
        return {f"net.{k}": v for k, v in self.net.grads().items()}

    def buffers_dict(self):
        return {f"net.{k}": v for k, v in self.net.buffers().items()}

    def forward(self, X, mode=EVAL, rng=None):
        out = self.net.forward(X, mode=mode, rng=rng)
        return {self.task_name: out[:, 0]}

    def backward(self, pred_grads):
        g = np.asarray(pred_grads[self.task_name], dtype=np.float64)
        self.net.backward(g[:, None])


class SharedMTLModel(_ModelBase):
    """Hard parameter sharing: one backbone, one small head per task."""

    model_kind = STANDARD_MTL

    def __init__(self, task_names: list[str], task_kinds: list[str], feature_dim: int,
                 cfg: ModelConfig, rng: np.random.Generator):
        if len(task_names) != len(task_kinds):
            raise ConfigError("task_names and task_kinds must align")
        self.task_names = list(task_names)
        self.task_kinds = list(task_kinds)
        self.feature_dim = feature_dim
        self.cfg = cfg
        self.backbone = Sequential(mlp_block(feature_dim, cfg.hidden, cfg.dropout, rng)
                                   + mlp_block(cfg.hidden, cfg.hidden, cfg.dropout, rng))
        self.heads = {t: Sequential([Dense(cfg.hidden, cfg.head_hidden, rng), ReLU(),
                                     Dense(cfg.head_hidden, 1, rng)])
                      for t in task_names}
        self._sig = {t: Sigmoid() for t, k in zip(task_names, task_kinds)
                     if k == "classification"}
        self.last_backbone_repr = None

    def parameters(self):
        out = {f"backbone.{k}": v for k, v in self.backbone.params().items()}
        for t in self.task_names:
            out.update({f"head.{t}.{k}": v for k, v in self.heads[t].params().items()})
        return out

    def grads_dict(self):
        out = {f"backbone.{k}": v for k, v in self.backbone.grads().items()}
        for t in self.task_names:
            out.update({f"head.{t}.{k}": v for k, v in self.heads[t].grads().items()})
        return out

    def buffers_dict(self):
        return {f"backbone.{k}": v for k, v in self.backbone.buffers().items()}

    def head_raw(self, z: np.ndarray) -> dict[str, np.ndarray]:
        """Raw head outputs f_t(z): regression values / classification logits."""
        return {t: self.heads[t].forward(z)[:, 0] for t in self.task_names}

    def forward(self, X, mode=EVAL, rng=None):
        z = self.backbone.forward(X, mode=mode, rng=rng)
        self.last_backbone_repr = z
        preds = {}
        for t, raw in self.head_raw(z).items():
            if t in self._sig:
                preds[t] = self._sig[t].forward(raw[:, None])[:, 0]
            else:
                preds[t] = raw
        return preds

    def backward(self, pred_grads):
        dz = None
        for t in self.task_names:
            g = np.asarray(pred_grads[t], dtype=np.float64)[:, None]
            if t in self._sig:
                g = self._sig[t].backward(g)
            gz = self.heads[t].backward(g)
            dz = gz if dz is None else dz + gz
        self.backbone.backward(dz)


class TaskGCN:
    """Two graph-convolution layers on the complete task graph (no self-loops).

    Uses the symmetric normalization D^(-1/2) A D^(-1/2); for the complete
    graph on T nodes this is A / (T - 1). ReLU after the first layer only.
    """

    def __init__(self, n_tasks: int, dim: int, hidden: int, rng: np.random.Generator):
        if n_tasks < 2:
            raise ConfigError("task relation graph needs at least 2 tasks")
        A = np.ones((n_tasks, n_tasks)) - np.eye(n_tasks)
        self.a_hat = A / (n_tasks - 1)
        self.w1 = rng.uniform(-np.sqrt(6.0 / dim), np.sqrt(6.0 / dim), size=(dim, hidden))
        self.b1 = np.zeros(hidden)
        self.w2 = rng.uniform(-np.sqrt(6.0 / hidden), np.sqrt(6.0 / hidden), size=(hidden, dim))
        self.b2 = np.zeros(dim)
        self.d_w1 = np.zeros_like(self.w1)
        self.d_b1 = np.zeros_like(self.b1)
        self.d_w2 = np.zeros_like(self.w2)
        self.d_b2 = np.zeros_like(self.b2)
        self._cache = None

    def params(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def grads(self):
        return {"w1": self.d_w1, "b1": self.d_b1, "w2": self.d_w2, "b2": self.d_b2}

    def forward(self, embeddings: np.ndarray) -> np.ndarray:
        m0 = self.a_hat @ embeddings
        z1 = m0 @ self.w1 + self.b1
        h1 = np.maximum(z1, 0.0)
        m1 = self.a_hat @ h1
        h2 = m1 @ self.w2 + self.b2
        self._cache = (m0, z1 > 0, m1)
        return h2

    def backward(self, d_h2: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("TaskGCN.backward called without a cached forward pass")
        m0, relu_mask, m1 = self._cache
        self.d_w2 += m1.T @ d_h2
        self.d_b2 += d_h2.sum(axis=0)
        d_h1 = self.a_hat.T @ (d_h2 @ self.w2.T)
        d_z1 = d_h1 * relu_mask
        self.d_w1 += m0.T @ d_z1
        self.d_b1 += d_z1.sum(axis=0)
        return self.a_hat.T @ (d_z1 @ self.w1.T)


class StructuredMTLModel(_ModelBase):
    """Shared MTL plus task embeddings, a relation GCN, an edge predictor and
    per-task fusion nets.

    Fused prediction for task i:
        yhat_i = f_i(z) + alpha * sum_{j != i} w_ij * g_i(f_j(z))
    with the sum taken over raw head outputs; classification fusion happens
    on the logit and the sigmoid is applied afterwards. By default the
    auxiliary inputs f_j(z) are treated as constants for gradient purposes
    (stop-gradient); set ``fusion_backprop=True`` to propagate through them.
    """

    model_kind = STRUCTURED_MTL

    def __init__(self, task_names: list[str], task_kinds: list[str], feature_dim: int,
                 cfg: ModelConfig, rng: np.random.Generator, alpha: float = 0.1,
                 fusion_backprop: bool = False):
        if len(task_names) < 2:
            raise ConfigError("structured MTL needs at least 2 tasks")
        self.shared = SharedMTLModel(task_names, task_kinds, feature_dim, cfg, rng)
        self.task_names = self.shared.task_names
        self.task_kinds = self.shared.task_kinds
        self.feature_dim = feature_dim
        self.cfg = cfg
        self.alpha = alpha
        self.fusion_backprop = fusion_backprop
        T = len(task_names)
        bound = np.sqrt(6.0 / cfg.embed_dim)
        self.embeddings = rng.uniform(-bound, bound, size=(T, cfg.embed_dim))
        self.d_embeddings = np.zeros_like(self.embeddings)
        self.gcn = TaskGCN(T, cfg.embed_dim, cfg.gcn_hidden, rng)
        self.edge_mlp = Sequential([Dense(2 * cfg.embed_dim, cfg.edge_hidden, rng), ReLU(),
                                    Dense(cfg.edge_hidden, 1, rng), Sigmoid()])
        self.fusion = {t: Sequential([Dense(1, cfg.fusion_hidden, rng), ReLU(),
                                      Dense(cfg.fusion_hidden, 1, rng)])
                       for t in task_names}
        self._sig = {t: Sigmoid() for t, k in zip(task_names, task_kinds)
                     if k == "classification"}
        self.last_W = None
        self.last_base = None
        self._fwd = None

    def parameters(self):
        out = {f"shared.{k}": v for k, v in self.shared.parameters().items()}
        out["embeddings"] = self.embeddings
        out.update({f"gcn.{k}": v for k, v in self.gcn.params().items()})
        out.update({f"edge.{k}": v for k, v in self.edge_mlp.params().items()})
        for t in self.task_names:
            out.update({f"fusion.{t}.{k}": v for k, v in self.fusion[t].params().items()})
        return out

    def grads_dict(self):
        out = {f"shared.{k}": v for k, v in self.shared.grads_dict().items()}
        out["embeddings"] = self.d_embeddings
        out.update({f"gcn.{k}": v for k, v in self.gcn.grads().items()})
        out.update({f"edge.{k}": v for k, v in self.edge_mlp.grads().items()})
        for t in self.task_names:
            out.update({f"fusion.{t}.{k}": v for k, v in self.fusion[t].grads().items()})
        return out

    def buffers_dict(self):
        return {f"shared.{k}": v for k, v in self.shared.buffers_dict().items()}

    def _others(self, i: int) -> list[int]:
        return [j for j in range(len(self.task_names)) if j != i]

    def relation_matrix(self) -> np.ndarray:
        """Compute W from the current embeddings; entries in [0,1] via sigmoid.

        All ordered pairs are evaluated, diagonal included, so the trace
        regularizer is defined; the fusion sum skips the diagonal.
        """
        T = len(self.task_names)
        h = self.gcn.forward(self.embeddings)
        pair_in = np.hstack([np.repeat(h, T, axis=0), np.tile(h, (T, 1))])
        w_flat = self.edge_mlp.forward(pair_in)[:, 0]
        W = w_flat.reshape(T, T)
        self.last_W = W
        return W

    def forward(self, X, mode=EVAL, rng=None, fusion_inputs_override=None):
        names = self.task_names
        z = self.shared.backbone.forward(X, mode=mode, rng=rng)
        self.shared.last_backbone_repr = z
        raw = self.shared.head_raw(z)
        W = self.relation_matrix()

        g_out = {}
        fused = {}
        if self.alpha != 0.0:
            source = fusion_inputs_override if fusion_inputs_override is not None else raw
            for i, t in enumerate(names):
                others = self._others(i)
                stacked = np.concatenate([source[names[j]] for j in others])[:, None]
                go = self.fusion[t].forward(stacked)[:, 0].reshape(len(others), -1)
                g_out[t] = go
                fused[t] = raw[t] + self.alpha * (W[i, others] @ go)
        else:
            fused = raw

        preds = {}
        base = {}
        for t in names:
            if t in self._sig:
                preds[t] = self._sig[t].forward(fused[t][:, None])[:, 0]
                base[t] = sigmoid(raw[t])
            else:
                preds[t] = fused[t]
                base[t] = raw[t]
        self.last_base = base
        self.last_raw = raw
        self._fwd = {"W": W, "g_out": g_out, "batch": X.shape[0]}
        return preds

    def backward(self, pred_grads, relation_grad=None):
        if self._fwd is None:
            raise RuntimeError("StructuredMTLModel.backward called without a cached forward pass")
        names = self.task_names
        W = self._fwd["W"]
        g_out = self._fwd["g_out"]
        batch = self._fwd["batch"]
        T = len(names)

        d_W = np.zeros((T, T))
        if relation_grad is not None:
            d_W += relation_grad
        d_raw = {t: np.zeros(batch) for t in names}

        for i, t in enumerate(names):
            g = np.asarray(pred_grads[t], dtype=np.float64)
            d_fused = self._sig[t].backward(g[:, None])[:, 0] if t in self._sig else g
            d_raw[t] += d_fused
            if self.alpha == 0.0:
                continue
            others = self._others(i)
            go = g_out[t]
            d_W[i, others] += self.alpha * (go @ d_fused)
            d_go = self.alpha * W[i, others][:, None] * d_fused[None, :]
            d_gin = self.fusion[t].backward(d_go.reshape(-1, 1))
            if self.fusion_backprop:
                d_blocks = d_gin[:, 0].reshape(len(others), batch)
                for k, j in enumerate(others):
                    d_raw[names[j]] += d_blocks[k]

        if relation_grad is not None or self.alpha != 0.0:
            d_pair = self.edge_mlp.backward(d_W.reshape(-1, 1))
            d = self.cfg.embed_dim
            d_pair = d_pair.reshape(T, T, 2 * d)
            d_h = d_pair[:, :, :d].sum(axis=1) + d_pair[:, :, d:].sum(axis=0)
            self.d_embeddings += self.gcn.backward(d_h)

        dz = None
        for t in names:
            gz = self.shared.heads[t].backward(d_raw[t][:, None])
            dz = gz if dz is None else dz + gz
        self.shared.backbone.backward(dz)


def independent_forward(model: IndependentModel, features, mode=EVAL, rng=None):
    return model.forward(features, mode=mode, rng=rng)[model.task_name]


def shared_mtl_forward(model: SharedMTLModel, features, mode=EVAL, rng=None):
    preds = model.forward(features, mode=mode, rng=rng)
    return preds, model.last_backbone_repr


def structured_mtl_forward(model: StructuredMTLModel, features, mode=EVAL, rng=None):
    preds = model.forward(features, mode=mode, rng=rng)
    return preds, model.last_base, TaskRelationGraph(model.last_W.copy(), model.task_names)


def compute_task_relation_matrix(model: StructuredMTLModel) -> TaskRelationGraph:
    return TaskRelationGraph(model.relation_matrix().copy(), model.task_names)


def build_model(kind: str, task_names: list[str], task_kinds: list[str], feature_dim: int,
                cfg: ModelConfig, rng: np.random.Generator, alpha: float = 0.1,
                fusion_backprop: bool = False) -> _ModelBase:
    if kind == INDEPENDENT:
        if len(task_names) != 1:
            raise ConfigError("an independent model covers exactly one task")
        return IndependentModel(task_names[0], task_kinds[0], feature_dim, cfg, rng)
    if kind == STANDARD_MTL:
        return SharedMTLModel(task_names, task_kinds, feature_dim, cfg, rng)
    if kind == STRUCTURED_MTL:
        return StructuredMTLModel(task_names, task_kinds, feature_dim, cfg, rng,
                                  alpha=alpha, fusion_backprop=fusion_backprop)
    raise ConfigError(f"unknown model kind {kind!r}")


def save_model(model: _ModelBase, path) -> None:
    """Dump parameters, buffers and the architecture descriptor; bit-exact round trip."""
    cfg = model.cfg
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "kind": model.model_kind,
        "feature_dim": model.feature_dim,
        "task_names": model.task_names,
        "task_kinds": model.task_kinds,
        "hidden": cfg.hidden,
        "head_hidden": cfg.head_hidden,
        "embed_dim": cfg.embed_dim,
        "gcn_hidden": cfg.gcn_hidden,
        "edge_hidden": cfg.edge_hidden,
        "fusion_hidden": cfg.fusion_hidden,
        "dropout": cfg.dropout,
        "alpha": getattr(model, "alpha", None),
        "fusion_backprop": getattr(model, "fusion_backprop", None),
    }
    arrays = dict(model.state_dict())
    arrays["__meta__"] = np.array(json.dumps(meta))
    np.savez(path, **arrays)


def load_model(path) -> _ModelBase:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta["format_version"] != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta['format_version']}")
        cfg = ModelConfig(hidden=meta["hidden"], head_hidden=meta["head_hidden"],
                          embed_dim=meta["embed_dim"], gcn_hidden=meta["gcn_hidden"],
                          edge_hidden=meta["edge_hidden"], fusion_hidden=meta["fusion_hidden"],
                          dropout=meta["dropout"])
        model = build_model(meta["kind"], meta["task_names"], meta["task_kinds"],
                            meta["feature_dim"], cfg, np.random.default_rng(0),
                            alpha=meta["alpha"] if meta["alpha"] is not None else 0.1,
                            fusion_backprop=bool(meta["fusion_backprop"]))
        state = {k: data[k] for k in data.files if k != "__meta__"}
    model.load_state_dict(state)
    return model
