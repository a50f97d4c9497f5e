import numpy as np

from mtlbench.models import ModelConfig, build_model

SMALL_CFG = ModelConfig(hidden=10, head_hidden=6, embed_dim=8, gcn_hidden=8,
                        edge_hidden=5, fusion_hidden=4, dropout=0.3)

TASKS3 = (["reg_a", "reg_b", "cls_c"], ["regression", "regression", "classification"])


def make_batch(rng, n, feature_dim, task_kinds, masked=True):
    """Random features plus well-scaled targets and a non-degenerate mask."""
    X = rng.normal(size=(n, feature_dim))
    T = len(task_kinds)
    Y = np.empty((n, T))
    for j, kind in enumerate(task_kinds):
        if kind == "classification":
            Y[:, j] = rng.integers(0, 2, size=n).astype(float)
        else:
            Y[:, j] = rng.normal(size=n)
    if masked:
        M = (rng.random((n, T)) < 0.7).astype(float)
        M[M.sum(axis=1) == 0, 0] = 1.0  # every sample keeps at least one label
        for j in range(T):
            if M[:, j].sum() == 0:
                M[0, j] = 1.0
    else:
        M = np.ones((n, T))
    return X, Y, M


def tiny_model(kind, seed=0, tasks=TASKS3, feature_dim=7, cfg=SMALL_CFG, **kw):
    names, kinds = tasks
    if kind == "independent":
        names, kinds = names[:1], kinds[:1]
    return build_model(kind, list(names), list(kinds), feature_dim, cfg,
                       np.random.default_rng(seed), **kw)
