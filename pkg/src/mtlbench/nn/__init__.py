from .layers import (EVAL, TRAIN, BatchNorm, Dense, Dropout, Layer, ReLU, Sigmoid,
                     activation_apply, batchnorm_forward, dense_forward, dropout_forward,
                     relu, sigmoid)
from .network import Sequential, mlp_block, n_params, restore_state, snapshot_state
from .optim import AdamState, adam_step, init_adam
from .gradcheck import (analytic_gradients, finite_diff_check, jitter_params, max_relative_error,
                        model_loss, numeric_gradients)

__all__ = [
    "EVAL", "TRAIN", "BatchNorm", "Dense", "Dropout", "Layer", "ReLU", "Sigmoid",
    "activation_apply", "batchnorm_forward", "dense_forward", "dropout_forward",
    "relu", "sigmoid", "Sequential", "mlp_block", "n_params", "restore_state",
    "snapshot_state", "AdamState", "adam_step", "init_adam", "analytic_gradients", "jitter_params",
    "finite_diff_check", "max_relative_error", "model_loss", "numeric_gradients",
]
