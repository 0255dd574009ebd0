"""From-scratch differentiable layers, the siamese drop classifier, and its
two-stage Adam training loop with gradient verification."""

from .model import (
    ModelConfig,
    ModelParams,
    classify_forward,
    classify_forward_concat,
    encode,
    forward_pair,
    backward_pair,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    AdamState,
    TrainConfig,
    adam_step,
    bce_loss,
    bce_grad_p,
    binary_f1,
    feature_stats,
    featurize_pairs,
    gradient_check_arrays,
    gradient_check_model,
    predict_probs,
    train,
    train_stage,
)

__all__ = [
    "AdamState",
    "ModelConfig",
    "ModelParams",
    "TrainConfig",
    "adam_step",
    "bce_loss",
    "bce_grad_p",
    "binary_f1",
    "classify_forward",
    "classify_forward_concat",
    "encode",
    "feature_stats",
    "featurize_pairs",
    "forward_pair",
    "backward_pair",
    "gradient_check_arrays",
    "gradient_check_model",
    "init_params",
    "load_checkpoint",
    "predict_probs",
    "save_checkpoint",
    "train",
    "train_stage",
]
