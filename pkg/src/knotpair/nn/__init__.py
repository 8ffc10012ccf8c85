from .losses import Augmentation, augment, ntxent_loss, ntxent_loss_grad, triplet_loss, triplet_loss_grad
from .network import (
    CUSTOM_WEIGHTS,
    ENCODER_DIMS,
    PROJECTION_DIMS,
    VARIANTS,
    Cache,
    Layer,
    ModelParams,
    backward,
    embed_all,
    forward,
    forward_cached,
    init_model,
    normalize_variant,
    report_learned_weights,
)
from .optim import AdamState, adam_step
from .serialize import load_model, model_from_dict, model_to_dict, save_model
from .training import (
    EpochLog,
    TrainConfig,
    TrainResult,
    simclr_objective,
    train,
    triplet_objective,
    write_train_log,
)

__all__ = [
    "Augmentation", "augment", "ntxent_loss", "ntxent_loss_grad", "triplet_loss",
    "triplet_loss_grad", "CUSTOM_WEIGHTS", "ENCODER_DIMS", "PROJECTION_DIMS", "VARIANTS",
    "Cache", "Layer", "ModelParams", "backward", "embed_all", "forward", "forward_cached",
    "init_model", "normalize_variant", "report_learned_weights", "AdamState", "adam_step",
    "load_model", "model_from_dict", "model_to_dict", "save_model", "EpochLog", "TrainConfig",
    "TrainResult", "simclr_objective", "train", "triplet_objective", "write_train_log",
]
