from .losses import (TARGET_LAMBDAS, DistortionTerms, EgpLoss, FeatureDistance, LossWeights,
                     NonFiniteLoss, distortion, feature_proxy, lambda_select, loss_d, loss_egp,
                     rate_normalizer)
from .loop import (LOG_HEADER, TrainingDiverged, TrainResult, TrainState,
                   load_training_checkpoint, read_log, save_training_checkpoint, train)
from .optim import Adam, AdamState, adam_step

__all__ = [
    "TARGET_LAMBDAS", "DistortionTerms", "EgpLoss", "FeatureDistance", "LossWeights",
    "NonFiniteLoss", "distortion", "feature_proxy", "lambda_select", "loss_d", "loss_egp",
    "rate_normalizer", "LOG_HEADER", "TrainingDiverged", "TrainResult", "TrainState",
    "load_training_checkpoint", "read_log", "save_training_checkpoint", "train",
    "Adam", "AdamState", "adam_step",
]
