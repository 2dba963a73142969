from .optim import AdamW, NonFiniteGradient, OptimConfig, clip_gradients, one_cycle_lr
from .trainer import (
    CheckpointMismatch,
    EpochLog,
    FocalParams,
    Stage,
    StagePlan,
    Trainer,
    TrainingError,
    TrainResult,
    train,
)

__all__ = [
    "AdamW",
    "CheckpointMismatch",
    "EpochLog",
    "FocalParams",
    "NonFiniteGradient",
    "OptimConfig",
    "Stage",
    "StagePlan",
    "TrainResult",
    "Trainer",
    "TrainingError",
    "clip_gradients",
    "one_cycle_lr",
    "train",
]
