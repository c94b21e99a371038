"""Residual-network machinery: approximators, losses, and training."""

from .loss import (
    CollocationBatch,
    DivergedLoss,
    LossAssembler,
    LossBreakdown,
    LossConfig,
    SamplingConfig,
    assemble_loss,
    sample_collocation,
)
from .network import (
    BundleConfig,
    FieldNet,
    InputMap,
    Mlp,
    NetworkBundle,
    NonFiniteOutput,
    forward,
    postprocess_micro,
)
from .training import Checkpoint, TrainConfig, TrainState, adam_step, train

__all__ = [
    "BundleConfig",
    "Checkpoint",
    "CollocationBatch",
    "DivergedLoss",
    "FieldNet",
    "InputMap",
    "LossAssembler",
    "LossBreakdown",
    "LossConfig",
    "Mlp",
    "NetworkBundle",
    "NonFiniteOutput",
    "SamplingConfig",
    "TrainConfig",
    "TrainState",
    "adam_step",
    "assemble_loss",
    "forward",
    "postprocess_micro",
    "sample_collocation",
    "train",
]
