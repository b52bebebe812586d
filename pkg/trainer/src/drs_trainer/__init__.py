"""Toy staged masked-loss trainer; file-based handoff from the dataset side."""

from .adapter_config import AdapterConfig
from .artifacts import (
    BadArtifact,
    MissingPhaseArtifacts,
    PhaseEntry,
    TrainSample,
    load_plan,
    load_samples,
)
from .gradcheck import GradientLeak, GradientReport, check_gradients
from .losses import ShapeMismatch, gather_logprobs, masked_loss, sequence_masked_nll
from .model import BOS_ID, VOCAB_SIZE, ToyByteLM, shift_inputs
from .train import TrainConfig, TrainResult, full_supervision_nll, staged_train

__all__ = [
    "AdapterConfig",
    "BOS_ID",
    "BadArtifact",
    "GradientLeak",
    "GradientReport",
    "MissingPhaseArtifacts",
    "PhaseEntry",
    "ShapeMismatch",
    "ToyByteLM",
    "TrainConfig",
    "TrainResult",
    "TrainSample",
    "VOCAB_SIZE",
    "check_gradients",
    "full_supervision_nll",
    "gather_logprobs",
    "load_plan",
    "load_samples",
    "masked_loss",
    "sequence_masked_nll",
    "shift_inputs",
    "staged_train",
]
