"""Desk-scale neural engine: causal Conformer, losses, AdamW, checkpoints."""

from sfd.nn.checkpoint import Checkpoint
from sfd.nn.layers import (
    ConformerConfig,
    ConformerEncoder,
    DoAModel,
    SFDModel,
    causal_depthwise_conv_forward,
    causal_mhsa_forward,
    conformer_encode,
    count_parameters,
    cross_entropy_loss,
    linear_forward,
    mse_loss,
)
from sfd.nn.optim import AdamW, LrSchedule, OptimizerState, adamw_step, lr_at

__all__ = [
    "AdamW", "Checkpoint", "ConformerConfig", "ConformerEncoder", "DoAModel",
    "LrSchedule", "OptimizerState", "SFDModel", "adamw_step",
    "causal_depthwise_conv_forward", "causal_mhsa_forward", "conformer_encode",
    "count_parameters", "cross_entropy_loss", "linear_forward", "lr_at", "mse_loss",
]
