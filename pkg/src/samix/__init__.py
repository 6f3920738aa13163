"""Learnable mixup masks trained by momentum alternating optimisation."""

from .engine import Tensor, backward, gradcheck, no_grad
from .mixer import MixerConfig, MixerParams, MixMask, generate_mask, lambda_adjust, mix_inputs
from .pipeline import PipelineConfig, init_state, train_pretrained, train_step_sl, train_step_ssl

__all__ = [
    "Tensor",
    "backward",
    "gradcheck",
    "no_grad",
    "MixerConfig",
    "MixerParams",
    "MixMask",
    "generate_mask",
    "lambda_adjust",
    "mix_inputs",
    "PipelineConfig",
    "init_state",
    "train_pretrained",
    "train_step_sl",
    "train_step_ssl",
]
