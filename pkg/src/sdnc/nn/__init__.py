"""Minimal numpy autodiff and transformer blocks used by the SDNC model."""

from .autodiff import Tensor, backward, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .layers import AttentionMask, ModelParams, linear, layer_norm, multi_head_attention
from .optim import Adam, adam_step
from .autodiff import softmax_cross_entropy

__all__ = [
    "Adam",
    "AttentionMask",
    "GradCheckReport",
    "ModelParams",
    "Tensor",
    "adam_step",
    "backward",
    "grad_check",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "multi_head_attention",
    "no_grad",
    "save_checkpoint",
    "softmax_cross_entropy",
]
