"""Minimal differentiable substrate: layers, AdamW, random streams, grad checks."""
from .gradcheck import grad_check
from .kernels import BACKEND
from .layers import LAYER_KINDS, layer_backward, layer_forward
from .optim import AdamW, Param, adamw_step
from .rng import RngStream, gaussian

__all__ = [
    "BACKEND", "LAYER_KINDS", "AdamW", "Param", "RngStream", "adamw_step",
    "gaussian", "grad_check", "layer_backward", "layer_forward",
]
