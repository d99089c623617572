"""Trainable parameters and the AdamW update."""
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import DivergenceError


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    adam_m: np.ndarray = field(default=None)
    adam_v: np.ndarray = field(default=None)
    step_count: int = 0

    def __post_init__(self):
        value = np.asarray(self.value)
        dtype = value.dtype if value.dtype in (np.float32, np.float64) else np.float64
        self.value = np.array(value, dtype=dtype)
        for name in ("grad", "adam_m", "adam_v"):
            arr = getattr(self, name)
            if arr is None:
                arr = np.zeros_like(self.value)
            elif np.shape(arr) != self.value.shape:
                raise ValueError(f"{name} shape {np.shape(arr)} != value shape {self.value.shape}")
            setattr(self, name, np.array(arr, dtype=dtype))

    def zero_grad(self):
        self.grad[...] = 0.0


def adamw_step(param, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """Decoupled-weight-decay Adam with bias correction; updates ``param`` in place.

    theta <- theta - lr * weight_decay * theta - lr * m_hat / (sqrt(v_hat) + eps)
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise ValueError("betas must lie in [0, 1)")
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite gradient")
    param.step_count += 1
    param.adam_m = beta1 * param.adam_m + (1.0 - beta1) * g
    param.adam_v = beta2 * param.adam_v + (1.0 - beta2) * g * g
    if lr == 0:
        return param
    m_hat = param.adam_m / (1.0 - beta1 ** param.step_count)
    v_hat = param.adam_v / (1.0 - beta2 ** param.step_count)
    if weight_decay:
        param.value *= 1.0 - lr * weight_decay
    param.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param


class AdamW:
    """Applies :func:`adamw_step` to a dict of named params."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.grad)):
                raise DivergenceError(f"non-finite gradient in {name}")
        for p in self.params.values():
            adamw_step(p, self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)


def cosine_lr(base, step, total, final_ratio=1.0):
    """Cosine decay from ``base`` at step 0 to ``base * final_ratio`` at ``total``."""
    if total <= 1 or final_ratio == 1.0:
        return base
    frac = min(step, total - 1) / (total - 1)
    return base * (final_ratio + (1.0 - final_ratio) * 0.5 * (1.0 + math.cos(math.pi * frac)))
