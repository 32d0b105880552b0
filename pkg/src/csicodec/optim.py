"""Adam optimizer and cosine-annealed learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidRange, ShapeMismatch


@dataclass
class AdamState:
    """Per-parameter moment buffers, keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update in place.

    `grads` maps parameter name to gradient; None falls back to the gradient
    accumulated on each parameter's array. A missing/None gradient counts as
    zero. Non-trainable parameters are untouched.
    """
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p in params:
        if not p.trainable:
            continue
        if grads is not None:
            g = grads.get(p.name)
        else:
            g = p.array.grad
        if g is None:
            g = np.zeros_like(p.array.values)
        elif g.shape != p.array.values.shape:
            raise ShapeMismatch(
                f"gradient shape {g.shape} != parameter shape {p.array.values.shape} for {p.name}")
        m = state.first_moment.get(p.name)
        if m is None:
            m = state.first_moment[p.name] = np.zeros_like(p.array.values)
            state.second_moment[p.name] = np.zeros_like(p.array.values)
        v = state.second_moment[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.array.values -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def cosine_lr(epoch, period, lr_min, lr_max):
    """Cosine annealing: lr_max at epoch 0 down to lr_min at the period end."""
    if lr_min > lr_max:
        raise InvalidRange(f"lr_min {lr_min} > lr_max {lr_max}")
    if period <= 0:
        raise InvalidRange("period must be positive")
    if epoch < 0:
        raise InvalidRange("epoch must be >= 0")
    phase = (epoch % period) / period
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * phase))
