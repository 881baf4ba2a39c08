"""Decoupled-weight-decay Adam and the cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import NumericError


@dataclass
class OptimizerState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


@dataclass(frozen=True)
class AdamWParams:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def cosine_lr(step: int, total: int, lr_max: float = 3e-4, lr_min: float = 1e-6) -> float:
    """``lr_min + (lr_max - lr_min) * (1 + cos(pi * t / T)) / 2``; clamps past ``T``."""
    if total <= 0 or step >= total:
        return lr_min
    step = max(step, 0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))


def optimizer_step(model: nn.Module, opt_state: OptimizerState, lr: float, params: AdamWParams = AdamWParams()) -> OptimizerState:
    """One AdamW update of ``model`` in place from the gradients in ``.grad``.

    Parameters without a gradient are treated as having a zero gradient.
    Non-finite gradients abort the step before anything is modified.
    """
    named = list(model.named_parameters())
    for name, p in named:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient in parameter {name}")
    opt_state.step += 1
    t = opt_state.step
    b1, b2 = params.beta1, params.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    with torch.no_grad():
        for name, p in named:
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            m = opt_state.exp_avg.get(name)
            v = opt_state.exp_avg_sq.get(name)
            if m is None:
                m = opt_state.exp_avg[name] = torch.zeros_like(p)
                v = opt_state.exp_avg_sq[name] = torch.zeros_like(p)
            if params.weight_decay:
                p.mul_(1.0 - lr * params.weight_decay)
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / bc2).sqrt_().add_(params.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return opt_state
