"""Small building blocks shared by the transformer blocks and the stages."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


def reflect_pad(x: torch.Tensor, left: int, right: int, top: int, bottom: int) -> torch.Tensor:
    """Reflect padding, falling back to edge replication on maps too small to reflect."""
    if not (left or right or top or bottom):
        return x
    h, w = x.shape[-2:]
    mode = "reflect" if max(top, bottom) < h and max(left, right) < w else "replicate"
    return F.pad(x, (left, right, top, bottom), mode=mode)


def pad_to(x: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Pad at the bottom/right up to ``height x width``."""
    h, w = x.shape[-2:]
    return reflect_pad(x, 0, width - w, 0, height - h)


class Conv3x3(nn.Conv2d):
    """3x3 convolution with reflect "same" padding."""

    def __init__(self, in_channels: int, out_channels: int, groups: int = 1, bias: bool = True):
        super().__init__(in_channels, out_channels, kernel_size=3, padding=0, groups=groups, bias=bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return super().forward(reflect_pad(x, 1, 1, 1, 1))


def conv1x1(in_channels: int, out_channels: int, bias: bool = True) -> nn.Conv2d:
    return nn.Conv2d(in_channels, out_channels, kernel_size=1, bias=bias)


class LayerNorm2d(nn.Module):
    """Layer normalization over the channel axis of every pixel."""

    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        mu = x.mean(dim=-3, keepdim=True)
        var = x.var(dim=-3, keepdim=True, unbiased=False)
        return (x - mu) / torch.sqrt(var + self.eps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        shape = (-1, 1, 1)
        return self.normalize(x) * self.weight.reshape(shape) + self.bias.reshape(shape)
