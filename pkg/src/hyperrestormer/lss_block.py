"""Lightweight spectral-spatial transformer block.

Two attention branches (channel tokens and windowed pixel tokens) read the
same input; their reweighted sum goes through a gated feed-forward network
with a depthwise 3x3 convolution (LLFF).
"""
from __future__ import annotations

import torch
from torch import nn

from .attention import SpectralSelfAttention, WindowSelfAttention
from .config import ARRANGEMENTS, BlockConfig
from .errors import ConfigurationError
from .layers import Conv3x3, LayerNorm2d, conv1x1

__all__ = [
    "simple_gate",
    "LLFF",
    "SpectralAttentionBlock",
    "SpatialAttentionBlock",
    "LSSBlock",
]


def simple_gate(x: torch.Tensor) -> torch.Tensor:
    """Split channels in half and multiply the halves element-wise."""
    c = x.shape[-3]
    if c % 2:
        raise ConfigurationError(f"simple gate needs an even channel count, got {c}")
    a, b = x.split(c // 2, dim=-3)
    return a * b


class LLFF(nn.Module):
    """1x1 expand -> simple gate -> 3x3 depthwise -> 1x1 project, plus residual."""

    def __init__(self, dim: int, expansion: int = 2, prenorm: bool = True, eps: float = 1e-6):
        super().__init__()
        hidden = expansion * dim
        if hidden % 2:
            raise ConfigurationError(f"LLFF expansion {expansion} x width {dim} must be even for the gate")
        gated = hidden // 2
        self.dim = dim
        self.norm = LayerNorm2d(dim, eps) if prenorm else None
        self.expand = conv1x1(dim, hidden)
        self.dwconv = Conv3x3(gated, gated, groups=gated)
        self.project = conv1x1(gated, dim)

    def body(self, x: torch.Tensor) -> torch.Tensor:
        if self.norm is not None:
            x = self.norm(x)
        return self.project(self.dwconv(simple_gate(self.expand(x))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3] != self.dim:
            raise ConfigurationError(f"LLFF built for {self.dim} channels received {x.shape[-3]}")
        return x + self.body(x)


class SpectralAttentionBlock(nn.Module):
    """``x + up(S-SA(down(LN(x))))`` with 1x1 subspace projections."""

    def __init__(self, dim: int, cfg: BlockConfig = BlockConfig()):
        super().__init__()
        sub = cfg.subspace_width(dim)
        self.dim = dim
        self.norm = LayerNorm2d(dim, cfg.norm_eps)
        self.proj_down = conv1x1(dim, sub)
        self.core = SpectralSelfAttention(sub, cfg.heads)
        self.proj_up = conv1x1(sub, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3] != self.dim:
            raise ConfigurationError(f"spectral attention block built for {self.dim} channels received {x.shape[-3]}")
        return x + self.proj_up(self.core(self.proj_down(self.norm(x))))


class SpatialAttentionBlock(nn.Module):
    """Same sandwich as :class:`SpectralAttentionBlock` around window attention."""

    def __init__(self, dim: int, window_size: int, cfg: BlockConfig = BlockConfig()):
        super().__init__()
        sub = cfg.subspace_width(dim)
        self.dim = dim
        self.norm = LayerNorm2d(dim, cfg.norm_eps)
        self.proj_down = conv1x1(dim, sub)
        self.core = WindowSelfAttention(sub, window_size, cfg.d_qk, cfg.value_width(sub), cfg.heads)
        self.proj_up = conv1x1(self.core.out_channels, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3] != self.dim:
            raise ConfigurationError(f"spatial attention block built for {self.dim} channels received {x.shape[-3]}")
        return x + self.proj_up(self.core(self.proj_down(self.norm(x))))


class LSSBlock(nn.Module):
    """``LLFF(alpha * SpeA(x) + beta * SpaA(x))`` and its ablated variants.

    Disabled branches keep their parameters (so ablated models share a state
    layout with the full one) but are never evaluated, which leaves their
    gradients at exactly zero. Sequential arrangements chain the two branches
    and carry no reweighting scalars.
    """

    def __init__(
        self,
        dim: int,
        window_size: int,
        cfg: BlockConfig = BlockConfig(),
        use_spe: bool = True,
        use_spa: bool = True,
        use_llff: bool = True,
        arrangement: str = "parallel",
    ):
        super().__init__()
        if arrangement not in ARRANGEMENTS:
            raise ConfigurationError(f"arrangement must be one of {ARRANGEMENTS}, got {arrangement!r}")
        self.dim = dim
        self.use_spe = use_spe
        self.use_spa = use_spa
        self.use_llff = use_llff
        self.arrangement = arrangement
        self.spe = SpectralAttentionBlock(dim, cfg)
        self.spa = SpatialAttentionBlock(dim, window_size, cfg)
        if arrangement == "parallel":
            self.alpha = nn.Parameter(torch.ones(()))
            self.beta = nn.Parameter(torch.ones(()))
        self.llff = LLFF(dim, cfg.ffn_expansion, cfg.llff_prenorm, cfg.norm_eps)

    def mix(self, x: torch.Tensor) -> torch.Tensor:
        """The attention part of the block, before the feed-forward network."""
        if self.arrangement == "parallel":
            z = torch.zeros_like(x)
            if self.use_spe:
                z = z + self.alpha * self.spe(x)
            if self.use_spa:
                z = z + self.beta * self.spa(x)
            return z
        order = (self.spe, self.spa) if self.arrangement == "spe_then_spa" else (self.spa, self.spe)
        for branch in order:
            if (branch is self.spe and self.use_spe) or (branch is self.spa and self.use_spa):
                x = branch(x)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3] != self.dim:
            raise ConfigurationError(f"LSS block built for {self.dim} channels received {x.shape[-3]}")
        z = self.mix(x)
        return self.llff(z) if self.use_llff else z
