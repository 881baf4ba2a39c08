"""Single-stage low-rank spectral-spatial transformer (SLSST).

A stage factorizes its residual update into a basis (``E x sqrt(NB) x
sqrt(NB)``, produced by a sequential downsampling branch) and an abundance
(``NB x H x W``, produced by a U-shaped branch). Their reshaped product is an
``E x HW`` matrix of rank at most ``NB``.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .config import BlockConfig, SlsstConfig
from .errors import ConfigurationError
from .layers import Conv3x3, conv1x1, pad_to, reflect_pad
from .lss_block import LSSBlock

__all__ = ["Downsample", "Upsample", "BasisModule", "AbundanceModule", "SLSST", "pixel_shuffle"]


def pixel_shuffle(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Move ``factor^2`` channel groups into ``factor x factor`` pixel blocks.

    ``out[c, h*r + i, w*r + j] = x[c*r*r + i*r + j, h, w]``.
    """
    return F.pixel_shuffle(x, factor)


class Downsample(nn.Module):
    """4x4 depthwise convolution with stride 4, then a 1x1 pointwise mix."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.depthwise = nn.Conv2d(in_channels, in_channels, kernel_size=4, stride=4, groups=in_channels)
        self.pointwise = conv1x1(in_channels, out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        x = reflect_pad(x, 0, (-w) % 4, 0, (-h) % 4)
        return self.pointwise(self.depthwise(x))


class Upsample(nn.Module):
    """3x3 convolution to ``16 * C/2`` channels followed by a 4x pixel shuffle."""

    def __init__(self, in_channels: int):
        super().__init__()
        if in_channels % 2:
            raise ConfigurationError(f"upsampling halves the width; {in_channels} channels is odd")
        self.conv = Conv3x3(in_channels, 16 * (in_channels // 2))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return pixel_shuffle(self.conv(x), 4)


def _blocks(depth: int, dim: int, window: int, block: BlockConfig, flags: dict) -> nn.Sequential:
    return nn.Sequential(*[LSSBlock(dim, window, block, **flags) for _ in range(depth)])


class BasisModule(nn.Module):
    def __init__(self, embed_dim: int, cfg: SlsstConfig, block: BlockConfig = BlockConfig(), **flags):
        super().__init__()
        self.side = cfg.basis_side
        self.input_size = cfg.input_size
        self.proj = conv1x1(embed_dim, embed_dim)
        self.levels = nn.ModuleList(_blocks(d, embed_dim, cfg.window_size, block, flags) for d in cfg.basis_depths)
        self.downs = nn.ModuleList(Downsample(embed_dim, embed_dim) for _ in cfg.basis_depths[:-1])
        self.out = conv1x1(embed_dim, embed_dim)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if tuple(f.shape[-2:]) != (self.input_size, self.input_size):
            raise ConfigurationError(
                f"basis branch expects a {self.input_size}x{self.input_size} map, got {tuple(f.shape[-2:])}"
            )
        x = self.proj(f)
        for i, level in enumerate(self.levels):
            x = level(x)
            if i < len(self.downs):
                x = self.downs[i](x)
        return self.out(x)


class AbundanceModule(nn.Module):
    """U-shaped branch: widths double on the way down and halve on the way up."""

    def __init__(
        self,
        embed_dim: int,
        cfg: SlsstConfig,
        block: BlockConfig = BlockConfig(),
        width: int | None = None,
        **flags,
    ):
        super().__init__()
        width = cfg.n_basis if width is None else width
        depths = cfg.abundance_depths
        widths = [width * 2**i for i in range(len(depths) + 1)]
        self.widths = widths
        self.skip_merge = cfg.skip_merge
        win = cfg.window_size
        self.proj = conv1x1(embed_dim, width)
        self.encoders = nn.ModuleList(_blocks(d, widths[i], win, block, flags) for i, d in enumerate(depths))
        self.downs = nn.ModuleList(Downsample(widths[i], widths[i + 1]) for i in range(len(depths)))
        self.bottleneck = _blocks(cfg.bottleneck_depth, widths[-1], win, block, flags)
        # decoder modules are stored shallow-to-deep, mirroring the encoder
        self.ups = nn.ModuleList(Upsample(widths[i + 1]) for i in range(len(depths)))
        if self.skip_merge == "concat":
            self.merges = nn.ModuleList(conv1x1(2 * widths[i], widths[i]) for i in range(len(depths)))
        self.decoders = nn.ModuleList(_blocks(d, widths[i], win, block, flags) for i, d in enumerate(depths))
        self.out = Conv3x3(width, width)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        h, w = f.shape[-2:]
        scale = 4 ** len(self.encoders)
        if h % scale or w % scale:
            raise ConfigurationError(f"abundance branch needs sizes divisible by {scale}, got {h}x{w}")
        x = self.proj(f)
        skips = []
        for enc, down in zip(self.encoders, self.downs):
            x = enc(x)
            skips.append(x)
            x = down(x)
        x = self.bottleneck(x)
        for i in reversed(range(len(self.encoders))):
            x = self.ups[i](x)
            if self.skip_merge == "concat":
                x = self.merges[i](torch.cat([x, skips[i]], dim=-3))
            else:
                x = x + skips[i]
            x = self.decoders[i](x)
        return self.out(x)


class SLSST(nn.Module):
    def __init__(self, embed_dim: int, cfg: SlsstConfig = SlsstConfig(), block: BlockConfig = BlockConfig(), **flags):
        super().__init__()
        self.embed_dim = embed_dim
        self.cfg = cfg
        self.basis = BasisModule(embed_dim, cfg, block, **flags)
        self.abundance = AbundanceModule(embed_dim, cfg, block, **flags)

    def components(self, f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Basis ``B x E x s x s`` and abundance ``B x NB x H x W`` for a batch."""
        h, w = f.shape[-2:]
        size = self.cfg.input_size
        if h > size or w > size:
            dim = "height" if h > size else "width"
            raise ConfigurationError(
                f"{dim} {max(h, w)} exceeds the stage input size {size} = sqrt(n_basis) * 4^{len(self.cfg.basis_depths) - 1}; "
                "add a basis_depths level or raise n_basis"
            )
        fp = pad_to(f, size, size)
        return self.basis(fp), self.abundance(fp)[..., :h, :w]

    def update(self, f: torch.Tensor) -> torch.Tensor:
        """The low-rank residual ``reshape(B' A')`` added by this stage."""
        squeeze = f.dim() == 3
        fb = f.unsqueeze(0) if squeeze else f
        if fb.shape[-3] != self.embed_dim:
            raise ConfigurationError(f"stage built for width {self.embed_dim} received {fb.shape[-3]} channels")
        b, e, h, w = fb.shape
        basis, abundance = self.components(fb)
        prod = basis.reshape(b, e, -1) @ abundance.reshape(b, self.cfg.n_basis, h * w)
        prod = prod.reshape(b, e, h, w)
        return prod[0] if squeeze else prod

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return f + self.update(f)
