"""The cascaded restoration network plus parameter/operation accounting."""
from __future__ import annotations

import math
import warnings
from collections.abc import Iterator

import torch
from torch import nn

from .attention import attention_mac_count, effective_window
from .config import ARRANGEMENTS, BlockConfig, ModelConfig, SlsstConfig
from .errors import ConfigurationError
from .layers import Conv3x3, LayerNorm2d
from .lss_block import LSSBlock
from .slsst import SLSST

__all__ = [
    "HyperRestormer",
    "build_model",
    "init_parameters",
    "count_parameters",
    "count_macs",
    "count_parameters_dense",
    "count_macs_dense",
    "apply_ablation",
    "ablation_flags",
]


def ablation_flags(config: ModelConfig) -> dict:
    return {
        "use_spe": config.use_spe,
        "use_spa": config.use_spa,
        "use_llff": config.use_llff,
        "arrangement": config.arrangement,
    }


class HyperRestormer(nn.Module):
    """3x3 conv in, ``n_stages`` SLSSTs, 3x3 conv out.

    ``seed`` and ``step`` travel with the module so that a checkpoint captures
    the whole model state.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.seed = 0
        self.step = 0
        flags = ablation_flags(config)
        self.conv_in = Conv3x3(config.in_channels, config.embed_dim)
        self.stages = nn.ModuleList(
            SLSST(config.embed_dim, config.slsst, config.block, **flags) for _ in range(config.n_stages)
        )
        self.conv_out = Conv3x3(config.embed_dim, config.channels)

    def forward(self, d: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        squeeze = d.dim() == 3
        x = d.unsqueeze(0) if squeeze else d
        if x.shape[-3] != self.config.channels:
            raise ConfigurationError(
                f"model was built for {self.config.channels} bands, input has {x.shape[-3]}"
            )
        if self.config.mask_channel:
            if mask is None:
                mask = torch.ones_like(x)
            x = torch.cat([x, mask.reshape(x.shape).to(x.dtype)], dim=-3)
        f = self.conv_in(x)
        for stage in self.stages:
            f = stage(f)
        out = self.conv_out(f)
        return out[0] if squeeze else out


# --------------------------------------------------------------------------
# Initialization


def _fan_in(p: torch.Tensor, owner: nn.Module) -> int:
    if isinstance(owner, nn.Conv2d):
        return p.shape[1] * p.shape[2] * p.shape[3]
    return p.shape[0]


def init_parameters(model: nn.Module, seed: int) -> None:
    """Deterministic re-initialization of every parameter from ``seed``.

    Fan-in scaled uniform for convolution and projection weights; zeros for
    biases and the relative position tables; ones for normalization gains and
    the alpha/beta/sigma scalars.
    """
    gen = torch.Generator().manual_seed(int(seed))
    owners = {}
    for mod_name, mod in model.named_modules():
        for p_name, _ in mod.named_parameters(recurse=False):
            owners[f"{mod_name}.{p_name}" if mod_name else p_name] = mod
    with torch.no_grad():
        for name, p in model.named_parameters():
            owner = owners[name]
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("alpha", "beta", "sigma"):
                p.fill_(1.0)
            elif leaf == "bias_table":
                p.zero_()
            elif isinstance(owner, LayerNorm2d):
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "bias":
                p.zero_()
            else:
                bound = 1.0 / math.sqrt(_fan_in(p, owner))
                noise = torch.rand(p.shape, generator=gen, dtype=torch.float64)
                p.copy_((2.0 * noise - 1.0) * bound)


def build_model(config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> HyperRestormer:
    if not (config.use_spe or config.use_spa or config.use_llff):
        warnings.warn(
            "both attention branches and the LLFF are disabled; the model reduces to convolutions only",
            stacklevel=2,
        )
    model = HyperRestormer(config)
    init_parameters(model, seed)
    model.seed = int(seed)
    return model.to(dtype)


def apply_ablation(
    config: ModelConfig,
    use_spe: bool | None = None,
    use_spa: bool | None = None,
    use_llff: bool | None = None,
    arrangement: str | None = None,
) -> ModelConfig:
    """Return ``config`` with the given ablation switches changed."""
    changes = {
        k: v
        for k, v in dict(use_spe=use_spe, use_spa=use_spa, use_llff=use_llff, arrangement=arrangement).items()
        if v is not None
    }
    if "arrangement" in changes and changes["arrangement"] not in ARRANGEMENTS:
        raise ConfigurationError(f"arrangement must be one of {ARRANGEMENTS}, got {changes['arrangement']!r}")
    out = config.replace(**changes)
    if not (out.use_spe or out.use_spa or out.use_llff):
        warnings.warn(
            "both attention branches and the LLFF are disabled; the model reduces to convolutions only",
            stacklevel=2,
        )
    return out


# --------------------------------------------------------------------------
# Analytic parameter counts


def _conv_params(cin: int, cout: int, k: int, groups: int = 1) -> int:
    return cout * (cin // groups) * k * k + cout


def _block_params(dim: int, window: int, block: BlockConfig, arrangement: str) -> int:
    sub = block.subspace_width(dim)
    dv = block.value_width(sub)
    hq = block.heads * block.d_qk
    spe = 2 * dim + _conv_params(dim, sub, 1) + 3 * sub * sub + block.heads + _conv_params(sub, dim, 1)
    spa = (
        2 * dim
        + _conv_params(dim, sub, 1)
        + 2 * sub * hq
        + sub * dv
        + block.heads * (2 * window - 1) ** 2
        + _conv_params(dv, dim, 1)
    )
    hidden = block.ffn_expansion * dim
    gated = hidden // 2
    llff = (
        (2 * dim if block.llff_prenorm else 0)
        + _conv_params(dim, hidden, 1)
        + _conv_params(gated, gated, 3, groups=gated)
        + _conv_params(gated, dim, 1)
    )
    return spe + spa + llff + (2 if arrangement == "parallel" else 0)


def _downsample_params(cin: int, cout: int) -> int:
    return _conv_params(cin, cin, 4, groups=cin) + _conv_params(cin, cout, 1)


def _upsample_params(cin: int) -> int:
    return _conv_params(cin, 16 * (cin // 2), 3)


def _u_params(embed_dim: int, width: int, cfg: SlsstConfig, block: BlockConfig, arrangement: str) -> int:
    depths = cfg.abundance_depths
    widths = [width * 2**i for i in range(len(depths) + 1)]
    total = _conv_params(embed_dim, width, 1) + _conv_params(width, width, 3)
    for i, d in enumerate(depths):
        blocks = 2 * d * _block_params(widths[i], cfg.window_size, block, arrangement)
        total += blocks + _downsample_params(widths[i], widths[i + 1]) + _upsample_params(widths[i + 1])
        if cfg.skip_merge == "concat":
            total += _conv_params(2 * widths[i], widths[i], 1)
    total += cfg.bottleneck_depth * _block_params(widths[-1], cfg.window_size, block, arrangement)
    return total


def _basis_params(embed_dim: int, cfg: SlsstConfig, block: BlockConfig, arrangement: str) -> int:
    total = 2 * _conv_params(embed_dim, embed_dim, 1)
    total += sum(cfg.basis_depths) * _block_params(embed_dim, cfg.window_size, block, arrangement)
    total += (len(cfg.basis_depths) - 1) * _downsample_params(embed_dim, embed_dim)
    return total


def count_parameters(config: ModelConfig) -> int:
    """Number of learnable scalars, from the configuration alone."""
    e = config.embed_dim
    stage = _basis_params(e, config.slsst, config.block, config.arrangement) + _u_params(
        e, config.slsst.n_basis, config.slsst, config.block, config.arrangement
    )
    return (
        _conv_params(config.in_channels, e, 3)
        + config.n_stages * stage
        + _conv_params(e, config.channels, 3)
    )


def count_parameters_dense(config: ModelConfig) -> int:
    """Same cascade with each stage replaced by a U-shaped branch at width E."""
    e = config.embed_dim
    stage = _u_params(e, e, config.slsst, config.block, config.arrangement)
    return _conv_params(config.in_channels, e, 3) + config.n_stages * stage + _conv_params(e, config.channels, 3)


# --------------------------------------------------------------------------
# Analytic multiply-accumulate counts
#
# Counted: every convolution, every projection matmul, the attention cores and
# the basis x abundance product. Not counted: normalization, softmax, gating,
# bias additions and other element-wise work.


def _block_macs(dim: int, h: int, w: int, window: int, block: BlockConfig, flags: dict) -> int:
    hw = h * w
    sub = block.subspace_width(dim)
    dv = block.value_width(sub)
    total = 0
    if flags["use_spe"]:
        total += hw * dim * sub + 3 * hw * sub * sub + hw * sub * dim
        total += attention_mac_count("spectral", sub, h, w, heads=block.heads)
    if flags["use_spa"]:
        m = effective_window(window, h, w)
        padded = math.ceil(h / m) * m * math.ceil(w / m) * m
        total += hw * dim * sub + padded * sub * (2 * block.heads * block.d_qk + dv) + hw * dv * dim
        total += attention_mac_count("window", sub, h, w, window, block.d_qk, dv, block.heads)
    if flags["use_llff"]:
        hidden = block.ffn_expansion * dim
        gated = hidden // 2
        total += hw * dim * hidden + hw * gated * 9 + hw * gated * dim
    return total


def _downsample_macs(cin: int, cout: int, h: int, w: int) -> int:
    ho, wo = math.ceil(h / 4), math.ceil(w / 4)
    return ho * wo * cin * 16 + ho * wo * cin * cout


def _u_macs(embed_dim: int, width: int, size: int, cfg: SlsstConfig, block: BlockConfig, flags: dict) -> int:
    depths = cfg.abundance_depths
    win = cfg.window_size
    total = size * size * embed_dim * width + size * size * width * width * 9
    s = size
    for i, d in enumerate(depths):
        wi = width * 2**i
        enc_dec = 2 * d * _block_macs(wi, s, s, win, block, flags)
        down = _downsample_macs(wi, 2 * wi, s, s)
        up = (s // 4) ** 2 * (2 * wi) * 16 * wi * 9
        merge = s * s * 2 * wi * wi if cfg.skip_merge == "concat" else 0
        total += enc_dec + down + up + merge
        s //= 4
    total += cfg.bottleneck_depth * _block_macs(width * 2 ** len(depths), s, s, win, block, flags)
    return total


def _basis_macs(embed_dim: int, size: int, cfg: SlsstConfig, block: BlockConfig, flags: dict) -> int:
    e = embed_dim
    total = size * size * e * e
    s = size
    for i, d in enumerate(cfg.basis_depths):
        total += d * _block_macs(e, s, s, cfg.window_size, block, flags)
        if i < len(cfg.basis_depths) - 1:
            total += _downsample_macs(e, e, s, s)
            s //= 4
    return total + s * s * e * e


def _check_hw(config: ModelConfig, height: int, width: int) -> int:
    size = config.slsst.input_size
    if height < 1 or width < 1:
        raise ConfigurationError("spatial size must be positive")
    if height > size or width > size:
        raise ConfigurationError(f"spatial size {height}x{width} exceeds the stage input size {size}")
    return size


def _io_macs(config: ModelConfig, height: int, width: int) -> int:
    e = config.embed_dim
    return height * width * 9 * e * (config.in_channels + config.channels)


def count_macs(config: ModelConfig, height: int, width: int) -> int:
    """Multiply-accumulates of one forward pass on an ``height x width`` cube."""
    size = _check_hw(config, height, width)
    flags = ablation_flags(config)
    e = config.embed_dim
    nb = config.slsst.n_basis
    stage = (
        _basis_macs(e, size, config.slsst, config.block, flags)
        + _u_macs(e, nb, size, config.slsst, config.block, flags)
        + e * nb * height * width
    )
    return _io_macs(config, height, width) + config.n_stages * stage


def count_macs_dense(config: ModelConfig, height: int, width: int) -> int:
    """:func:`count_macs` for the variant whose U-shaped branch runs at width E."""
    size = _check_hw(config, height, width)
    flags = ablation_flags(config)
    stage = _u_macs(config.embed_dim, config.embed_dim, size, config.slsst, config.block, flags)
    return _io_macs(config, height, width) + config.n_stages * stage


def iter_lss_blocks(model: nn.Module) -> Iterator[LSSBlock]:
    for m in model.modules():
        if isinstance(m, LSSBlock):
            yield m
