"""Architecture configuration objects.

Everything that changes the set or shape of learnable arrays lives here, so a
checkpoint can rebuild its model from the stored config alone.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any

from .errors import ConfigurationError

CONFIG_FORMAT_VERSION = 1

ARRANGEMENTS = ("parallel", "spe_then_spa", "spa_then_spe")
TASKS = ("denoise", "inpaint", "superres")


@dataclass(frozen=True)
class BlockConfig:
    """Knobs of one LSS transformer block that the text leaves open.

    ``reduction`` is the subspace factor of the 1x1 projections in front of
    both attention cores; ``d_v=None`` means "operating width".
    """

    reduction: int = 2
    d_qk: int = 1
    d_v: int | None = None
    heads: int = 1
    ffn_expansion: int = 2
    llff_prenorm: bool = True
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.reduction < 1:
            raise ConfigurationError(f"reduction must be >= 1, got {self.reduction}")
        if self.d_qk < 1 or (self.d_v is not None and self.d_v < 1):
            raise ConfigurationError("attention projection widths must be positive")
        if self.heads < 1:
            raise ConfigurationError(f"heads must be >= 1, got {self.heads}")
        if self.ffn_expansion < 1:
            raise ConfigurationError(f"ffn_expansion must be >= 1, got {self.ffn_expansion}")

    def subspace_width(self, dim: int) -> int:
        return max(1, math.ceil(dim / self.reduction))

    def value_width(self, dim: int) -> int:
        """Value width of window attention running at operating width ``dim``."""
        return dim if self.d_v is None else self.d_v


@dataclass(frozen=True)
class SlsstConfig:
    n_basis: int = 16
    basis_depths: tuple[int, ...] = (1, 1, 1)
    abundance_depths: tuple[int, ...] = (1, 1)
    bottleneck_depth: int = 1
    window_size: int = 8
    skip_merge: str = "concat"

    def __post_init__(self):
        object.__setattr__(self, "basis_depths", tuple(int(d) for d in self.basis_depths))
        object.__setattr__(self, "abundance_depths", tuple(int(d) for d in self.abundance_depths))
        root = math.isqrt(self.n_basis) if self.n_basis > 0 else 0
        if self.n_basis < 1 or root * root != self.n_basis:
            raise ConfigurationError(f"n_basis must be a positive perfect square, got {self.n_basis}")
        if not self.basis_depths:
            raise ConfigurationError("basis_depths needs at least one scale")
        if any(d < 0 for d in self.basis_depths + self.abundance_depths) or self.bottleneck_depth < 0:
            raise ConfigurationError("block depths must be non-negative")
        if self.window_size < 1:
            raise ConfigurationError(f"window_size must be positive, got {self.window_size}")
        if self.skip_merge not in ("concat", "add"):
            raise ConfigurationError(f"skip_merge must be 'concat' or 'add', got {self.skip_merge!r}")
        if len(self.abundance_depths) > len(self.basis_depths) - 1 + _factor4_exponent(root):
            raise ConfigurationError(
                f"{len(self.abundance_depths)} abundance levels need the stage input to be divisible by "
                f"4^{len(self.abundance_depths)}, but the basis branch fixes it at "
                f"sqrt(n_basis)*4^{len(self.basis_depths) - 1} = {self.input_size}"
            )

    @property
    def basis_side(self) -> int:
        return math.isqrt(self.n_basis)

    @property
    def input_size(self) -> int:
        """Spatial side every stage works at (smaller inputs are padded up)."""
        return self.basis_side * 4 ** (len(self.basis_depths) - 1)


def _factor4_exponent(n: int) -> int:
    k = 0
    while n and n % 4 == 0:
        n //= 4
        k += 1
    return k


@dataclass(frozen=True)
class ModelConfig:
    channels: int
    embed_dim: int = 172
    n_stages: int = 4
    slsst: SlsstConfig = field(default_factory=SlsstConfig)
    block: BlockConfig = field(default_factory=BlockConfig)
    task: str = "denoise"
    scale: int = 4
    mask_channel: bool = False
    use_spe: bool = True
    use_spa: bool = True
    use_llff: bool = True
    arrangement: str = "parallel"

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigurationError(f"channels must be >= 1, got {self.channels}")
        if self.n_stages < 1:
            raise ConfigurationError(f"n_stages must be >= 1, got {self.n_stages}")
        if self.embed_dim < 1:
            raise ConfigurationError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.task not in TASKS:
            raise ConfigurationError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.arrangement not in ARRANGEMENTS:
            raise ConfigurationError(f"arrangement must be one of {ARRANGEMENTS}, got {self.arrangement!r}")
        if self.scale not in (4, 8):
            raise ConfigurationError(f"scale must be 4 or 8, got {self.scale}")

    @property
    def in_channels(self) -> int:
        return 2 * self.channels if self.mask_channel else self.channels

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["slsst"]["basis_depths"] = list(self.slsst.basis_depths)
        d["slsst"]["abundance_depths"] = list(self.slsst.abundance_depths)
        d["format_version"] = CONFIG_FORMAT_VERSION
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        data = dict(data)
        version = data.pop("format_version", CONFIG_FORMAT_VERSION)
        if version != CONFIG_FORMAT_VERSION:
            raise ConfigurationError(f"unsupported model config format_version {version}")
        _reject_unknown(cls, data, "model")
        slsst = data.pop("slsst", {}) or {}
        block = data.pop("block", {}) or {}
        _reject_unknown(SlsstConfig, slsst, "slsst")
        _reject_unknown(BlockConfig, block, "block")
        return cls(slsst=SlsstConfig(**slsst), block=BlockConfig(**block), **data)

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def _reject_unknown(cls, data: dict, where: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown {where} config keys: {', '.join(unknown)}")
