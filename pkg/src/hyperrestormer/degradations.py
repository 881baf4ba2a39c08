"""Seeded simulators for the three degradation protocols.

Cubes are ``C x H x W`` float arrays in ``[0, 1]``. Every simulator is a pure
function of (cube, parameters, seed).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .errors import ConfigurationError

__all__ = [
    "StripeParams",
    "StripeGroup",
    "DegradationSpec",
    "rng_for",
    "draw_sigma",
    "add_gaussian_noise",
    "stripe_mask",
    "draw_stripes",
    "apply_stripes",
    "downsample_cube",
    "bicubic_kernel",
    "bicubic_weights",
    "bicubic_upsample",
    "degrade",
]

BLIND_RANGE = (30.0, 70.0)


def rng_for(seed: int, index: int = 0) -> np.random.Generator:
    """Independent generator for cube ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(index)]))


# --------------------------------------------------------------------------
# Gaussian noise


def draw_sigma(sigma_8bit: float | str | tuple[float, float], rng: np.random.Generator) -> float:
    """Resolve a noise level: a number, ``"blind"`` or an explicit interval."""
    if isinstance(sigma_8bit, str):
        if sigma_8bit != "blind":
            raise ConfigurationError(f"sigma must be a number or 'blind', got {sigma_8bit!r}")
        lo, hi = BLIND_RANGE
        return float(rng.uniform(lo, hi))
    if isinstance(sigma_8bit, (tuple, list)):
        lo, hi = (float(v) for v in sigma_8bit)
        if lo < 0 or hi < lo:
            raise ConfigurationError(f"invalid sigma interval {sigma_8bit}")
        return float(rng.uniform(lo, hi))
    sigma = float(sigma_8bit)
    if sigma < 0 or not math.isfinite(sigma):
        raise ConfigurationError(f"sigma must be a finite non-negative number, got {sigma_8bit}")
    return sigma


def add_gaussian_noise(
    x: np.ndarray,
    sigma_8bit: float | str | tuple[float, float],
    seed: int,
    index: int = 0,
    clip: bool = False,
) -> np.ndarray:
    """``x + N(0, (sigma/255)^2)`` i.i.d. per voxel, unclipped unless asked."""
    rng = rng_for(seed, index)
    sigma = draw_sigma(sigma_8bit, rng)
    x = np.asarray(x)
    if sigma == 0:
        y = x.copy()
    else:
        noise = rng.standard_normal(x.shape) * (sigma / 255.0)
        y = (x + noise).astype(x.dtype, copy=False)
    return np.clip(y, 0.0, 1.0) if clip else y


# --------------------------------------------------------------------------
# Stripes and missing bands


@dataclass(frozen=True)
class StripeParams:
    """Ranges the stripe simulator draws from (all inclusive).

    ``band_span=None`` means ``[1, max(1, C // 4)]``.
    """

    n_groups: tuple[int, int] = (3, 10)
    width: tuple[int, int] = (1, 10)
    band_span: tuple[int, int] | None = None
    n_missing_ranges: tuple[int, int] = (1, 5)
    missing_length: tuple[int, int] = (1, 10)
    orientation: str = "vertical"

    def __post_init__(self):
        for name in ("n_groups", "width", "band_span", "n_missing_ranges", "missing_length"):
            r = getattr(self, name)
            if r is None:
                continue
            r = tuple(int(v) for v in r)
            object.__setattr__(self, name, r)
            if len(r) != 2 or r[0] > r[1] or r[0] < 0:
                raise ConfigurationError(f"stripe range {name} must be a non-empty (lo, hi) pair, got {r}")
        if self.orientation not in ("vertical", "horizontal"):
            raise ConfigurationError(f"orientation must be vertical or horizontal, got {self.orientation!r}")


@dataclass(frozen=True)
class StripeGroup:
    """Zero lines ``[start, start + width)`` over bands ``[band_start, band_stop)``."""

    start: int
    width: int
    band_start: int
    band_stop: int


def stripe_mask(
    shape: tuple[int, int, int],
    groups: list[StripeGroup] = (),
    missing_bands: list[tuple[int, int]] = (),
    orientation: str = "vertical",
) -> np.ndarray:
    """Binary mask (1 observed, 0 missing) for explicit stripes and band ranges.

    Ranges running past the cube are clamped, never wrapped.
    """
    c, h, w = shape
    mask = np.ones(shape, dtype=np.uint8)
    lines = w if orientation == "vertical" else h
    for g in groups:
        s0, s1 = max(0, g.start), min(lines, g.start + g.width)
        b0, b1 = max(0, g.band_start), min(c, g.band_stop)
        if s0 >= s1 or b0 >= b1:
            continue
        if orientation == "vertical":
            mask[b0:b1, :, s0:s1] = 0
        else:
            mask[b0:b1, s0:s1, :] = 0
    for b0, b1 in missing_bands:
        b0, b1 = max(0, b0), min(c, b1)
        if b0 < b1:
            mask[b0:b1] = 0
    return mask


def draw_stripes(
    shape: tuple[int, int, int], params: StripeParams, rng: np.random.Generator
) -> tuple[list[StripeGroup], list[tuple[int, int]]]:
    c, h, w = shape
    lines = w if params.orientation == "vertical" else h
    span = params.band_span or (1, max(1, c // 4))
    groups = []
    for _ in range(int(rng.integers(params.n_groups[0], params.n_groups[1] + 1))):
        width = int(rng.integers(params.width[0], params.width[1] + 1))
        start = int(rng.integers(0, lines))
        n_bands = int(rng.integers(span[0], span[1] + 1))
        band_start = int(rng.integers(0, c))
        groups.append(StripeGroup(start, width, band_start, band_start + n_bands))
    missing = []
    for _ in range(int(rng.integers(params.n_missing_ranges[0], params.n_missing_ranges[1] + 1))):
        length = int(rng.integers(params.missing_length[0], params.missing_length[1] + 1))
        b0 = int(rng.integers(0, c))
        missing.append((b0, b0 + length))
    return groups, missing


def apply_stripes(
    x: np.ndarray, params: StripeParams = StripeParams(), seed: int = 0, index: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Zero random column runs over band ranges plus whole band ranges.

    Returns ``(x * mask, mask)``.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise ConfigurationError(f"expected a C x H x W cube, got shape {x.shape}")
    groups, missing = draw_stripes(x.shape, params, rng_for(seed, index))
    mask = stripe_mask(x.shape, groups, missing, params.orientation)
    return x * mask.astype(x.dtype), mask


# --------------------------------------------------------------------------
# Spatial resolution


def downsample_cube(x: np.ndarray, scale: int) -> np.ndarray:
    """Per-band ``scale x scale`` block averaging."""
    x = np.asarray(x)
    c, h, w = x.shape
    if scale < 1 or h % scale or w % scale:
        raise ConfigurationError(f"{h}x{w} cube is not divisible by scale {scale}")
    return x.reshape(c, h // scale, scale, w // scale, scale).mean(axis=(2, 4))


def bicubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def bicubic_weights(n_in: int, scale: int, a: float = -0.5) -> np.ndarray:
    """``(scale * n_in) x n_in`` interpolation matrix along one axis.

    Output sample ``i`` sits at input coordinate ``(i + 0.5) / scale - 0.5``
    (pixel centres aligned); taps beyond the border reuse the edge sample.
    """
    n_out = n_in * scale
    weights = np.zeros((n_out, n_in))
    for i in range(n_out):
        pos = (i + 0.5) / scale - 0.5
        base = math.floor(pos)
        for tap in range(base - 1, base + 3):
            weights[i, min(max(tap, 0), n_in - 1)] += bicubic_kernel(pos - tap, a)
    return weights


def bicubic_upsample(x: np.ndarray, scale: int, a: float = -0.5) -> np.ndarray:
    """Separable bicubic interpolation of every band by ``scale``."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ConfigurationError(f"expected a C x H x W cube, got shape {x.shape}")
    if scale < 1:
        raise ConfigurationError(f"scale must be positive, got {scale}")
    _, h, w = x.shape
    wh = bicubic_weights(h, scale, a)
    ww = bicubic_weights(w, scale, a)
    out = np.einsum("ih,chw,jw->cij", wh, x.astype(np.float64), ww)
    return out.astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)


# --------------------------------------------------------------------------
# Bundled spec


@dataclass(frozen=True)
class DegradationSpec:
    """Task kind plus parameters; ``seed`` fixes the realized corruption."""

    kind: str = "noise"
    sigma_8bit: Any = 30.0
    stripes: StripeParams = field(default_factory=StripeParams)
    scale: int = 4
    seed: int = 0
    clip: bool = False

    def __post_init__(self):
        if self.kind not in ("noise", "stripes", "downsample"):
            raise ConfigurationError(f"degradation kind must be noise, stripes or downsample, got {self.kind!r}")
        if self.kind == "downsample" and self.scale not in (4, 8):
            raise ConfigurationError(f"scale must be 4 or 8, got {self.scale}")
        if isinstance(self.sigma_8bit, list):
            object.__setattr__(self, "sigma_8bit", tuple(self.sigma_8bit))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        if isinstance(self.sigma_8bit, tuple):
            d["sigma_8bit"] = list(self.sigma_8bit)
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DegradationSpec":
        data = dict(data)
        aliases = {"sr": "downsample", "denoise": "noise", "inpaint": "stripes"}
        if "kind" in data:
            data["kind"] = aliases.get(data["kind"], data["kind"])
        if "sigma" in data:
            data["sigma_8bit"] = data.pop("sigma")
        stripes = data.pop("stripes", None) or {}
        known = {"kind", "sigma_8bit", "scale", "seed", "clip"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown degradation keys: {', '.join(unknown)}")
        return cls(stripes=StripeParams(**stripes), **data)


def degrade(x: np.ndarray, spec: DegradationSpec, index: int = 0) -> tuple[np.ndarray, np.ndarray | None]:
    """Apply ``spec`` to cube ``index``; returns (degraded, mask or None).

    For ``downsample`` the degraded cube is the low-resolution one.
    """
    if spec.kind == "noise":
        return add_gaussian_noise(x, spec.sigma_8bit, spec.seed, index, spec.clip), None
    if spec.kind == "stripes":
        return apply_stripes(x, spec.stripes, spec.seed, index)
    return downsample_cube(x, spec.scale), None
