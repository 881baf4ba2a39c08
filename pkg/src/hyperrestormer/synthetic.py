"""Low-rank synthetic hyperspectral scenes for desk-scale experiments.

A scene is a linear mixture ``sum_k a_k(x, y) s_k(lambda)`` of a few smooth
positive spectra with smooth, non-negative, sum-to-one abundance maps, scaled
by a smooth shading field and rescaled into ``[0, 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, gaussian_filter1d

from .errors import ConfigurationError


@dataclass(frozen=True)
class SyntheticSceneSpec:
    seed: int = 0
    height: int = 32
    width: int = 32
    bands: int = 8
    order: int = 3
    spatial_smoothness: float = 3.0
    spectral_smoothness: float = 2.0
    shading: tuple[float, float] = (0.6, 1.0)

    def __post_init__(self):
        if min(self.height, self.width, self.bands, self.order) < 1:
            raise ConfigurationError("scene sizes and mixture order must be positive")
        if self.spatial_smoothness <= 0 or self.spectral_smoothness <= 0:
            raise ConfigurationError("smoothness parameters must be positive")
        lo, hi = self.shading
        if not 0 < lo <= hi:
            raise ConfigurationError(f"shading range must satisfy 0 < lo <= hi, got {self.shading}")


def _smooth_field(rng: np.random.Generator, shape: tuple[int, int], sigma: float) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def synth_spectra(spec: SyntheticSceneSpec, rng: np.random.Generator) -> np.ndarray:
    """``order x bands`` strictly positive, smooth signatures."""
    walk = rng.standard_normal((spec.order, spec.bands))
    smooth = gaussian_filter1d(walk, spec.spectral_smoothness, axis=1, mode="nearest")
    smooth /= smooth.std(axis=1, keepdims=True) + 1e-12
    return np.exp(0.5 * smooth)


def synth_scene(spec: SyntheticSceneSpec, dtype=np.float32) -> np.ndarray:
    """``bands x height x width`` cube in ``[0, 1]`` of rank <= order."""
    rng = np.random.default_rng(spec.seed)
    shape = (spec.height, spec.width)
    logits = np.stack([2.0 * _smooth_field(rng, shape, spec.spatial_smoothness) for _ in range(spec.order)])
    abund = np.exp(logits - logits.max(axis=0, keepdims=True))
    abund /= abund.sum(axis=0, keepdims=True)
    lo, hi = spec.shading
    shade = lo + (hi - lo) * (0.5 + 0.5 * np.tanh(_smooth_field(rng, shape, 2 * spec.spatial_smoothness)))
    spectra = synth_spectra(spec, rng)
    cube = np.einsum("kb,khw->bhw", spectra, abund * shade)
    return (cube / cube.max()).astype(dtype)
