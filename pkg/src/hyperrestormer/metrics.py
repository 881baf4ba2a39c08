"""MPSNR, MSSIM and SAM for hyperspectral cubes (``C x H x W``, peak 1.0)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError

__all__ = ["MetricsReport", "psnr_per_band", "mpsnr", "ssim_per_band", "mssim", "sam", "evaluate", "gaussian_window"]

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _pair(ref, test) -> tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ConfigurationError(f"shape mismatch: reference {ref.shape} vs test {test.shape}")
    if ref.ndim == 2:
        ref, test = ref[None], test[None]
    if ref.ndim != 3:
        raise ConfigurationError(f"expected C x H x W cubes, got shape {ref.shape}")
    return ref, test


def psnr_per_band(ref, test) -> np.ndarray:
    ref, test = _pair(ref, test)
    mse = np.mean((ref - test) ** 2, axis=(1, 2))
    with np.errstate(divide="ignore"):
        psnr = 10.0 * np.log10(1.0 / mse)
    return np.minimum(psnr, PSNR_CAP)


def mpsnr(ref, test) -> float:
    return float(np.mean(psnr_per_band(ref, test)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=-2) @ g
    return sliding_window_view(rows, k, axis=-1) @ g


def ssim_per_band(ref, test, data_range: float = 1.0) -> np.ndarray:
    """Gaussian-window SSIM of every band, averaged over valid window positions."""
    ref, test = _pair(ref, test)
    if min(ref.shape[1:]) < SSIM_WINDOW:
        raise ConfigurationError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {ref.shape[1:]}")
    g = gaussian_window()
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_x = _filter_valid(ref, g)
    mu_y = _filter_valid(test, g)
    var_x = _filter_valid(ref * ref, g) - mu_x * mu_x
    var_y = _filter_valid(test * test, g) - mu_y * mu_y
    cov = _filter_valid(ref * test, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return np.mean(num / den, axis=(1, 2))


def mssim(ref, test) -> float:
    return float(np.mean(ssim_per_band(ref, test)))


def sam(ref, test) -> float:
    """Mean spectral angle in degrees; zero-spectrum pixels count as 0.

    The angle is taken as ``2 atan2(|u - v|, |u + v|)`` of the unit spectra,
    which equals ``arccos(<u, v>)`` but stays exact for parallel vectors.
    """
    ref, test = _pair(ref, test)
    n_ref = np.linalg.norm(ref, axis=0)
    n_test = np.linalg.norm(test, axis=0)
    valid = (n_ref >= 1e-12) & (n_test >= 1e-12)
    u = ref[:, valid] / n_ref[valid]
    v = test[:, valid] / n_test[valid]
    angles = np.zeros(n_ref.shape)
    angles[valid] = 2.0 * np.arctan2(np.linalg.norm(u - v, axis=0), np.linalg.norm(u + v, axis=0))
    return float(np.mean(np.degrees(angles)))


@dataclass(frozen=True)
class MetricsReport:
    mpsnr: float
    mssim: float
    sam: float
    per_band_psnr: tuple[float, ...]
    per_band_ssim: tuple[float, ...]

    def to_text(self) -> str:
        lines = [f"mpsnr={self.mpsnr:.6f}", f"mssim={self.mssim:.6f}", f"sam={self.sam:.6f}"]
        lines.append("per_band_psnr=" + ",".join(f"{v:.6f}" for v in self.per_band_psnr))
        lines.append("per_band_ssim=" + ",".join(f"{v:.6f}" for v in self.per_band_ssim))
        return "\n".join(lines) + "\n"

    @staticmethod
    def table_header() -> str:
        return "mpsnr\tmssim\tsam"

    def table_row(self) -> str:
        return f"{self.mpsnr:.6f}\t{self.mssim:.6f}\t{self.sam:.6f}"


def evaluate(ref, test) -> MetricsReport:
    psnr = psnr_per_band(ref, test)
    ssim = ssim_per_band(ref, test)
    return MetricsReport(
        mpsnr=float(np.mean(psnr)),
        mssim=float(np.mean(ssim)),
        sam=sam(ref, test),
        per_band_psnr=tuple(float(v) for v in psnr),
        per_band_ssim=tuple(float(v) for v in ssim),
    )
