"""Windowed structural similarity and its reduction to a token-grid score.

The per-pixel similarity map compares local luminance, contrast and
structure inside a Gaussian window; a restored image that lost a local
pattern (a trigger patch, a sharp edge) scores low exactly there. The
image-based trigger score is one minus the similarity map resized to the
14x14 token grid, so dissimilar regions get high scores.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.ndimage import correlate1d

from .core import TOKEN_GRID, interpolate_image


@dataclass(frozen=True)
class SsimConfig:
    """Standard windowed-similarity constants for unit dynamic range."""

    window_size: int = 11
    sigma: float = 1.5
    c1: float = 1e-4  # (0.01)^2
    c2: float = 9e-4  # (0.03)^2

    def __post_init__(self) -> None:
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("stabilizing constants must be positive")
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValueError("window size must be odd and positive")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


DEFAULT_SSIM = SsimConfig()


@lru_cache(maxsize=8)
def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian tap weights (the 2D window is its outer product)."""
    half = (size - 1) / 2.0
    t = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return g / g.sum()


def _local_mean(z: np.ndarray, taps: np.ndarray) -> np.ndarray:
    # Separable Gaussian correlation; "reflect" mirrors the edge pixel itself.
    out = correlate1d(z, taps, axis=0, mode="reflect")
    return correlate1d(out, taps, axis=1, mode="reflect")


def ssim_map(x: np.ndarray, y: np.ndarray, cfg: SsimConfig = DEFAULT_SSIM) -> np.ndarray:
    """Per-pixel structural similarity of two images, averaged over channels.

    Returns an (H, W) float64 grid with every value in [-1, 1]; identical
    inputs give exactly 1 everywhere.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x = x[:, :, None]
        y = y[:, :, None]
    elif x.ndim != 3:
        raise ValueError(f"expected 2D or 3D input, got ndim={x.ndim}")

    taps = gaussian_window(cfg.window_size, cfg.sigma)
    acc = np.zeros(x.shape[:2], dtype=np.float64)
    for c in range(x.shape[2]):
        xc, yc = x[:, :, c], y[:, :, c]
        mu_x = _local_mean(xc, taps)
        mu_y = _local_mean(yc, taps)
        var_x = _local_mean(xc * xc, taps) - mu_x * mu_x
        var_y = _local_mean(yc * yc, taps) - mu_y * mu_y
        cov = _local_mean(xc * yc, taps) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + cfg.c1) * (2.0 * cov + cfg.c2)
        den = (mu_x * mu_x + mu_y * mu_y + cfg.c1) * (var_x + var_y + cfg.c2)
        acc += num / den
    acc /= x.shape[2]
    # The ratio is bounded by 1 in exact arithmetic; clip the float residue.
    return np.clip(acc, -1.0, 1.0)


def image_score(
    x: np.ndarray, x_restored: np.ndarray, cfg: SsimConfig = DEFAULT_SSIM
) -> np.ndarray:
    """Token-grid dissimilarity score: 1 - similarity, resized to 14x14.

    Values lie in [0, 2]; 0 means the restoration reproduced the original
    patch perfectly, values above 1 mean local anti-correlation.
    """
    sim = ssim_map(x, x_restored, cfg)
    return 1.0 - interpolate_image(sim, TOKEN_GRID, TOKEN_GRID)
