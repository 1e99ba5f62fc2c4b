"""Image quality metrics.

SSIM follows the Wang et al. formulation with an 11-tap Gaussian window
(sigma 1.5, truncated at 3.5 sigma), population statistics, and the padded
border cropped from the mean — the same conventions as the widely used
scikit-image implementation, so values are directly comparable.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(data_range ** 2 / mse), PSNR_CAP)


def _ssim_single(x: np.ndarray, y: np.ndarray, data_range: float) -> float:
    filt = lambda img: gaussian_filter(img, sigma=SSIM_SIGMA,
                                       truncate=SSIM_TRUNCATE)
    ux = filt(x)
    uy = filt(y)
    uxx = filt(x * x)
    uyy = filt(y * y)
    uxy = filt(x * y)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / \
        ((ux * ux + uy * uy + c1) * (vx + vy + c2))

    radius = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    return float(s[radius:-radius, radius:-radius].mean())


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean structural similarity; color images average the per-channel SSIM."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        return _ssim_single(a, b, data_range)
    if a.ndim == 3:
        return float(np.mean([_ssim_single(a[..., c], b[..., c], data_range)
                              for c in range(a.shape[2])]))
    raise ValueError("expected a 2D or 3D image array")
