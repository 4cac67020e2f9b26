"""Image quality metrics over [0,1] float images."""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .errors import InputError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    per_view: list = field(default_factory=list)


def _check_pair(a, b, min_side=1):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3):
        raise InputError(f"expected HxW or HxWxC image, got shape {a.shape}")
    if a.shape[0] < min_side or a.shape[1] < min_side:
        raise InputError(f"image {a.shape} smaller than {min_side}x{min_side}")
    return a, b


def psnr(a, b) -> float:
    """-10*log10(MSE); +inf when the images are identical."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def _gaussian_window() -> np.ndarray:
    half = (SSIM_WINDOW - 1) / 2.0
    x = np.arange(SSIM_WINDOW) - half
    g = np.exp(-(x ** 2) / (2.0 * SSIM_SIGMA ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def _ssim_channel(a: np.ndarray, b: np.ndarray, win: np.ndarray) -> float:
    mu1 = convolve2d(a, win, mode="valid")
    mu2 = convolve2d(b, win, mode="valid")
    mu1_sq = mu1 * mu1
    mu2_sq = mu2 * mu2
    mu12 = mu1 * mu2
    s1 = convolve2d(a * a, win, mode="valid") - mu1_sq
    s2 = convolve2d(b * b, win, mode="valid") - mu2_sq
    s12 = convolve2d(a * b, win, mode="valid") - mu12
    num = (2.0 * mu12 + SSIM_C1) * (2.0 * s12 + SSIM_C2)
    den = (mu1_sq + mu2_sq + SSIM_C1) * (s1 + s2 + SSIM_C2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged across channels."""
    a, b = _check_pair(a, b, min_side=SSIM_WINDOW)
    win = _gaussian_window()
    if a.ndim == 2:
        return _ssim_channel(a, b, win)
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], win)
                          for c in range(a.shape[2])]))
