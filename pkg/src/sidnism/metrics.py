"""Objective quality indexes: entropy, mean level, mean gradient, PSNR, SSIM.

Gray quantities use BT.601 luma. Level-based quantities (GMI, GMG) are on the
0-255 scale; histograms use 256 bins of ``round(x * 255)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

from .image_core import gray_of, quantize, spatial_gradients

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


@dataclass
class MetricsReport:
    ge: float
    ce: Optional[float]
    gmi: float
    gmg: float
    psnr: Optional[float] = None
    ssim: Optional[float] = None


def _entropy(levels: np.ndarray) -> float:
    hist = np.bincount(levels.ravel(), minlength=256).astype(np.float64)
    p = hist[hist > 0] / hist.sum()
    return float(max(0.0, -np.sum(p * np.log2(p))))


def gray_entropy(img) -> float:
    return _entropy(quantize(gray_of(img)))


def color_entropy(img) -> float:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("color_entropy needs a 3-channel image")
    levels = quantize(arr)
    return sum(_entropy(levels[:, :, ch]) for ch in range(3))


def gray_mean_illumination(img) -> float:
    return float(np.mean(gray_of(img)) * 255.0)


def gray_mean_gradient(img) -> float:
    gh, gv = spatial_gradients(gray_of(img) * 255.0)
    return float(np.mean(np.sqrt(gh * gh + gv * gv)))


def psnr(img, ref) -> float:
    a = np.asarray(img, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_valid(x, w):
    half = len(w) // 2
    out = correlate1d(correlate1d(x, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    return out[half:-half, half:-half]


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    """SSIM at every window position that fits entirely inside the image."""
    w = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a ** 2
    var_b = _filter_valid(b * b, w) - mu_b ** 2
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(img, ref) -> float:
    """Single-scale gray SSIM, clipped to [0, 1]."""
    a = np.asarray(img, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    a, b = gray_of(a)[:, :, 0], gray_of(b)[:, :, 0]
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    if np.array_equal(a, b):
        return 1.0
    return float(np.clip(ssim_map(a, b).mean(), 0.0, 1.0))


def build_report(img, ref=None) -> MetricsReport:
    arr = np.asarray(img, dtype=np.float64)
    report = MetricsReport(
        ge=gray_entropy(arr),
        ce=color_entropy(arr) if arr.ndim == 3 and arr.shape[2] == 3 else None,
        gmi=gray_mean_illumination(arr),
        gmg=gray_mean_gradient(arr),
    )
    if ref is not None:
        report.psnr = psnr(arr, ref)
        report.ssim = ssim(arr, ref)
    return report
