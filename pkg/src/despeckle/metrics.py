"""Reconstruction/hybrid losses and PSNR, SSIM, RMSE image metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.signal import convolve2d

from .config import LossWeights

PIXEL_MAX = 255.0


def _same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(pred: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
    _same_shape(pred, clean)
    return (clean - pred).abs().mean()


def total_loss(l1, l_pixel, l_instance, w: LossWeights | None = None):
    w = w or LossWeights()
    return l1 + w.alpha * l_pixel + w.beta * l_instance


def mse(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, max_val: float = PIXEL_MAX) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``math.inf``."""
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    err = mse(a, b)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(max_val**2 / err)


def rmse(a, b) -> float:
    return math.sqrt(mse(a, b))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, dynamic_range: float = PIXEL_MAX, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all fully contained 11x11 Gaussian windows (std 1.5)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    if a.ndim != 2 or min(a.shape) < window:
        raise ValueError(f"ssim needs a 2-D image of at least {window}x{window}, got {a.shape}")
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    g = gaussian_window(window, sigma)

    def filt(x):
        return convolve2d(x, g, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class MetricTriple:
    psnr: float
    ssim: float
    rmse: float

    def as_row(self) -> dict:
        return {"psnr": "inf" if math.isinf(self.psnr) else self.psnr, "ssim": self.ssim, "rmse": self.rmse}


def image_metrics(pred, clean) -> MetricTriple:
    """Metrics for [0, 1] images, clipped and mapped to the 0-255 scale."""
    p = np.clip(np.asarray(pred, dtype=np.float64), 0.0, 1.0) * PIXEL_MAX
    c = np.clip(np.asarray(clean, dtype=np.float64), 0.0, 1.0) * PIXEL_MAX
    return MetricTriple(psnr(p, c, PIXEL_MAX), ssim(p, c, PIXEL_MAX), rmse(p, c))


def mean_metrics(triples: list[MetricTriple]) -> tuple[MetricTriple, int]:
    """Average triples; infinite PSNRs are left out of the PSNR mean.

    Returns the mean triple and the number of excluded (identical) pairs.
    """
    if not triples:
        raise ValueError("no metrics to average")
    finite = [t.psnr for t in triples if math.isfinite(t.psnr)]
    excluded = len(triples) - len(finite)
    # fsum keeps the means independent of summation order
    p = math.fsum(finite) / len(finite) if finite else math.inf
    s = math.fsum(t.ssim for t in triples) / len(triples)
    r = math.fsum(t.rmse for t in triples) / len(triples)
    return MetricTriple(p, s, r), excluded
