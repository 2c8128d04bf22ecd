"""Reconstruction quality metrics: relative l2 error, PSNR, and SSIM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import correlate2d

__all__ = ["MetricsRecord", "rel_l2_error", "psnr", "ssim", "PSNR_CAP"]

# Zero-MSE comparisons report this instead of infinity so logs stay finite.
PSNR_CAP = 99.0


@dataclass(frozen=True)
class MetricsRecord:
    """One reconstruction-vs-truth comparison."""

    e_l2: float
    psnr: float
    ssim: float

    def __post_init__(self):
        if self.e_l2 < 0:
            raise ValueError("relative l2 error cannot be negative")
        if self.ssim > 1.0 + 1e-12:
            raise ValueError("ssim cannot exceed 1")


def _as_pair(v_rec, v_true):
    a = np.asarray(v_rec, dtype=np.float64)
    b = np.asarray(v_true, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def rel_l2_error(v_rec, v_true) -> float:
    """|| v_true - v_rec ||_2 / || v_true ||_2 over all nodes."""
    a, b = _as_pair(v_rec, v_true)
    denom = np.linalg.norm(b)
    if denom == 0:
        raise ValueError("true field has zero norm")
    return float(np.linalg.norm(b - a) / denom)


def psnr(v_rec, v_true, data_range: float | None = None) -> float:
    """10 log10(range^2 / MSE), capped at PSNR_CAP for (near-)exact matches."""
    a, b = _as_pair(v_rec, v_true)
    if data_range is None:
        data_range = float(b.max() - b.min())
    if data_range <= 0:
        raise ValueError(f"data range must be positive, got {data_range}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(10.0 * np.log10(data_range**2 / mse), PSNR_CAP)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(
    v_rec,
    v_true,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float | None = None,
) -> float:
    """Mean local SSIM with a Gaussian window over the valid interior.

    Local means/variances come from correlating with the window over the
    region where it fits entirely, so no padding convention leaks into the
    score.
    """
    a, b = _as_pair(v_rec, v_true)
    if a.ndim != 2:
        raise ValueError("ssim expects 2D fields")
    if window > min(a.shape):
        raise ValueError(f"window {window} exceeds field shape {a.shape}")
    if window < 2 or sigma <= 0:
        raise ValueError("window must span >= 2 nodes with positive sigma")
    if data_range is None:
        data_range = float(b.max() - b.min())
    if data_range <= 0:
        raise ValueError(f"data range must be positive, got {data_range}")

    win = _gaussian_window(window, sigma)
    mu_a = correlate2d(a, win, mode="valid")
    mu_b = correlate2d(b, win, mode="valid")
    # E[x^2] - E[x]^2 under the window weights.
    var_a = correlate2d(a * a, win, mode="valid") - mu_a**2
    var_b = correlate2d(b * b, win, mode="valid") - mu_b**2
    cov = correlate2d(a * b, win, mode="valid") - mu_a * mu_b

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
