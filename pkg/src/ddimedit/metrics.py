"""Image-quality and edit-direction metrics."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .guidance import Embedder, _cosine, directional_terms

__all__ = ["mae", "ssim", "s_dir", "SSIM_K1", "SSIM_K2", "SSIM_WINDOW"]

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 8


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def ssim(a, b, data_range: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all ``window x window`` patches (stride 1, uniform weights).

    Inputs are (H, W) or (C, H, W); channels are averaged first.  Patch
    variances and covariance use the population (1/n) normalisation.
    """
    a, b = _pair(a, b)
    if a.ndim == 3:
        a, b = a.mean(axis=0), b.mean(axis=0)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D or 3-D image, got shape {a.shape}")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    pa = sliding_window_view(a, (window, window))
    pb = sliding_window_view(b, (window, window))
    mu_a = pa.mean(axis=(-2, -1))
    mu_b = pb.mean(axis=(-2, -1))
    var_a = (pa**2).mean(axis=(-2, -1)) - mu_a**2
    var_b = (pb**2).mean(axis=(-2, -1)) - mu_b**2
    cov = (pa * pb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def s_dir(e: Embedder, x_gen, x_ref, y_tar: str, y_ref: str) -> float:
    """Cosine between image and anchor embedding changes (``1 - directional_loss``)."""
    di, dt = directional_terms(e, x_gen, y_tar, x_ref, y_ref)
    return _cosine(di, dt).item()
