"""Image and surface quality metrics: PSNR, SSIM, altitude MAE."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])


def psnr(img_a, img_b):
    """-10 log10(MSE) for images in [0, 1]; identical images give PSNR_CAP."""
    a, b = np.asarray(img_a, float), np.asarray(img_b, float)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(mse))


def to_luma(img):
    img = np.asarray(img, float)
    return img @ LUMA if img.ndim == 3 else img


def ssim(img_a, img_b, window=7, k1=0.01, k2=0.03, data_range=1.0):
    """Mean SSIM over all valid ``window`` x ``window`` patches of the luma images.

    Local statistics use uniform weights and population (co)variances.
    """
    a, b = to_luma(img_a), to_luma(img_b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ContractError(f"image {a.shape} smaller than the {window}x{window} window")
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    pa = sliding_window_view(a, (window, window))
    pb = sliding_window_view(b, (window, window))
    mu_a, mu_b = pa.mean(axis=(-1, -2)), pb.mean(axis=(-1, -2))
    var_a = pa.var(axis=(-1, -2))
    var_b = pb.var(axis=(-1, -2))
    cov = ((pa - mu_a[..., None, None]) * (pb - mu_b[..., None, None])).mean(axis=(-1, -2))
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def mae_dsm(alt_pred, alt_gt, mask=None):
    """Mean absolute altitude difference over ``mask`` (all pixels if None)."""
    p, g = np.asarray(alt_pred, float), np.asarray(alt_gt, float)
    if p.shape != g.shape:
        raise ShapeError(f"mae_dsm: {p.shape} vs {g.shape}")
    mask = np.ones(p.shape, bool) if mask is None else np.asarray(mask, bool)
    if not mask.any():
        raise ContractError("mae_dsm: empty mask")
    return float(np.mean(np.abs(p - g)[mask]))
