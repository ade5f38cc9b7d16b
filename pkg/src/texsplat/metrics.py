"""Image quality metrics: PSNR and SSIM, plus the SSIM gradient used in training.

SSIM uses the 11x11 sigma-1.5 Gaussian window per channel with C1 = 0.01^2 and
C2 = 0.03^2 on [0, 1] images.  All filtering is zero-padded correlation, whose
adjoint is the same operator (symmetric kernel), which keeps the analytic
gradient exact.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2
PSNR_CAP = 99.0


def _gaussian_kernel():
    r = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    k = np.exp(-0.5 * (r / SSIM_SIGMA) ** 2)
    return k / k.sum()


_KERNEL = _gaussian_kernel()


def _blur(img):
    """Separable zero-padded Gaussian filtering over the two leading axes."""
    out = correlate1d(img, _KERNEL, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _KERNEL, axis=1, mode="constant", cval=0.0)


def psnr(pred, gt) -> float:
    """-10 log10(MSE) on [0, 1] images; identical inputs report the 99 dB cap."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(mse))


def _ssim_maps(x, y):
    mu_x = _blur(x)
    mu_y = _blur(y)
    x2 = _blur(x * x)
    y2 = _blur(y * y)
    xy = _blur(x * y)
    var_x = x2 - mu_x ** 2
    var_y = y2 - mu_y ** 2
    cov = xy - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + _C1
    a2 = 2.0 * cov + _C2
    b1 = mu_x ** 2 + mu_y ** 2 + _C1
    b2 = var_x + var_y + _C2
    return (a1 * a2) / (b1 * b2), (mu_x, mu_y, a1, a2, b1, b2)


def ssim(pred, gt) -> float:
    """Mean SSIM over pixels and channels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred = pred[:, :, None]
        gt = gt[:, :, None]
    smap, _ = _ssim_maps(pred, gt)
    return float(smap.mean())


def ssim_with_grad(pred, gt):
    """(mean SSIM, d(mean SSIM)/d(pred)); analytic through the window filters."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, :, None]
        y = y[:, :, None]
    smap, (mu_x, mu_y, a1, a2, b1, b2) = _ssim_maps(x, y)
    n = smap.size
    # dS w.r.t. the filtered statistics
    denom = b1 * b2
    dS_da1 = a2 / denom
    dS_da2 = a1 / denom
    dS_db1 = -smap / b1
    dS_db2 = -smap / b2
    dS_dmu_x = dS_da1 * 2.0 * mu_y + dS_db1 * 2.0 * mu_x \
        + dS_da2 * (-2.0 * mu_y) + dS_db2 * (-2.0 * mu_x)
    dS_dx2 = dS_db2            # through var_x
    dS_dxy = dS_da2 * 2.0      # through cov
    # adjoint of the blur is the blur itself (symmetric kernel, zero pad)
    grad = (_blur(dS_dmu_x) + 2.0 * x * _blur(dS_dx2) + y * _blur(dS_dxy)) / n
    if squeeze:
        grad = grad[:, :, 0]
    return float(smap.mean()), grad
