"""Image losses and regularizers, each returning its value together with
the exact gradient wrt the prediction.

SSIM uses the standard 11x11 Gaussian window (sigma 1.5, K1 0.01, K2 0.03,
unit dynamic range) over valid window positions only, averaged across
channels; its backward pass runs the adjoint correlation of the window
statistics.  The perceptual term is a three-level box-pyramid L2: mean
squared error averaged over progressively 2x-downsampled copies, which
rewards matching low-frequency structure without an external network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d, correlate2d

from .errors import ValidationError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 99.0


@dataclass
class LossWeights:
    """Multipliers for the composite objectives."""

    rgb: float = 0.8
    normal: float = 0.8
    ssim: float = 0.2
    perceptual: float = 0.2
    offset: float = 0.85
    scale_reg: float = 0.03
    feature_reg: float = 1.0
    pose_reg: float = 0.5
    sds: float = 0.3


@dataclass
class LossReport:
    """Total objective value plus the per-term breakdown.

    Terms hold unweighted loss values (SSIM enters as 1 - SSIM), so the
    total recomposes as the weight-dotted sum of the terms.
    """

    total: float
    terms: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# pixel losses
# ---------------------------------------------------------------------------

def _check_pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValidationError(f"shape mismatch {pred.shape} vs {target.shape}")
    return pred, target


def mse_loss(pred, target, mask=None):
    """Mean squared error and its gradient; ``mask`` (H, W) restricts the
    mean to covered pixels."""
    pred, target = _check_pair(pred, target)
    diff = pred - target
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape[:2]:
            raise ValidationError("mask must be (H, W)")
        diff = diff * mask[:, :, None]
        denom = int(mask.sum()) * pred.shape[2]
        if denom == 0:
            return 0.0, np.zeros_like(pred)
    else:
        denom = diff.size
    value = float(np.sum(diff * diff) / denom)
    return value, 2.0 * diff / denom


def psnr(pred, target, mask=None) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images, capped at
    99 dB for (near-)exact matches."""
    value, _ = mse_loss(pred, target, mask=mask)
    if value < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(1.0 / value)))


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


_WINDOW_1D = _gaussian_window()
_ROW = _WINDOW_1D[None, :]
_COL = _WINDOW_1D[:, None]


def _filter_valid(img):
    return correlate2d(correlate2d(img, _ROW, mode="valid"), _COL, mode="valid")


def _filter_adjoint(grad):
    return convolve2d(convolve2d(grad, _COL, mode="full"), _ROW, mode="full")


def ssim(pred, target):
    """Mean SSIM over valid windows and channels; returns (value, d_pred)."""
    pred, target = _check_pair(pred, target)
    h, w, channels = pred.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValidationError(f"image must be at least {SSIM_WINDOW} pixels per side")
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    total = 0.0
    grad = np.zeros_like(pred)
    n_windows = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1)
    scale = 1.0 / (n_windows * channels)
    for ch in range(channels):
        x = pred[:, :, ch]
        y = target[:, :, ch]
        u = _filter_valid(x)
        v = _filter_valid(y)
        p = _filter_valid(x * x)
        q = _filter_valid(x * y)
        var_y = _filter_valid(y * y) - v * v
        a1 = 2.0 * u * v + c1
        a2 = 2.0 * (q - u * v) + c2
        b1 = u * u + v * v + c1
        b2 = (p - u * u) + var_y + c2
        s = (a1 * a2) / (b1 * b2)
        total += float(s.sum()) * scale

        d_s = scale  # uniform weight from the mean
        d_u = d_s * (2.0 * v * (a2 - a1) / (b1 * b2) - 2.0 * u * s * (1.0 / b1 - 1.0 / b2))
        d_p = d_s * (-s / b2)
        d_q = d_s * (2.0 * a1 / (b1 * b2))
        grad[:, :, ch] = (_filter_adjoint(d_u)
                          + 2.0 * x * _filter_adjoint(d_p)
                          + y * _filter_adjoint(d_q))
    return total, grad


# ---------------------------------------------------------------------------
# box-pyramid perceptual stand-in
# ---------------------------------------------------------------------------

def _downsample2(img):
    h, w, c = img.shape
    return img.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))


def _upsample2_adjoint(grad):
    h, w, c = grad.shape
    out = np.empty((h * 2, w * 2, c))
    out[0::2, 0::2] = grad
    out[0::2, 1::2] = grad
    out[1::2, 0::2] = grad
    out[1::2, 1::2] = grad
    return out / 4.0


def pyramid_loss(pred, target, levels=3):
    """Average of per-level MSE over a box-filtered pyramid."""
    pred, target = _check_pair(pred, target)
    h, w, _ = pred.shape
    div = 2 ** (levels - 1)
    if h % div or w % div:
        raise ValidationError(f"image sides must be divisible by {div}")
    value = 0.0
    grads = []
    a, b = pred, target
    for level in range(levels):
        v, g = mse_loss(a, b)
        value += v / levels
        grads.append(g / levels)
        if level + 1 < levels:
            a = _downsample2(a)
            b = _downsample2(b)
    grad = grads.pop()
    while grads:
        grad = grads.pop() + _upsample2_adjoint(grad)
    return value, grad


# ---------------------------------------------------------------------------
# regularizers
# ---------------------------------------------------------------------------

def frobenius(arr):
    """Frobenius norm (square root of the sum of squared entries) and its
    gradient; the gradient at the zero tensor is the zero subgradient."""
    arr = np.asarray(arr, dtype=np.float64)
    value = float(np.sqrt(np.sum(arr * arr)))
    if value == 0.0:
        return 0.0, np.zeros_like(arr)
    return value, arr / value


# ---------------------------------------------------------------------------
# composite photometric objective
# ---------------------------------------------------------------------------

def photometric_loss(pred_rgb, gt_rgb, weights: LossWeights,
                     pred_normals=None, gt_normals=None, mask=None):
    """Weighted sum of rgb MSE, SSIM (as 1 - SSIM), pyramid L2, and normal
    MSE.  Returns (LossReport, d_pred_rgb, d_pred_normals)."""
    report_terms = {}
    total = 0.0

    v_rgb, g_rgb = mse_loss(pred_rgb, gt_rgb, mask=mask)
    report_terms["rgb"] = v_rgb
    total += weights.rgb * v_rgb
    d_rgb = weights.rgb * g_rgb

    v_ssim, g_ssim = ssim(pred_rgb, gt_rgb)
    report_terms["ssim"] = 1.0 - v_ssim
    total += weights.ssim * (1.0 - v_ssim)
    d_rgb -= weights.ssim * g_ssim

    v_pyr, g_pyr = pyramid_loss(pred_rgb, gt_rgb)
    report_terms["perceptual"] = v_pyr
    total += weights.perceptual * v_pyr
    d_rgb += weights.perceptual * g_pyr

    d_normals = None
    if pred_normals is not None:
        v_n, g_n = mse_loss(pred_normals, gt_normals, mask=mask)
        report_terms["normal"] = v_n
        total += weights.normal * v_n
        d_normals = weights.normal * g_n

    return LossReport(total=total, terms=report_terms), d_rgb, d_normals
