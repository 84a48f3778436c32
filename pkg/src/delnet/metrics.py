"""Image quality metrics: PSNR, SSIM, MS-SSIM and CIEDE2000.

SSIM and MS-SSIM are built from differentiable ops and return scalar tensors
so the training loss can use them directly; 3-channel inputs are reduced to
luma (0.299, 0.587, 0.114) first. PSNR is computed on all channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

PSNR_CAP = 100.0
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03


class MetricError(ValueError):
    pass


def _check_pair(gt: Tensor, pred: Tensor, name: str) -> None:
    if gt.shape != pred.shape:
        raise ShapeError(f"{name}: shape mismatch {gt.shape} vs {pred.shape}", gt.shape, pred.shape)


def _check_range(t: Tensor, name: str) -> None:
    lo, hi = float(t.data.min()), float(t.data.max())
    if lo < 0.0 or hi > 1.0 or not math.isfinite(lo + hi):
        raise MetricError(f"{name}: values must lie in [0,1], got [{lo}, {hi}]")


def psnr(gt: Tensor, pred: Tensor) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images, capped at 100 dB."""
    _check_pair(gt, pred, "psnr")
    _check_range(gt, "psnr")
    _check_range(pred, "psnr")
    diff = gt.data.astype(np.float64) - pred.data.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


# -- structural similarity ---------------------------------------------------------


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def to_luma(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"expected [N,C,H,W] image, got {x.shape}", x.shape)
    if x.shape[1] == 1:
        return x
    if x.shape[1] != 3:
        raise ShapeError(f"expected 1 or 3 channels, got {x.shape}", x.shape)
    w = Tensor(np.array(LUMA_WEIGHTS, dtype=x.dtype).reshape(1, 3, 1, 1))
    return ops.conv2d(x, w)


def window_size_for(h: int, w: int) -> int:
    """The standard 11-pixel window, shrunk to the largest odd size that fits."""
    size = min(WINDOW_SIZE, h, w)
    return size if size % 2 else size - 1


def _ssim_terms(x: Tensor, y: Tensor, window: int) -> tuple[Tensor, Tensor]:
    """Luminance and contrast-structure maps over valid window positions."""
    win = Tensor(gaussian_window(window).astype(x.dtype).reshape(1, 1, window, window))

    def blur(t):
        return ops.conv2d(t, win)

    c1, c2 = K1 ** 2, K2 ** 2
    mu_x, mu_y = blur(x), blur(y)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    var_x = blur(x * x) - mu_xx
    var_y = blur(y * y) - mu_yy
    cov = blur(x * y) - mu_xy
    lum = (2.0 * mu_xy + c1) / (mu_xx + mu_yy + c1)
    cs = (2.0 * cov + c2) / (var_x + var_y + c2)
    return lum, cs


def _per_image_mean(t: Tensor) -> Tensor:
    return ops.mean(t, axis=(1, 2, 3))


def ssim(gt: Tensor, pred: Tensor) -> Tensor:
    """Single-scale SSIM, averaged over images in the batch."""
    _check_pair(gt, pred, "ssim")
    x, y = to_luma(gt), to_luma(pred)
    lum, cs = _ssim_terms(x, y, window_size_for(*x.shape[2:]))
    return ops.mean(_per_image_mean(lum * cs))


def ms_ssim_scales(h: int, w: int) -> int:
    """Number of scales whose smallest image still holds an 11x11 window (max 5)."""
    scales = 1
    while scales < len(MS_SSIM_WEIGHTS):
        h, w = h // 2, w // 2
        if min(h, w) < WINDOW_SIZE:
            break
        scales += 1
    return scales


def ms_ssim_weights(scales: int) -> tuple[float, ...]:
    """The standard five weights used as-is (they sum to 1.0001); truncated sets are renormalised."""
    if scales == len(MS_SSIM_WEIGHTS):
        return MS_SSIM_WEIGHTS
    w = MS_SSIM_WEIGHTS[:scales]
    total = sum(w)
    return tuple(v / total for v in w)


def ms_ssim(gt: Tensor, pred: Tensor, scales: int | None = None) -> Tensor:
    """Multi-scale SSIM, averaged over images in the batch.

    Contrast-structure is taken at every scale and luminance only at the
    coarsest; scales are linked by 2x2 average pooling. Negative per-scale
    means are floored at zero before the fractional powers. With ``scales``
    unset, five are used when the image allows and otherwise the largest
    feasible count with weights renormalised to sum to one.
    """
    _check_pair(gt, pred, "ms_ssim")
    x, y = to_luma(gt), to_luma(pred)
    h, w = x.shape[2:]
    feasible = ms_ssim_scales(h, w)
    if scales is None:
        scales = feasible
    elif not 1 <= scales <= feasible:
        raise MetricError(f"ms_ssim: {h}x{w} image is too small for {scales} scales "
                          f"(at most {feasible})")
    weights = ms_ssim_weights(scales)
    window = window_size_for(h, w)
    result = None
    for j, weight in enumerate(weights):
        lum, cs = _ssim_terms(x, y, window)
        term = lum * cs if j == scales - 1 else cs
        factor = ops.power(ops.relu(_per_image_mean(term)), weight)
        result = factor if result is None else result * factor
        if j < scales - 1:
            x, y = ops.avg_pool2(x), ops.avg_pool2(y)
    return ops.mean(result)


# -- CIEDE2000 ----------------------------------------------------------------------

# IEC 61966-2-1 linear sRGB -> CIE XYZ, D65
_SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
D65_WHITE = (0.95047, 1.0, 1.08883)


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def srgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0,1] with channels last -> CIELAB (D65, 2 degree observer)."""
    xyz = srgb_to_linear(rgb) @ _SRGB_TO_XYZ.T
    xyz = xyz / np.array(D65_WHITE)
    eps, kappa = 216.0 / 24389.0, 24389.0 / 27.0
    f = np.where(xyz > eps, np.cbrt(xyz), (kappa * xyz + 16.0) / 116.0)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)


def ciede2000_lab(lab1: np.ndarray, lab2: np.ndarray, kl: float = 1.0, kc: float = 1.0,
                  kh: float = 1.0) -> np.ndarray:
    """CIEDE2000 colour difference between Lab arrays (channels last)."""
    lab1 = np.asarray(lab1, dtype=np.float64)
    lab2 = np.asarray(lab2, dtype=np.float64)
    l1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    l2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]

    c_bar = (np.hypot(a1, b1) + np.hypot(a2, b2)) / 2.0
    c7 = c_bar ** 7
    g = 0.5 * (1.0 - np.sqrt(c7 / (c7 + 25.0 ** 7)))
    a1p, a2p = (1.0 + g) * a1, (1.0 + g) * a2
    c1p, c2p = np.hypot(a1p, b1), np.hypot(a2p, b2)
    h1p = np.degrees(np.arctan2(b1, a1p)) % 360.0
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360.0
    # hue is undefined for achromatic colours
    h1p = np.where(c1p == 0, 0.0, h1p)
    h2p = np.where(c2p == 0, 0.0, h2p)

    dl = l2 - l1
    dc = c2p - c1p
    chroma_prod = c1p * c2p
    dh = h2p - h1p
    dh = np.where(dh > 180.0, dh - 360.0, np.where(dh < -180.0, dh + 360.0, dh))
    dh = np.where(chroma_prod == 0, 0.0, dh)
    d_hue = 2.0 * np.sqrt(chroma_prod) * np.sin(np.radians(dh) / 2.0)

    l_bar = (l1 + l2) / 2.0
    cp_bar = (c1p + c2p) / 2.0
    h_sum = h1p + h2p
    h_bar = np.where(np.abs(h1p - h2p) <= 180.0, h_sum / 2.0,
                     np.where(h_sum < 360.0, (h_sum + 360.0) / 2.0, (h_sum - 360.0) / 2.0))
    h_bar = np.where(chroma_prod == 0, h_sum, h_bar)

    t = (1.0 - 0.17 * np.cos(np.radians(h_bar - 30.0))
         + 0.24 * np.cos(np.radians(2.0 * h_bar))
         + 0.32 * np.cos(np.radians(3.0 * h_bar + 6.0))
         - 0.20 * np.cos(np.radians(4.0 * h_bar - 63.0)))
    d_theta = 30.0 * np.exp(-(((h_bar - 275.0) / 25.0) ** 2))
    cp7 = cp_bar ** 7
    r_c = 2.0 * np.sqrt(cp7 / (cp7 + 25.0 ** 7))
    s_l = 1.0 + 0.015 * (l_bar - 50.0) ** 2 / np.sqrt(20.0 + (l_bar - 50.0) ** 2)
    s_c = 1.0 + 0.045 * cp_bar
    s_h = 1.0 + 0.015 * cp_bar * t
    r_t = -np.sin(np.radians(2.0 * d_theta)) * r_c

    tl, tc, th = dl / (kl * s_l), dc / (kc * s_c), d_hue / (kh * s_h)
    return np.sqrt(tl ** 2 + tc ** 2 + th ** 2 + r_t * tc * th)


def _channels_last(t: Tensor) -> np.ndarray:
    d = t.data.astype(np.float64)
    if d.ndim == 3:
        d = d[None]
    if d.ndim != 4 or d.shape[1] != 3:
        raise ShapeError(f"ciede2000: expected [3,H,W] or [N,3,H,W], got {t.shape}", t.shape)
    return np.moveaxis(d, 1, -1)


def ciede2000(gt_rgb: Tensor, pred_rgb: Tensor) -> float:
    """Mean CIEDE2000 over all pixels of two sRGB images in [0,1]."""
    _check_pair(gt_rgb, pred_rgb, "ciede2000")
    _check_range(gt_rgb, "ciede2000")
    _check_range(pred_rgb, "ciede2000")
    de = ciede2000_lab(srgb_to_lab(_channels_last(gt_rgb)), srgb_to_lab(_channels_last(pred_rgb)))
    return float(np.mean(de.ravel()))


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    ms_ssim: float
    delta_e00: float

    def row(self) -> str:
        """CSV fields ``psnr,ssim,ms_ssim,delta_e00``."""
        return f"{self.psnr:.4f},{self.ssim:.6f},{self.ms_ssim:.6f},{self.delta_e00:.4f}"


def evaluate(gt: Tensor, pred: Tensor) -> MetricReport:
    """All four metrics for one ``[1,3,H,W]`` (or ``[3,H,W]``) image pair."""
    if gt.ndim == 3:
        gt, pred = Tensor(gt.data[None]), Tensor(pred.data[None])
    gt64, pred64 = gt.astype(np.float64), pred.astype(np.float64)
    return MetricReport(
        psnr=psnr(gt64, pred64),
        ssim=ssim(gt64, pred64).item(),
        ms_ssim=ms_ssim(gt64, pred64).item(),
        delta_e00=ciede2000(gt64, pred64),
    )
