"""
Image quality metrics and constant-image baselines
"""

import logging
from typing import Dict, Optional

import numpy as np
from skimage.metrics import structural_similarity

from .errors import RenderError

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
MSE_FLOOR = 1e-10
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise RenderError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1], capped at 100 dB"""
    a, b = _pair(a, b)
    if a.size == 0:
        raise RenderError("cannot score empty images")
    mse = float(np.mean((a - b) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def ssim(a, b) -> float:
    """Gaussian-window SSIM (11 x 11, sigma 1.5), computed per channel and averaged"""
    a, b = _pair(a, b)
    if a.ndim not in (2, 3):
        raise RenderError(f"expected an H x W or H x W x C image, got {a.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise RenderError(f"image {a.shape[1]}x{a.shape[0]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    return float(structural_similarity(
        a, b,
        data_range=1.0,
        gaussian_weights=True,
        sigma=SSIM_SIGMA,
        use_sample_covariance=False,
        K1=0.01,
        K2=0.03,
        channel_axis=-1 if a.ndim == 3 else None,
    ))


def mask_box(mask: np.ndarray) -> Optional[tuple]:
    """(row slice, col slice) of the mask's bounding rectangle, None for an empty mask"""
    rows = np.flatnonzero(np.any(mask, axis=1))
    cols = np.flatnonzero(np.any(mask, axis=0))
    if rows.size == 0:
        return None
    return slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1)


def body_psnr(pred, gt, mask) -> float:
    """PSNR inside the bounding rectangle of the ground-truth mask; full frame if it is empty"""
    pred, gt = _pair(pred, gt)
    box = mask_box(np.asarray(mask, dtype=bool))
    if box is None:
        return psnr(pred, gt)
    return psnr(pred[box], gt[box])


def gray_baseline(gt) -> np.ndarray:
    return np.full(np.shape(gt), 0.5)


def mean_color_baseline(gt) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.float64)
    return np.broadcast_to(gt.reshape(-1, gt.shape[-1]).mean(axis=0), gt.shape).copy()


def score(pred, gt, mask=None) -> Dict[str, float]:
    """Every metric of one rendered view"""
    result = {"psnr": psnr(pred, gt), "ssim": ssim(pred, gt)}
    if mask is not None:
        result["body_psnr"] = body_psnr(pred, gt, mask)
    return result


def baseline_scores(gt, mask=None) -> Dict[str, float]:
    gray = score(gray_baseline(gt), gt, mask)
    mean = score(mean_color_baseline(gt), gt, mask)
    return {**{f"gray_{k}": v for k, v in gray.items()}, **{f"mean_color_{k}": v for k, v in mean.items()}}
