"""Reconstruction and classification quality measures.

PSNR follows the peak-1.0 convention used across the package and
reports float('inf') for identical inputs. SSIM is the Gaussian-window
(11x11, sigma 1.5) formulation with the standard stabilizer constants,
computed per channel and averaged, with the filter-support border
cropped before the mean so partial windows never contribute.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .qhvae import psnr_from_mse

_SSIM_SIGMA = 1.5
_SSIM_TRUNCATE = 3.5  # radius 5 at sigma 1.5: an 11x11 window
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def psnr(image: np.ndarray, reference: np.ndarray, peak: float = 1.0) -> float:
    image = np.asarray(image, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if image.shape != reference.shape:
        raise ValueError(f"shape {image.shape} != {reference.shape}")
    return psnr_from_mse(float(((image - reference) ** 2).mean()), peak=peak)


def _ssim_plane(x: np.ndarray, y: np.ndarray, c1: float, c2: float) -> float:
    blur = lambda a: ndimage.gaussian_filter(
        a, sigma=_SSIM_SIGMA, truncate=_SSIM_TRUNCATE, mode="reflect"
    )
    ux, uy = blur(x), blur(y)
    vx = blur(x * x) - ux * ux
    vy = blur(y * y) - uy * uy
    cov = blur(x * y) - ux * uy
    s = ((2 * ux * uy + c1) * (2 * cov + c2)) / (
        (ux * ux + uy * uy + c1) * (vx + vy + c2)
    )
    pad = int(_SSIM_TRUNCATE * _SSIM_SIGMA + 0.5)
    return float(s[pad:-pad, pad:-pad].mean())


def ssim(image: np.ndarray, reference: np.ndarray, peak: float = 1.0) -> float:
    """Mean structural similarity; accepts (H, W) or (C, H, W) arrays."""
    x = np.asarray(image, dtype=np.float64)
    y = np.asarray(reference, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape {x.shape} != {y.shape}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    if x.ndim != 3:
        raise ValueError(f"expected 2 or 3 dims, got {x.ndim}")
    pad = int(_SSIM_TRUNCATE * _SSIM_SIGMA + 0.5)
    if min(x.shape[1:]) <= 2 * pad:
        raise ValueError(f"image {x.shape[1:]} too small for an 11x11 window")
    c1 = (_SSIM_K1 * peak) ** 2
    c2 = (_SSIM_K2 * peak) ** 2
    return float(np.mean([_ssim_plane(x[c], y[c], c1, c2) for c in range(x.shape[0])]))


def accuracy(labels, predictions) -> float:
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if labels.shape != predictions.shape or labels.size == 0:
        raise ValueError("labels and predictions must be equal-length and nonempty")
    return float((labels == predictions).mean())


def auc(labels, scores) -> float:
    """Area under the ROC curve via the rank statistic, ties averaged."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise ValueError("labels and scores must be equal-length")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores)
    return float(
        (ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
    )


def iou(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Intersection over union of two boolean masks."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape {a.shape} != {b.shape}")
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return float(int((a & b).sum()) / union)


__all__ = ["psnr", "ssim", "accuracy", "auc", "iou"]
