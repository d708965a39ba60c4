"""Quality measures against independent references (scikit-image, closed forms)."""

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from slidecascade.metrics import accuracy, auc, iou, psnr, ssim

from util import sine_patch


# ---------------------------------------------------------------------------
# psnr


def test_psnr_closed_forms():
    a = np.zeros((8, 8))
    assert psnr(a, a) == np.inf
    # uniform error of 0.1 everywhere: mse = 0.01, psnr = -10 log10(0.01) = 20
    assert psnr(a + 0.1, a) == pytest.approx(20.0, abs=1e-12)
    # peak 255 with mse 1: 10 log10(255^2) = 48.1308...
    b = np.zeros((4, 4))
    assert psnr(b + 1.0, b, peak=255.0) == pytest.approx(
        10 * np.log10(255.0**2), rel=1e-12
    )


def test_psnr_monotone_in_error():
    rng = np.random.default_rng(0)
    ref = rng.random((16, 16))
    vals = [psnr(ref + eps, ref) for eps in (0.01, 0.02, 0.05, 0.1)]
    assert vals == sorted(vals, reverse=True)


def test_psnr_shape_check():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


# ---------------------------------------------------------------------------
# ssim


def ssim_reference(x, y):
    """scikit-image with matching window settings, channel-averaged."""
    vals = []
    for c in range(x.shape[0]):
        full = structural_similarity(
            x[c],
            y[c],
            data_range=1.0,
            gaussian_weights=True,
            sigma=1.5,
            truncate=3.5,
            use_sample_covariance=False,
            full=True,
        )[1]
        pad = 5
        vals.append(full[pad:-pad, pad:-pad].mean())
    return float(np.mean(vals))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ssim_matches_skimage(seed):
    x = sine_patch(seed, size=48).astype(np.float64)
    y = sine_patch(seed + 100, size=48).astype(np.float64)
    assert ssim(x, y) == pytest.approx(ssim_reference(x, y), abs=1e-10)


def test_ssim_identical_images():
    x = sine_patch(3, size=32)
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_noise_lowers_score():
    x = sine_patch(4, size=48).astype(np.float64)
    rng = np.random.default_rng(0)
    mild = np.clip(x + rng.normal(0, 0.02, x.shape), 0, 1)
    harsh = np.clip(x + rng.normal(0, 0.2, x.shape), 0, 1)
    assert ssim(harsh, x) < ssim(mild, x) < 1.0


def test_ssim_accepts_single_plane():
    x = sine_patch(5, size=32)[0]
    y = sine_patch(6, size=32)[0]
    assert -1.0 <= ssim(x, y) <= 1.0


def test_ssim_validation():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 9)))
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))  # too small for the window
    with pytest.raises(ValueError):
        ssim(np.zeros((2, 3, 16, 16)), np.zeros((2, 3, 16, 16)))


# ---------------------------------------------------------------------------
# accuracy / auc


def test_accuracy():
    assert accuracy([1, 0, 1, 1], [1, 0, 0, 1]) == 0.75
    assert accuracy([0], [0]) == 1.0
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy([1, 0], [1])


def test_auc_perfect_and_inverted():
    labels = np.array([0, 0, 1, 1])
    assert auc(labels, [0.1, 0.2, 0.8, 0.9]) == 1.0
    assert auc(labels, [0.9, 0.8, 0.2, 0.1]) == 0.0
    assert auc(labels, [0.5, 0.5, 0.5, 0.5]) == 0.5


def test_auc_matches_pair_counting():
    rng = np.random.default_rng(1)
    labels = (rng.random(40) < 0.4).astype(int)
    scores = rng.normal(size=40) + labels * 0.7
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    assert auc(labels, scores) == pytest.approx(wins / (len(pos) * len(neg)), rel=1e-12)


def test_auc_ties_averaged():
    labels = [0, 1, 0, 1]
    scores = [0.3, 0.3, 0.1, 0.9]
    # pairs: (0.3,0.3) ties -> 0.5, (0.3,0.1) win, (0.9,0.3) win, (0.9,0.1) win
    assert auc(labels, scores) == pytest.approx(3.5 / 4, rel=1e-12)


def test_auc_needs_both_classes():
    with pytest.raises(ValueError):
        auc([1, 1], [0.1, 0.2])
    with pytest.raises(ValueError):
        auc([0, 0], [0.1, 0.2])
    with pytest.raises(ValueError):
        auc([0, 1], [0.1])


# ---------------------------------------------------------------------------
# iou


def test_iou_values():
    a = np.array([[1, 1], [0, 0]], dtype=bool)
    b = np.array([[1, 0], [1, 0]], dtype=bool)
    assert iou(a, b) == pytest.approx(1.0 / 3.0, rel=1e-15)
    assert iou(a, a) == 1.0
    assert iou(a, ~a) == 0.0
    assert iou(np.zeros((2, 2), bool), np.zeros((2, 2), bool)) == 1.0


def test_iou_shape_check():
    with pytest.raises(ValueError):
        iou(np.zeros((2, 2), bool), np.zeros((3, 2), bool))
