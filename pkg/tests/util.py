"""Small generators shared across test modules."""

import numpy as np


def sine_patch(seed: int, size: int = 64, noise: float = 0.0) -> np.ndarray:
    """Smooth 3-channel patch built from a few oriented sinusoids.

    Values stay inside [0, 1].  ``noise`` adds i.i.d. Gaussian pixels,
    which also puts a hard ceiling on achievable reconstruction PSNR,
    so overfitting tests pass zero.
    """
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size] / size
    patch = np.full((3, size, size), 0.55, dtype=np.float64)
    for _ in range(4):
        freq = rng.uniform(1.0, 3.0)
        amp = rng.uniform(0.1, 0.25)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        angle = rng.uniform(0.0, np.pi)
        wave = np.sin(2 * np.pi * freq * (np.cos(angle) * xs + np.sin(angle) * ys) + phase)
        patch += amp * wave * rng.uniform(0.3, 1.0, size=(3, 1, 1))
    if noise:
        patch += rng.normal(0.0, noise, size=patch.shape)
    return np.clip(patch, 0.0, 1.0).astype(np.float32)


def blobs(seed: int, k: int = 3, per: int = 40, dim: int = 4, spread: float = 0.15):
    """Well-separated Gaussian blobs; returns (points, labels, centers)."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-3.0, 3.0, size=(k, dim))
    while True:
        d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        d[np.arange(k), np.arange(k)] = np.inf
        if d.min() > 2.0:
            break
        centers = rng.uniform(-3.0, 3.0, size=(k, dim))
    points = np.concatenate(
        [c + rng.normal(0.0, spread, size=(per, dim)) for c in centers]
    ).astype(np.float64)
    labels = np.repeat(np.arange(k), per)
    order = rng.permutation(len(points))
    return points[order], labels[order], centers
