"""Stage-2 patch selection: k-means over latent features, balanced draws.

Stage-1 survivors are embedded with the compression model, clustered, and
each cluster contributes the same number of uniformly drawn patches.  The
per-slide budget is therefore k times the smallest cluster's size rather
than a tuned percentage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["ClusterModel", "kmeans", "min_cluster_size", "balanced_sample"]


@dataclass(frozen=True)
class ClusterModel:
    k: int
    centers: np.ndarray
    assignments: np.ndarray
    inertia: float
    inertia_history: tuple

    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)


def _standardize(features: np.ndarray) -> np.ndarray:
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std[std == 0.0] = 1.0
    return (features - mean) / std


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # ||x - c||^2 expanded; clamp tiny negatives from cancellation
    d = (
        (points * points).sum(axis=1)[:, None]
        - 2.0 * points @ centers.T
        + (centers * centers).sum(axis=1)[None, :]
    )
    return np.maximum(d, 0.0)


def _plus_plus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=points.dtype)
    centers[0] = points[rng.integers(n)]
    closest = _sq_dists(points, centers[:1]).reshape(-1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # all remaining points coincide with chosen centers
            centers[j] = points[rng.integers(n)]
            continue
        probs = closest / total
        centers[j] = points[rng.choice(n, p=probs)]
        closest = np.minimum(closest, _sq_dists(points, centers[j : j + 1]).reshape(-1))
    return centers


def kmeans(features, k: int, seed: int = 0, max_iter: int = 100) -> ClusterModel:
    """Lloyd iterations from a k-means++ start on z-scored columns.

    Empty clusters are repaired by reseeding at the point farthest from
    its current center, one repair pass per iteration, so every cluster
    in the result is nonempty.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got shape {features.shape}")
    if not np.all(np.isfinite(features)):
        raise ValueError("feature matrix contains non-finite entries")
    n = features.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if n < k:
        raise ValueError(f"cannot form {k} clusters from {n} rows")

    points = _standardize(features)
    rng = np.random.default_rng(seed)
    centers = _plus_plus_init(points, k, rng)
    assignments = np.full(n, -1, dtype=np.int64)
    history = []
    for _ in range(max_iter):
        dists = _sq_dists(points, centers)
        new_assign = dists.argmin(axis=1)
        # repair: hand each empty cluster the farthest point that a
        # multi-member cluster can spare, so no donor goes empty in turn
        for j in range(k):
            if not np.any(new_assign == j):
                sizes = np.bincount(new_assign, minlength=k)
                donors = np.where(sizes[new_assign] > 1)[0]
                far = donors[dists[donors, new_assign[donors]].argmax()]
                new_assign[far] = j
                centers[j] = points[far]
                dists[:, j] = _sq_dists(points, centers[j : j + 1]).reshape(-1)
        history.append(float(dists[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        for j in range(k):
            centers[j] = points[assignments == j].mean(axis=0)
    inertia = float(_sq_dists(points, centers)[np.arange(n), assignments].sum())
    return ClusterModel(
        k=k,
        centers=centers,
        assignments=assignments,
        inertia=inertia,
        inertia_history=tuple(history),
    )


def min_cluster_size(model: ClusterModel) -> int:
    sizes = model.cluster_sizes()
    if np.any(sizes == 0):
        raise ValueError("cluster model has an empty cluster")
    return int(sizes.min())


def balanced_sample(model: ClusterModel, m_min: int, seed: int = 0) -> np.ndarray:
    """Exactly m_min row ids drawn uniformly without replacement per cluster.

    Returns the sorted union, k * m_min unique ids in total.
    """
    sizes = model.cluster_sizes()
    if m_min < 1:
        raise ValueError(f"m_min must be >= 1, got {m_min}")
    short = np.nonzero(sizes < m_min)[0]
    if short.size:
        j = int(short[0])
        raise ValueError(f"cluster {j} has {int(sizes[j])} members, fewer than m_min={m_min}")
    rng = np.random.default_rng(seed)
    picks = []
    for j in range(model.k):
        ids = np.nonzero(model.assignments == j)[0]
        picks.append(rng.choice(ids, size=m_min, replace=False))
    return np.sort(np.concatenate(picks))
