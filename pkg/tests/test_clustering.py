"""k-means and the balanced per-cluster draw."""

import numpy as np
import pytest

from slidecascade.clustering import (
    ClusterModel,
    balanced_sample,
    kmeans,
    min_cluster_size,
)

from util import blobs


def zscore(features):
    features = np.asarray(features, dtype=np.float64)
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std[std == 0.0] = 1.0
    return (features - mean) / std


def test_recovers_separated_blobs():
    points, labels, _ = blobs(0, k=3, per=40)
    model = kmeans(points, k=3, seed=0)
    # same partition up to cluster relabeling
    for j in range(3):
        members = labels[model.assignments == j]
        assert members.size == 40
        assert np.all(members == members[0])


def test_assignments_are_nearest_center():
    points, _, _ = blobs(1, k=4, per=25, dim=5)
    model = kmeans(points, k=4, seed=1)
    z = zscore(points)
    d = ((z[:, None] - model.centers[None]) ** 2).sum(axis=-1)
    np.testing.assert_array_equal(model.assignments, d.argmin(axis=1))


def test_centers_are_member_means():
    points, _, _ = blobs(2, k=3, per=30)
    model = kmeans(points, k=3, seed=0)
    z = zscore(points)
    for j in range(model.k):
        np.testing.assert_allclose(
            model.centers[j], z[model.assignments == j].mean(axis=0), atol=1e-12
        )


def test_inertia_matches_definition_and_decreases():
    points, _, _ = blobs(3, k=3, per=30)
    model = kmeans(points, k=3, seed=2)
    z = zscore(points)
    d = ((z[:, None] - model.centers[None]) ** 2).sum(axis=-1)
    expect = d[np.arange(len(z)), model.assignments].sum()
    assert model.inertia == pytest.approx(expect, rel=1e-12)
    hist = np.asarray(model.inertia_history)
    assert hist.size >= 1
    assert np.all(np.diff(hist) <= 1e-9)


def test_seed_determinism():
    points, _, _ = blobs(4, k=3, per=20)
    a = kmeans(points, k=3, seed=7)
    b = kmeans(points, k=3, seed=7)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    np.testing.assert_array_equal(a.centers, b.centers)
    assert a.inertia == b.inertia


def test_n_equals_k_gives_singletons():
    points, _, _ = blobs(5, k=3, per=2)  # 6 points
    model = kmeans(points, k=6, seed=0)
    assert sorted(model.cluster_sizes().tolist()) == [1] * 6
    assert model.inertia == pytest.approx(0.0, abs=1e-18)


def test_duplicate_points_still_fill_every_cluster():
    points = np.zeros((6, 2))
    model = kmeans(points, k=3, seed=0)
    assert np.all(model.cluster_sizes() >= 1)
    assert model.cluster_sizes().sum() == 6


def test_kmeans_validation():
    points, _, _ = blobs(6, k=2, per=5)
    with pytest.raises(ValueError):
        kmeans(points, k=0)
    with pytest.raises(ValueError):
        kmeans(points, k=11)  # only 10 rows
    with pytest.raises(ValueError):
        kmeans(points.ravel(), k=2)
    bad = points.copy()
    bad[0, 0] = np.inf
    with pytest.raises(ValueError):
        kmeans(bad, k=2)


def test_min_cluster_size():
    points, _, _ = blobs(7, k=3, per=15)
    model = kmeans(points, k=3, seed=0)
    assert min_cluster_size(model) == int(model.cluster_sizes().min())
    hollow = ClusterModel(
        k=3,
        centers=model.centers,
        assignments=np.zeros_like(model.assignments),
        inertia=0.0,
        inertia_history=(),
    )
    with pytest.raises(ValueError):
        min_cluster_size(hollow)


def test_balanced_sample_counts_and_uniqueness():
    points, _, _ = blobs(8, k=4, per=12)
    model = kmeans(points, k=4, seed=0)
    m_min = min_cluster_size(model)
    picks = balanced_sample(model, m_min, seed=0)
    assert picks.size == 4 * m_min
    assert np.unique(picks).size == picks.size
    assert np.all(np.diff(picks) > 0)  # sorted
    per_cluster = np.bincount(model.assignments[picks], minlength=4)
    assert np.all(per_cluster == m_min)


def test_balanced_sample_validation():
    points, _, _ = blobs(9, k=3, per=6)
    model = kmeans(points, k=3, seed=0)
    with pytest.raises(ValueError):
        balanced_sample(model, 0)
    with pytest.raises(ValueError):
        balanced_sample(model, min_cluster_size(model) + len(points))


def test_balanced_sample_seed_determinism():
    points, _, _ = blobs(10, k=3, per=10)
    model = kmeans(points, k=3, seed=0)
    a = balanced_sample(model, 2, seed=5)
    b = balanced_sample(model, 2, seed=5)
    np.testing.assert_array_equal(a, b)


def test_balanced_sample_draws_uniformly():
    # fixed model, many seeds: each member of a cluster should be hit
    # T/n times within 3 sigma of the binomial spread
    points, _, _ = blobs(11, k=2, per=8)
    model = kmeans(points, k=2, seed=0)
    trials = 2000
    counts = np.zeros(len(points), dtype=np.int64)
    for t in range(trials):
        counts[balanced_sample(model, 1, seed=t)] += 1
    for j in range(model.k):
        ids = np.nonzero(model.assignments == j)[0]
        p = 1.0 / ids.size
        expect = trials * p
        sigma = np.sqrt(trials * p * (1.0 - p))
        assert np.all(np.abs(counts[ids] - expect) <= 3.0 * sigma), (
            f"cluster {j}: counts {counts[ids].tolist()} vs {expect:.1f} +- {3 * sigma:.1f}"
        )
