"""Stage-1 patch selection: gated-attention MIL scoring over tissue grids.

A small ensemble of bag-level classifiers is trained on per-patch feature
vectors, one scorer per patch scale.  Each scorer's attention head yields a
probability map over its own grid; maps are renormalized onto the common
grid, fused by convex weights, and the top p1 percent of cells survive to
stage 2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Adam, Module, Parameter, Tensor, no_grad, softmax, trunc_normal

__all__ = [
    "AttentionMap",
    "GatedAttentionMil",
    "train_mil_scorer",
    "gated_attention_scores",
    "normalize_to_common_grid",
    "fuse_scores",
    "scores_to_map",
    "select_top_p",
]


@dataclass(frozen=True)
class AttentionMap:
    """Per-cell attention mass on a patch grid; zero outside tissue.

    ``scale`` is the patch edge in pixels that one cell covers.  The grid
    entries are a probability distribution: non-negative, summing to 1.
    """

    scale: int
    grid: np.ndarray

    def total(self) -> float:
        return float(self.grid.sum(dtype=np.float64))


class GatedAttentionMil(Module):
    """Bag classifier with a gated-tanh attention head.

    Per patch feature h: logit e = w^T (tanh(V1 h) * sigmoid(V2 h));
    attention a = softmax(e) over the bag; the bag embedding sum(a_m h_m)
    feeds a linear head.  The attention vector doubles as the per-patch
    score map once the classifier is trained.
    """

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.v1 = Parameter(trunc_normal(rng, (in_dim, hidden), std=0.1))
        self.v2 = Parameter(trunc_normal(rng, (in_dim, hidden), std=0.1))
        self.w = Parameter(trunc_normal(rng, (hidden, 1), std=0.1))
        self.head_w = Parameter(trunc_normal(rng, (in_dim, 1), std=0.1))
        self.head_b = Parameter(np.zeros(1, dtype=np.float32))
        self.in_dim = in_dim

    def attention(self, feats: Tensor) -> Tensor:
        """Softmax attention over the K rows of a (K, D) feature matrix."""
        gate = (feats @ self.v1.tensor).tanh() * (feats @ self.v2.tensor).sigmoid()
        logits = (gate @ self.w.tensor).reshape(1, -1)
        return softmax(logits, axis=-1)

    def forward(self, feats) -> tuple:
        feats = feats if isinstance(feats, Tensor) else Tensor(feats)
        if feats.ndim != 2 or feats.shape[1] != self.in_dim:
            raise ValueError(f"expected (K, {self.in_dim}) features, got {feats.shape}")
        att = self.attention(feats)
        pooled = att @ feats
        logit = (pooled @ self.head_w.tensor + self.head_b.tensor).reshape(())
        return logit, att.reshape(-1)


def _bce_from_logit(logit: Tensor, label: float) -> Tensor:
    # softplus(l) - y*l == -log sigmoid(l) for y=1, -log(1-sigmoid(l)) for y=0
    return logit.softplus() - logit * float(label)


def train_mil_scorer(
    bags,
    labels,
    scale: int,
    hidden: int = 64,
    epochs: int = 40,
    lr: float = 1e-3,
    seed: int = 0,
) -> GatedAttentionMil:
    """Fit one gated-attention scorer on per-slide bags of feature vectors.

    ``bags`` is a sequence of (K_i, D) arrays, ``labels`` binary.  Trains
    with one Adam step per bag in a seeded shuffled order.  The returned
    model records ``scale`` so the caller can route maps later.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if len(bags) != labels.size:
        raise ValueError(f"{len(bags)} bags vs {labels.size} labels")
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError(f"need both classes present, got labels {classes.tolist()}")
    dims = {b.shape[1] for b in bags}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dims across bags: {sorted(dims)}")

    rng = np.random.default_rng(seed)
    model = GatedAttentionMil(dims.pop(), hidden, rng)
    model.scale = scale
    opt = Adam(model.parameters(), lr=lr)
    tensors = [Tensor(np.asarray(b, dtype=np.float32)) for b in bags]
    order = np.arange(len(bags))
    for _ in range(epochs):
        rng.shuffle(order)
        for i in order:
            logit, _ = model.forward(tensors[i])
            loss = _bce_from_logit(logit, labels[i])
            model.zero_grad()
            loss.backward()
            opt.step()
    return model


def gated_attention_scores(model: GatedAttentionMil, feats) -> np.ndarray:
    """Attention distribution over a bag's patches, as float64 summing to 1."""
    feats = np.asarray(feats, dtype=np.float32)
    if not np.all(np.isfinite(feats)):
        raise ValueError("non-finite feature values")
    with no_grad():
        _, att = model.forward(Tensor(feats))
    scores = att.data.astype(np.float64)
    return scores / scores.sum()


def scores_to_map(scores, rows_cols, shape, scale: int) -> AttentionMap:
    """Spread per-patch scores onto a dense (rows, cols) grid."""
    grid = np.zeros(shape, dtype=np.float64)
    for s, (r, c) in zip(scores, rows_cols):
        grid[r, c] = s
    return AttentionMap(scale=scale, grid=grid)


def normalize_to_common_grid(amap: AttentionMap, target_scale: int) -> AttentionMap:
    """Re-express an attention map on the target patch scale, conserving mass.

    Finer maps aggregate: each target cell collects the sum of the source
    cells it contains.  Coarser maps split: each source cell's mass is
    shared equally among the target cells inside it.
    """
    if target_scale <= 0 or amap.scale <= 0:
        raise ValueError("scales must be positive")
    if amap.scale == target_scale:
        return AttentionMap(scale=target_scale, grid=amap.grid.copy())
    if target_scale % amap.scale == 0:
        f = target_scale // amap.scale
        r, c = amap.grid.shape
        if r % f or c % f:
            raise ValueError(
                f"grid {r}x{c} at scale {amap.scale} does not tile the {target_scale} grid"
            )
        coarse = amap.grid.reshape(r // f, f, c // f, f).sum(axis=(1, 3))
        return AttentionMap(scale=target_scale, grid=coarse)
    if amap.scale % target_scale == 0:
        f = amap.scale // target_scale
        fine = np.repeat(np.repeat(amap.grid, f, axis=0), f, axis=1) / float(f * f)
        return AttentionMap(scale=target_scale, grid=fine)
    raise ValueError(f"scales {amap.scale} and {target_scale} are not commensurate")


def fuse_scores(maps, weights) -> AttentionMap:
    """Convex combination of maps already on one common grid."""
    maps = list(maps)
    if not maps:
        raise ValueError("nothing to fuse")
    w = np.asarray(weights, dtype=np.float64)
    if w.size != len(maps):
        raise ValueError(f"{len(maps)} maps vs {w.size} weights")
    if np.any(w < 0):
        raise ValueError("ensemble weights must be non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("ensemble weights sum to zero")
    w = w / total
    shape = maps[0].grid.shape
    scale = maps[0].scale
    for m in maps[1:]:
        if m.grid.shape != shape or m.scale != scale:
            raise ValueError(
                f"grid mismatch: {m.grid.shape} at scale {m.scale} vs {shape} at {scale}"
            )
    fused = np.zeros(shape, dtype=np.float64)
    for wi, m in zip(w, maps):
        fused += wi * m.grid
    return AttentionMap(scale=scale, grid=fused)


def select_top_p(amap: AttentionMap, p1: float, mask=None) -> list:
    """The ceil(p1*K/100) highest-scored tissue cells as (row, col) pairs.

    Ties break by score descending, then row, then column, so selections
    are deterministic and nest as p1 grows.
    """
    if not 0 < p1 <= 100:
        raise ValueError(f"p1 must be in (0, 100], got {p1}")
    if mask is None:
        mask = amap.grid > 0
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != amap.grid.shape:
        raise ValueError(f"mask shape {mask.shape} != grid shape {amap.grid.shape}")
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise ValueError("no tissue cells to select from")
    k = int(np.ceil(p1 * rows.size / 100.0))
    scores = amap.grid[rows, cols]
    order = np.lexsort((cols, rows, -scores))
    keep = order[:k]
    return [(int(rows[i]), int(cols[i])) for i in keep]
