"""Local-to-global reconstruction: views, fusion algebra, training step."""

import numpy as np
import pytest

from slidecascade.engine import Adam, Tensor, bicubic_resize
from slidecascade.l2g import (
    L2gConfig,
    L2gNet,
    hierarchical_l1_loss,
    make_views,
    pyramid_targets,
    train_l2g_step,
)
from slidecascade.qhvae import Qhvae, QhvaeConfig

from util import sine_patch

ENC = QhvaeConfig(levels=3, widths=(8, 10, 12), latent_channels=(2, 2, 3),
                  input_size=32)
CFG = L2gConfig(patch_size=64, embed_dim=8, window=4, heads=2,
                blocks_per_stage=(1, 1), decoder_widths=(8, 8, 8, 8),
                local_channels=3)


def tiny_model(seed=0):
    return L2gNet(CFG, Qhvae(ENC, seed=0), seed=seed)


# ---------------------------------------------------------------------------
# views and targets


def test_make_views_partitions_exactly():
    x = sine_patch(0, size=64)
    distant, tiles = make_views(x)
    assert distant.shape == (1, 3, 32, 32)
    assert [t.shape for t in tiles] == [(1, 3, 32, 32)] * 4
    top = np.concatenate([tiles[0].data, tiles[1].data], axis=3)
    bottom = np.concatenate([tiles[2].data, tiles[3].data], axis=3)
    np.testing.assert_array_equal(np.concatenate([top, bottom], axis=2), x[None])
    # the distant view is the bicubic half-size render of the same patch
    np.testing.assert_array_equal(distant.data, bicubic_resize(Tensor(x[None]), 32, 32).data)


def test_make_views_validation():
    with pytest.raises(ValueError):
        make_views(np.zeros((3, 64, 32), dtype=np.float32))
    with pytest.raises(ValueError):
        make_views(np.zeros((3, 63, 63), dtype=np.float32))


def test_pyramid_targets_ladder():
    x = sine_patch(1, size=64)
    targets = pyramid_targets(x)
    assert [t.shape[-1] for t in targets] == [8, 16, 32, 64]
    np.testing.assert_array_equal(targets[-1].data, x[None])
    np.testing.assert_allclose(
        targets[0].data, bicubic_resize(Tensor(x[None]), 8, 8).data, rtol=1e-6
    )


def test_hierarchical_l1_closed_form():
    r = [Tensor(np.full((1, 3, 2, 2), 0.5, dtype=np.float32)),
         Tensor(np.full((1, 3, 4, 4), 0.25, dtype=np.float32))]
    t = [np.zeros((1, 3, 2, 2), dtype=np.float32),
         np.full((1, 3, 4, 4), 0.75, dtype=np.float32)]
    loss = hierarchical_l1_loss(r, t)
    assert loss.data == pytest.approx(0.5 + 0.5, rel=1e-7)
    with pytest.raises(ValueError):
        hierarchical_l1_loss(r, t[:1])
    with pytest.raises(ValueError):
        hierarchical_l1_loss(r, list(reversed(t)))


# ---------------------------------------------------------------------------
# config


def test_l2g_config_validation():
    with pytest.raises(ValueError):
        L2gConfig(patch_size=63)
    with pytest.raises(ValueError):
        L2gConfig(decoder_widths=(8, 8, 8))
    with pytest.raises(ValueError):
        L2gConfig(patch_size=64, window=5, blocks_per_stage=(1, 1))
    with pytest.raises(ValueError):
        L2gConfig(embed_dim=9, heads=2)
    assert CFG.tile_size == 32
    assert CFG.global_channels == 16
    assert CFG.fused_grid == 8


# ---------------------------------------------------------------------------
# fusion algebra


def test_fuse_is_additive_in_global_features():
    model = tiny_model()
    rng = np.random.default_rng(0)
    zg = Tensor(rng.normal(size=(1, 16, 8, 8)).astype(np.float32))
    locals_ = [Tensor(rng.normal(size=(1, 3, 4, 4)).astype(np.float32))
               for _ in range(4)]
    fused = model.fuse(zg, locals_)
    baseline = model.fuse(Tensor(np.zeros((1, 16, 8, 8), dtype=np.float32)), locals_)
    # exact in real arithmetic; float32 addition rounds at the last bit
    np.testing.assert_allclose(fused.data - baseline.data, zg.data, atol=1e-6, rtol=0)


def test_fuse_scatters_each_tile_to_its_quadrant():
    model = tiny_model()
    rng = np.random.default_rng(1)
    zg = Tensor(np.zeros((1, 16, 8, 8), dtype=np.float32))
    zeros = [Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32)) for _ in range(4)]
    base = model.fuse(zg, zeros).data
    quads = {0: (slice(0, 4), slice(0, 4)), 1: (slice(0, 4), slice(4, 8)),
             2: (slice(4, 8), slice(0, 4)), 3: (slice(4, 8), slice(4, 8))}
    for m in range(4):
        bumped = list(zeros)
        bumped[m] = Tensor(rng.normal(size=(1, 3, 4, 4)).astype(np.float32))
        diff = model.fuse(zg, bumped).data - base
        rs, cs = quads[m]
        inside = diff[:, :, rs, cs]
        assert np.any(inside != 0)
        outside = diff.copy()
        outside[:, :, rs, cs] = 0
        np.testing.assert_array_equal(outside, np.zeros_like(outside))


def test_fuse_validation():
    model = tiny_model()
    zg = Tensor(np.zeros((1, 16, 8, 8), dtype=np.float32))
    good = [Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32)) for _ in range(4)]
    with pytest.raises(ValueError):
        model.fuse(zg, good[:3])
    bad = list(good)
    bad[2] = Tensor(np.zeros((1, 3, 2, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        model.fuse(zg, bad)
    with pytest.raises(ValueError):
        model.fuse(Tensor(np.zeros((1, 16, 7, 8), dtype=np.float32)), good)


# ---------------------------------------------------------------------------
# the full net


def test_forward_shapes():
    model = tiny_model()
    out = model.forward(sine_patch(2, size=64))
    assert [r.shape[-1] for r in out["recons"]] == [8, 16, 32, 64]
    assert out["z_global"].shape == (1, 16, 8, 8)
    assert out["z_fused"].shape == (1, 16, 8, 8)
    assert len(out["z_locals"]) == 4
    feat = model.slide_feature(out["z_fused"])
    assert feat.shape == (16,)
    np.testing.assert_allclose(feat, out["z_fused"].data.mean(axis=(2, 3)).ravel(),
                               rtol=1e-7)


def test_encoder_stays_out_of_the_parameter_set():
    model = tiny_model()
    enc_ids = {id(p) for p in model.encoder.parameters()}
    own_ids = {id(p) for p in model.parameters()}
    assert not (enc_ids & own_ids)


def test_seed_determinism():
    a, b = tiny_model(seed=3), tiny_model(seed=3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)
    c = tiny_model(seed=4)
    assert any(not np.array_equal(pa.data, pc.data)
               for pa, pc in zip(a.parameters(), c.parameters()))


def test_local_cache_matches_fresh_encoding():
    x = sine_patch(3, size=64)
    m1, m2 = tiny_model(seed=5), tiny_model(seed=5)
    _, tiles = make_views(Tensor(x[None]))
    cache = [m1.encode_local(t) for t in tiles]
    o1 = Adam(m1.parameters(), lr=1e-3)
    o2 = Adam(m2.parameters(), lr=1e-3)
    r1 = train_l2g_step(m1, x, o1, local_cache=cache)
    r2 = train_l2g_step(m2, x, o2)
    assert r1["loss"] == r2["loss"]
    for p1, p2 in zip(m1.parameters(), m2.parameters()):
        np.testing.assert_array_equal(p1.data, p2.data)


def test_training_reduces_loss_and_freezes_encoder():
    x = sine_patch(4, size=64)
    model = tiny_model(seed=6)
    enc_before = [p.data.copy() for p in model.encoder.parameters()]
    opt = Adam(model.parameters(), lr=2e-3)
    _, tiles = make_views(Tensor(x[None]))
    cache = [model.encode_local(t) for t in tiles]
    first = train_l2g_step(model, x, opt, local_cache=cache)["loss"]
    last = None
    for _ in range(39):
        last = train_l2g_step(model, x, opt, local_cache=cache)["loss"]
    assert last < first
    for before, p in zip(enc_before, model.encoder.parameters()):
        np.testing.assert_array_equal(before, p.data)
