"""Compression model checks.

The rate term is pinned against a 50-digit mpmath integration of the same
interval mass, evaluated on the mirrored negative side where the CDFs
keep their precision.  Round-trip tests assert bit-exactness, not
closeness: the decoder must reproduce the encoder's reconstruction and
features to the last float.
"""

import numpy as np
import pytest

from slidecascade.engine import Tensor, finite_diff_check
from slidecascade.qhvae import (
    CompressResult,
    Qhvae,
    QhvaeConfig,
    kl_rate_term,
    psnr_from_mse,
    quantize_latent,
    rd_loss,
    round_half_away,
    train_step,
)

from util import sine_patch

TINY = QhvaeConfig(levels=2, widths=(8, 12), latent_channels=(2, 3), input_size=16)


def mpmath_bits(delta: float, sigma: float) -> float:
    import mpmath as mp

    mp.mp.dps = 50
    d = -abs(mp.mpf(repr(delta)))
    s = mp.mpf(repr(sigma))
    p = mp.ncdf((d + mp.mpf("0.5")) / s) - mp.ncdf((d - mp.mpf("0.5")) / s)
    return float(-mp.log(p) / mp.log(2))


# ---------------------------------------------------------------------------
# quantization law


def test_round_half_away_ties():
    x = np.array([0.5, -0.5, 1.5, -1.5, 2.49999, -2.5, 0.0])
    np.testing.assert_array_equal(round_half_away(x), [1, -1, 2, -2, 2, -3, 0])


def test_quantized_residual_is_integer():
    rng = np.random.default_rng(0)
    mu = rng.normal(0.0, 20.0, size=(4, 9, 9)).astype(np.float32)
    mu_hat = rng.normal(0.0, 20.0, size=(4, 9, 9)).astype(np.float32)
    z = quantize_latent(Tensor(mu), Tensor(mu_hat))
    assert z.data.dtype == np.float64
    residual = z.data - mu_hat.astype(np.float64)
    np.testing.assert_array_equal(residual, np.round(residual))
    assert np.abs(residual - (mu.astype(np.float64) - mu_hat.astype(np.float64))).max() <= 0.5


def test_residual_recoverable_across_support():
    # mu_hat + r must give back exactly r for every codable residual, in
    # float64; this is the property the bitstream roundtrip stands on
    rng = np.random.default_rng(1)
    mu_hat = rng.normal(0.0, 30.0, size=4096).astype(np.float32).astype(np.float64)
    residuals = rng.integers(-127, 129, size=4096).astype(np.float64)
    z = mu_hat + residuals
    np.testing.assert_array_equal(round_half_away(z - mu_hat), residuals)


def test_quantize_shape_guard():
    with pytest.raises(ValueError):
        quantize_latent(np.zeros((2, 3)), np.zeros((3, 2)))


# ---------------------------------------------------------------------------
# rate term


ORACLE_GRID = [(d, s) for d in (0.0, 0.3, -0.7, 5.0, -20.0, 60.0, 127.0)
               for s in (0.11, 0.5, 3.0, 40.0)]


def test_rate_term_matches_mpmath():
    worst = 0.0
    for delta, sigma in ORACLE_GRID:
        got = kl_rate_term(np.array([delta]), np.array([0.0]), np.array([sigma])).item()
        want = mpmath_bits(delta, sigma)
        worst = max(worst, abs(got - want) / want)
    assert worst < 1e-12, f"worst relative error {worst:.2e}"


def test_rate_term_sums_over_elements():
    deltas = np.array([0.0, 2.0, -5.0])
    sigmas = np.array([1.0, 2.0, 0.5])
    total = kl_rate_term(deltas, np.zeros(3), sigmas).item()
    parts = sum(kl_rate_term(np.array([d]), np.array([0.0]), np.array([s])).item()
                for d, s in zip(deltas, sigmas))
    assert abs(total - parts) < 1e-9


def test_rate_term_gradients():
    for seed in (0, 1, 2):
        rng = np.random.default_rng(seed)
        z = Tensor(rng.normal(0.0, 4.0, size=12))
        mu = Tensor(rng.normal(0.0, 4.0, size=12))
        sg = Tensor(rng.uniform(0.2, 6.0, size=12))
        err = finite_diff_check(kl_rate_term, [z, mu, sg], epsilon=1e-5)
        assert err < 1e-3, f"seed {seed}: {err:.2e}"


def test_rate_term_monotone_in_distance():
    bits = [kl_rate_term(np.array([d]), np.array([0.0]), np.array([2.0])).item()
            for d in (0.0, 1.0, 3.0, 10.0, 40.0)]
    assert all(b2 > b1 for b1, b2 in zip(bits, bits[1:]))


def test_rate_term_rejects_sub_floor_sigma():
    with pytest.raises(ValueError):
        kl_rate_term(np.zeros(1), np.zeros(1), np.full(1, 0.05))


def test_rd_loss_composition():
    recon = Tensor(np.full((1, 3, 2, 2), 0.5))
    target = Tensor(np.zeros((1, 3, 2, 2)))
    loss = rd_loss(recon, target, Tensor(np.float64(7.0)), lam=10.0)
    assert abs(loss.item() - (7.0 + 10.0 * 12 * 0.25)) < 1e-12


def test_psnr_from_mse_closed_forms():
    assert psnr_from_mse(0.01) == pytest.approx(20.0)
    assert psnr_from_mse(0.0) == float("inf")
    assert psnr_from_mse(1.0, peak=2.0) == pytest.approx(10.0 * np.log10(4.0))


# ---------------------------------------------------------------------------
# model roundtrip


def test_compress_decompress_bit_exact():
    model = Qhvae(TINY, seed=3)
    for seed in range(4):
        patch = sine_patch(seed, size=16, noise=0.05)
        res = model.compress(patch)
        assert isinstance(res, CompressResult)
        recon, features = model.decompress(res.bitstream)
        np.testing.assert_array_equal(recon, res.recon)
        assert len(features) == len(res.features)
        for a, b in zip(features, res.features):
            np.testing.assert_array_equal(a, b)


def test_compress_accounting_is_consistent():
    model = Qhvae(TINY, seed=3)
    res = model.compress(sine_patch(9, size=16))
    assert res.payload_bits >= res.ideal_bits - 1e-6
    assert res.estimated_bits >= res.ideal_bits - 1e-6
    assert res.payload_bits <= res.estimated_bits * 1.02 + 32 * TINY.levels + 128
    assert res.n_clamped_residuals >= 0 and res.n_clamped_sigmas >= 0
    assert len(res.bitstream) > 8


def test_bitstream_tamper_detected():
    model = Qhvae(TINY, seed=3)
    blob = model.compress(sine_patch(2, size=16)).bitstream
    bad = bytearray(blob)
    bad[len(bad) // 2] ^= 0x10
    with pytest.raises(ValueError):
        model.decompress(bytes(bad))


def test_same_seed_same_bitstream():
    a = Qhvae(TINY, seed=11)
    b = Qhvae(TINY, seed=11)
    patch = sine_patch(5, size=16)
    assert a.compress(patch).bitstream == b.compress(patch).bitstream
    c = Qhvae(TINY, seed=12)
    assert c.compress(patch).bitstream != a.compress(patch).bitstream


def test_extract_matches_compress_features():
    model = Qhvae(TINY, seed=7)
    patch = sine_patch(1, size=16)
    feats = model.extract(patch)
    comp = model.compress(patch)
    assert len(feats) == TINY.levels
    np.testing.assert_array_equal(feats[0], comp.features[0])


def test_extract_batch_consistency():
    # Batched and single-patch extraction may differ in the last float bit
    # (BLAS blocking depends on operand extents), but not beyond, and the
    # truncated call must reproduce the full call bit for bit since it runs
    # the identical batch through the identical prefix of the hierarchy.
    model = Qhvae(TINY, seed=7)
    patches = np.stack([sine_patch(s, size=16) for s in range(3)])
    full = model.extract_batch(patches)
    single = model.extract(patches[1])
    for level, batch_level in enumerate(full):
        np.testing.assert_allclose(batch_level[1], single[level], atol=1e-5, rtol=0)
    short = model.extract_batch(patches, max_levels=1)
    assert len(short) == 1
    np.testing.assert_array_equal(short[0], full[0])


def test_train_step_loss_composition():
    model = Qhvae(TINY, seed=0)
    from slidecascade.engine import Adam

    rng = np.random.default_rng(0)
    batch = np.stack([sine_patch(s, size=16) for s in range(2)])
    opt = Adam(model.parameters(), lr=1e-4)
    m = train_step(model, batch, opt, rng)
    n_px = batch.shape[0] * batch.shape[2] * batch.shape[3]
    rate_bits = m["rate_bpp"] * n_px
    # the loss is rate plus lambda-weighted distortion, nothing else
    assert m["loss"] == pytest.approx(rate_bits + TINY.lam * m["sse"], rel=1e-6)
    assert m["psnr"] == pytest.approx(psnr_from_mse(m["sse"] / batch.size), rel=1e-6)


def test_training_reduces_loss():
    from slidecascade.engine import Adam

    model = Qhvae(TINY, seed=5)
    rng = np.random.default_rng(5)
    batch = np.stack([sine_patch(s, size=16) for s in range(2)])
    opt = Adam(model.parameters(), lr=2e-3)
    first = train_step(model, batch, opt, rng)["loss"]
    for _ in range(30):
        last = train_step(model, batch, opt, rng)["loss"]
    assert last < first


def test_config_validation():
    with pytest.raises(ValueError):
        QhvaeConfig(levels=1, widths=(8,), latent_channels=(2,))
    with pytest.raises(ValueError):
        QhvaeConfig(levels=2, widths=(8,), latent_channels=(2, 3))
    with pytest.raises(ValueError):
        QhvaeConfig(levels=3, widths=(8, 8, 8), latent_channels=(2, 2, 2), input_size=20)
    with pytest.raises(ValueError):
        QhvaeConfig(levels=2, widths=(8, 8), latent_channels=(2, 2), input_size=16, lam=0.0)
