"""Quantized hierarchical VAE with rate-distortion training.

The model encodes a patch bottom-up into multiscale features, then decodes
top-down from a learnable constant, injecting one latent per level.  Each
latent has a Gaussian prior (mu_hat, sigma_hat) predicted from the decoder
state and a unit-width uniform posterior centered on a learned mean mu.
Training samples z = mu + u with u ~ U[-1/2, 1/2); inference replaces the
sample by mu_hat + round(mu - mu_hat), whose integer residual is what the
entropy coder transports.  Because the residual's probability under the
prior integral depends only on (residual, sigma_hat) — the fractional
mu_hat shifts the integration window and the latent by the same amount —
the codec tables are zero-mean with per-element sigma.

Compression and decompression drive the decoder with identical float32
arithmetic on identical inputs, which is what makes the reconstruction
identity bit-exact rather than merely close.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special as _sp

from .codec import (
    DEFAULT_PRECISION,
    DEFAULT_SUPPORT,
    SIGMA_FLOOR,
    LevelSegment,
    estimate_rate,
    gaussian_table_batch,
    parse_bitstream,
    rans_decode,
    rans_encode,
    serialize_bitstream,
)
from .engine import (
    ChannelLayerNorm,
    Conv2d,
    ConvNeXtBlock,
    Module,
    ModuleList,
    Parameter,
    Tensor,
    concatenate,
    maximum_scalar,
    no_grad,
    trunc_normal,
)

__all__ = [
    "QhvaeConfig",
    "Qhvae",
    "CompressResult",
    "kl_rate_term",
    "quantize_latent",
    "round_half_away",
    "rd_loss",
    "train_step",
    "psnr_from_mse",
]

_LOG2 = float(np.log(2.0))
_LOG_SQRT_2PI = 0.5 * float(np.log(2.0 * np.pi))


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Nearest integer with halves rounded away from zero.

    numpy's rint rounds halves to even; coding needs one fixed rule that
    matches on every platform, so ties are pinned explicitly.
    """
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def quantize_latent(mu, mu_hat) -> Tensor:
    """z = mu_hat + round(mu - mu_hat); the residual (z - mu_hat) is integer.

    The result is float64 on purpose.  Rebuilding mu_hat + residual in
    float32 would round the sum, after which (z - mu_hat) is no longer the
    coded integer; in float64 the difference recovers the residual exactly
    for any |residual| within the coder's support.
    """
    mu_data = mu.data if isinstance(mu, Tensor) else np.asarray(mu)
    hat_data = mu_hat.data if isinstance(mu_hat, Tensor) else np.asarray(mu_hat)
    if mu_data.shape != hat_data.shape:
        raise ValueError(f"mu shape {mu_data.shape} != mu_hat shape {hat_data.shape}")
    mu64 = mu_data.astype(np.float64)
    hat64 = hat_data.astype(np.float64)
    return Tensor(hat64 + round_half_away(mu64 - hat64))


def _interval_log_mass(delta: np.ndarray, sigma: np.ndarray):
    """log p, and the pdf/p ratios at both interval edges, all float64.

    p = Phi((delta+1/2)/sigma) - Phi((delta-1/2)/sigma).  Evaluated in the
    log domain on the mirrored (delta <= 0) configuration, where both edge
    CDFs are well below one, then the edge ratios are swapped back for
    positive delta.  Stays finite out to |delta|/sigma in the hundreds,
    far past where direct subtraction of CDFs underflows.
    """
    sign_flip = delta > 0
    d = np.where(sign_flip, -delta, delta)
    a = (d - 0.5) / sigma
    b = (d + 0.5) / sigma
    log_cdf_a = _sp.log_ndtr(a)
    log_cdf_b = _sp.log_ndtr(b)
    # log(e^B - e^A) = B + log1p(-e^(A-B)), with A < B
    diff = np.minimum(log_cdf_a - log_cdf_b, -1e-300)
    log_p = log_cdf_b + np.log1p(-np.exp(diff))
    log_pdf_a = -0.5 * a * a - _LOG_SQRT_2PI
    log_pdf_b = -0.5 * b * b - _LOG_SQRT_2PI
    ratio_a = np.exp(log_pdf_a - log_p)
    ratio_b = np.exp(log_pdf_b - log_p)
    # Mirroring swaps the roles of the two edges.
    ratio_lo = np.where(sign_flip, ratio_b, ratio_a)
    ratio_hi = np.where(sign_flip, ratio_a, ratio_b)
    return log_p, ratio_lo, ratio_hi


def kl_rate_term(z, mu_hat, sigma_hat) -> Tensor:
    """Total coded bits of z under the boxed-Gaussian prior, differentiable.

    Returns sum over elements of -log2 of the interval mass
    [z-1/2, z+1/2] under N(mu_hat, sigma_hat^2), as a float64 scalar
    Tensor with exact analytic gradients for z, mu_hat, and sigma_hat.
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    mu_hat = mu_hat if isinstance(mu_hat, Tensor) else Tensor(mu_hat)
    sigma_hat = sigma_hat if isinstance(sigma_hat, Tensor) else Tensor(sigma_hat)
    delta = (z.data - mu_hat.data).astype(np.float64)
    sigma = sigma_hat.data.astype(np.float64)
    if np.any(sigma < SIGMA_FLOOR - 1e-9):
        raise ValueError("sigma_hat below SIGMA_FLOOR reached the rate term; floor it upstream")
    log_p, ratio_lo, ratio_hi = _interval_log_mass(delta, sigma)
    bits = -log_p.sum() / _LOG2
    from .engine.tensor import _accumulate, _tracking

    if not _tracking(z, mu_hat, sigma_hat):
        return Tensor(np.float64(bits))

    alpha = (delta - 0.5) / sigma
    beta = (delta + 0.5) / sigma

    def backward(g):
        g = float(g)
        # d(-ln p)/d(delta) = -(pdf_hi - pdf_lo)/p ; bits = -ln p / ln 2
        d_delta = -(ratio_hi - ratio_lo) / (sigma * _LOG2) * g
        if z.requires_grad:
            _accumulate(z, d_delta)
        if mu_hat.requires_grad:
            _accumulate(mu_hat, -d_delta)
        if sigma_hat.requires_grad:
            d_sigma = (ratio_hi * beta - ratio_lo * alpha) / (sigma * _LOG2) * g
            _accumulate(sigma_hat, d_sigma)

    return Tensor._from_op(np.float64(bits), (z, mu_hat, sigma_hat), backward)


def rd_loss(recon: Tensor, target: Tensor, total_rate_bits: Tensor, lam: float) -> Tensor:
    """Rate plus lambda-weighted summed squared error, accumulated in float64."""
    if recon.shape != target.shape:
        raise ValueError(f"recon shape {recon.shape} != target shape {target.shape}")
    err = recon.astype(np.float64) - target.astype(np.float64)
    sse = (err * err).sum()
    return total_rate_bits + sse * float(lam)


def psnr_from_mse(mse: float, peak: float = 1.0) -> float:
    if mse <= 0.0:
        return float("inf")
    return 10.0 * float(np.log10(peak * peak / mse))


@dataclass(frozen=True)
class QhvaeConfig:
    levels: int = 3
    widths: tuple = (32, 64, 96)
    latent_channels: tuple = (4, 8, 16)
    input_size: int = 64
    lam: float = 2048.0
    support: tuple = DEFAULT_SUPPORT
    precision: int = DEFAULT_PRECISION

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if len(self.widths) != self.levels or len(self.latent_channels) != self.levels:
            raise ValueError("widths and latent_channels must list one entry per level")
        if self.input_size % (1 << self.levels):
            raise ValueError(f"input size {self.input_size} not divisible by 2^{self.levels}")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")


@dataclass
class CompressResult:
    bitstream: bytes
    recon: np.ndarray
    features: list  # per-level latent maps z_i, coarse to fine, float32 (C,H,W)
    payload_bits: int
    estimated_bits: float
    ideal_bits: float  # kl_rate_term at the quantized latents
    n_clamped_residuals: int
    n_clamped_sigmas: int


class _LatentLevel(Module):
    """Prior and posterior heads plus the injection block for one level."""

    def __init__(self, dec_width: int, enc_width: int, z_channels: int, rng):
        super().__init__()
        self.prior_mu = Conv2d(dec_width, z_channels, 1, rng)
        self.prior_sigma = Conv2d(dec_width, z_channels, 1, rng)
        self.post1 = Conv2d(dec_width + enc_width, dec_width, 1, rng)
        self.post2 = Conv2d(dec_width, z_channels, 1, rng)
        self.embed = Conv2d(z_channels, dec_width, 1, rng)
        self.block = ConvNeXtBlock(dec_width, rng)

    def prior(self, h_dec):
        mu_hat = self.prior_mu(h_dec)
        sigma_hat = maximum_scalar(self.prior_sigma(h_dec).softplus(), SIGMA_FLOOR)
        return mu_hat, sigma_hat

    def posterior_mu(self, h_dec, h_enc):
        return self.post2(self.post1(concatenate([h_dec, h_enc], axis=1)).gelu())

    def inject(self, h_dec, z):
        return h_dec + self.block(self.embed(z))


class Qhvae(Module):
    """Hierarchical encoder/decoder pair with per-level quantized latents."""

    def __init__(self, config: QhvaeConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        n = config.levels
        widths = config.widths

        downs = ModuleList()
        blocks = ModuleList()
        in_ch = 3
        for w in widths:
            downs.append(Conv2d(in_ch, w, 1, rng, stride=2))
            blocks.append(ConvNeXtBlock(w, rng))
            in_ch = w
        self.enc_downs = downs
        self.enc_blocks = blocks

        # Decoder state widths, coarsest first: mirror the encoder widths,
        # then hold the finest width through the last upsample.
        dec_widths = [widths[n - 1 - i] for i in range(n)] + [widths[0]]
        self.dec_widths = dec_widths
        self.start = Parameter(trunc_normal(rng, (dec_widths[0], 1, 1)))

        levels = ModuleList()
        ups = ModuleList()
        for i in range(1, n + 1):
            enc_width = widths[n - i]
            z_ch = config.latent_channels[n - i]
            levels.append(_LatentLevel(dec_widths[i - 1], enc_width, z_ch, rng))
            ups.append(Conv2d(dec_widths[i - 1], dec_widths[i], 1, rng))
        self.levels = levels
        self.ups = ups
        self.head = Conv2d(dec_widths[n], 3, 3, rng, padding=1)

    # -- pieces ---------------------------------------------------------------

    def encode(self, patch) -> list:
        """Bottom-up multiscale features h_enc[1..N], finest first."""
        x = patch if isinstance(patch, Tensor) else Tensor(patch)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected a (B,3,H,W) patch, got {x.shape}")
        size = x.shape[-1]
        if x.shape[-2] != size or size % (1 << self.config.levels):
            raise ValueError(
                f"patch extent {x.shape[-2]}x{x.shape[-1]} not square or not divisible "
                f"by 2^{self.config.levels}"
            )
        feats = []
        h = x
        for down, block in zip(self.enc_downs, self.enc_blocks):
            h = block(down(h))
            feats.append(h)
        return feats

    def _start_state(self, batch: int, height: int, width: int) -> Tensor:
        r = self.start.tensor.reshape(1, self.dec_widths[0], 1, 1)
        anchor = Tensor(np.zeros((batch, 1, height, width), dtype=np.float32))
        return r + anchor

    def latent_block(self, index: int, h_dec_prev, mode: str, h_enc=None, rng=None, z=None):
        """One level's latent draw: (z, mu, mu_hat, sigma_hat).

        train: z = mu + u, u ~ U[-1/2, 1/2) from ``rng``.
        compress: z = mu_hat + round(mu - mu_hat).
        decompress: ``z`` is supplied by the caller; mu is None.
        """
        level = self.levels[index]
        mu_hat, sigma_hat = level.prior(h_dec_prev)
        if mode == "decompress":
            if z is None:
                raise ValueError("decompress mode needs the coded z supplied")
            return z, None, mu_hat, sigma_hat
        if h_enc is None:
            raise ValueError(f"{mode} mode needs encoder features for level {index + 1}")
        mu = level.posterior_mu(h_dec_prev, h_enc)
        if mode == "train":
            if rng is None:
                raise ValueError("train mode needs an rng for the posterior sample")
            u = rng.uniform(-0.5, 0.5, size=mu.shape).astype(np.float32)
            return mu + Tensor(u), mu, mu_hat, sigma_hat
        if mode == "compress":
            return quantize_latent(mu, mu_hat), mu, mu_hat, sigma_hat
        raise ValueError(f"unknown mode {mode!r}")

    # -- full passes ----------------------------------------------------------

    def forward_train(self, patch, rng) -> dict:
        x = patch if isinstance(patch, Tensor) else Tensor(patch)
        feats = self.encode(x)
        n = self.config.levels
        h = self._start_state(x.shape[0], x.shape[-2] >> n, x.shape[-1] >> n)
        zs, mus, mu_hats, sigma_hats = [], [], [], []
        for i in range(n):
            z, mu, mu_hat, sigma_hat = self.latent_block(
                i, h, "train", h_enc=feats[n - 1 - i], rng=rng
            )
            h = self.levels[i].inject(h, z)
            h = self.ups[i](h.upsample_nearest2d(2))
            zs.append(z)
            mus.append(mu)
            mu_hats.append(mu_hat)
            sigma_hats.append(sigma_hat)
        recon = self.head(h)
        return {"recon": recon, "z": zs, "mu": mus, "mu_hat": mu_hats, "sigma_hat": sigma_hats}

    def compress(self, patch) -> CompressResult:
        """Quantize, entropy-code, and reconstruct one patch (batch of 1)."""
        x = patch if isinstance(patch, Tensor) else Tensor(patch)
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        if x.shape[0] != 1:
            raise ValueError("compress handles one patch at a time")
        smin, smax = self.config.support
        n = self.config.levels
        segments = []
        features = []
        ideal_bits = 0.0
        estimated_bits = 0.0
        clamped_residuals = 0
        clamped_sigmas = 0
        with no_grad():
            feats = self.encode(x)
            h = self._start_state(1, x.shape[-2] >> n, x.shape[-1] >> n)
            for i in range(n):
                _, mu, mu_hat, sigma_hat = self.latent_block(
                    i, h, "compress", h_enc=feats[n - 1 - i]
                )
                hat64 = mu_hat.data.astype(np.float64)
                residual = round_half_away(mu.data.astype(np.float64) - hat64)
                clipped = np.clip(residual, smin, smax)
                clamped_residuals += int(np.count_nonzero(clipped != residual))
                z = Tensor(hat64 + clipped)
                symbols = clipped.reshape(-1).astype(np.int64)
                sigmas = sigma_hat.data.astype(np.float64).reshape(-1)
                tables = gaussian_table_batch(
                    0.0, sigmas, self.config.support, self.config.precision
                )
                clamped_sigmas += tables.n_clamped
                payload = rans_encode(symbols, tables)
                _, c, hh, ww = z.shape
                segments.append(LevelSegment(hh, ww, c, payload))
                estimated_bits += estimate_rate(symbols, tables)
                ideal_bits += float(
                    kl_rate_term(z, Tensor(hat64), Tensor(sigma_hat.data.astype(np.float64))).data
                )
                features.append(z.data[0].copy())
                h = self.levels[i].inject(h, z.astype(np.float32))
                h = self.ups[i](h.upsample_nearest2d(2))
            recon = self.head(h)
        blob = serialize_bitstream(segments)
        payload_bits = sum(len(s.payload) for s in segments) * 8
        return CompressResult(
            bitstream=blob,
            recon=recon.data.copy(),
            features=features,
            payload_bits=payload_bits,
            estimated_bits=estimated_bits,
            ideal_bits=ideal_bits,
            n_clamped_residuals=clamped_residuals,
            n_clamped_sigmas=clamped_sigmas,
        )

    def extract(self, patch) -> list:
        """Quantized per-level latent maps without entropy coding.

        Identical arrays to CompressResult.features, for feature pipelines
        that never need the bitstream.
        """
        x = patch if isinstance(patch, Tensor) else Tensor(patch)
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        return [level[0] for level in self.extract_batch(x)]

    def extract_batch(self, patches, max_levels: int = None) -> list:
        """extract() over a whole batch, one (B, C, h, w) array per level.

        max_levels truncates the hierarchy after that many coarsest
        levels, skipping the remaining (and most expensive) decoder
        work; the values of the levels that are returned are unchanged.
        Per-sample values can differ from single-patch extraction in the
        last float bit (BLAS blocking depends on operand extents), so
        callers that need reproducibility must batch deterministically.
        """
        x = patches if isinstance(patches, Tensor) else Tensor(patches)
        if x.ndim != 4:
            raise ValueError(f"expected (B, 3, H, W), got {x.shape}")
        smin, smax = self.config.support
        n = self.config.levels
        take = n if max_levels is None else min(max(max_levels, 1), n)
        features = []
        with no_grad():
            feats = self.encode(x)
            h = self._start_state(x.shape[0], x.shape[-2] >> n, x.shape[-1] >> n)
            for i in range(take):
                _, mu, mu_hat, _ = self.latent_block(i, h, "compress", h_enc=feats[n - 1 - i])
                hat64 = mu_hat.data.astype(np.float64)
                residual = round_half_away(mu.data.astype(np.float64) - hat64)
                z = Tensor(hat64 + np.clip(residual, smin, smax))
                features.append(z.data.copy())
                if i + 1 < take:
                    h = self.levels[i].inject(h, z.astype(np.float32))
                    h = self.ups[i](h.upsample_nearest2d(2))
        return features

    def decompress(self, blob: bytes):
        """Decode a bitstream back to (recon, per-level latent features)."""
        segments = parse_bitstream(blob)
        n = self.config.levels
        if len(segments) != n:
            raise ValueError(f"stream has {len(segments)} levels, model expects {n}")
        base = segments[0]
        expect_extent = None
        features = []
        with no_grad():
            h = self._start_state(1, base.height, base.width)
            for i, seg in enumerate(segments):
                level_cfg_ch = self.config.latent_channels[n - 1 - i]
                if seg.channels != level_cfg_ch:
                    raise ValueError(
                        f"level {i + 1}: stream has {seg.channels} channels, config says {level_cfg_ch}"
                    )
                if expect_extent is not None and (seg.height, seg.width) != expect_extent:
                    raise ValueError(f"level {i + 1}: unexpected extent {seg.height}x{seg.width}")
                expect_extent = (seg.height * 2, seg.width * 2)
                mu_hat, sigma_hat = self.levels[i].prior(h)
                if mu_hat.shape[1:] != (seg.channels, seg.height, seg.width):
                    raise ValueError(
                        f"level {i + 1}: prior grid {mu_hat.shape[1:]} does not match "
                        f"stream geometry {(seg.channels, seg.height, seg.width)}"
                    )
                sigmas = sigma_hat.data.astype(np.float64).reshape(-1)
                tables = gaussian_table_batch(
                    0.0, sigmas, self.config.support, self.config.precision
                )
                symbols = rans_decode(seg.payload, tables, seg.n_elements)
                residual = symbols.astype(np.float64).reshape(1, seg.channels, seg.height, seg.width)
                z = Tensor(mu_hat.data.astype(np.float64) + residual)
                features.append(z.data[0].copy())
                h = self.levels[i].inject(h, z.astype(np.float32))
                h = self.ups[i](h.upsample_nearest2d(2))
            recon = self.head(h)
        return recon.data.copy(), features

    def feature_vector(self, features: list, level: int = 0) -> np.ndarray:
        """Spatially mean-pooled latent map; level 0 is the coarsest."""
        if not 0 <= level < len(features):
            raise ValueError(f"level {level} outside 0..{len(features) - 1}")
        return features[level].mean(axis=(1, 2))


def train_step(model: Qhvae, batch, optimizer, rng) -> dict:
    """One rate-distortion update; returns loss, rate_bpp, psnr, sse."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    out = model.forward_train(x, rng)
    total_rate = None
    for i, (z, mu_hat, sigma_hat) in enumerate(zip(out["z"], out["mu_hat"], out["sigma_hat"])):
        bits = kl_rate_term(z, mu_hat, sigma_hat)
        if not np.isfinite(bits.data):
            raise FloatingPointError(f"non-finite rate at level {i + 1}")
        total_rate = bits if total_rate is None else total_rate + bits
    if not np.all(np.isfinite(out["recon"].data)):
        raise FloatingPointError("non-finite reconstruction")
    loss = rd_loss(out["recon"], x, total_rate, model.config.lam)
    model.zero_grad()
    loss.backward()
    optimizer.step()
    b, _, h, w = x.shape
    n_px = b * h * w
    err = (out["recon"].data.astype(np.float64) - x.data.astype(np.float64)) ** 2
    mse = float(err.mean())
    return {
        "loss": float(loss.data),
        "rate_bpp": float(total_rate.data) / n_px,
        "psnr": psnr_from_mse(mse),
        "sse": float(err.sum()),
    }
