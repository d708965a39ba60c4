"""Local-to-global reconstruction of high-resolution patches.

Each selected patch is split into two complementary views: a bicubically
downsampled distant view covering the whole patch, and four close-up
quadrant tiles at native resolution.  A shifted-window attention branch
summarizes the distant view; the frozen compression model embeds each
tile.  The tile embeddings are projected and scattered into their
quadrants of the global feature grid, added to the global features, and
a stack of upsample+conv stages decodes the fused grid back to pixels at
four scales, each supervised with a mean absolute error against the
matching bicubic downsample of the original.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import (
    Adam,
    Conv2d,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    Parameter,
    Tensor,
    WindowAttention,
    bicubic_resize,
    no_grad,
    trunc_normal,
)
from .engine.tensor import concatenate
from .qhvae import Qhvae, psnr_from_mse

__all__ = [
    "L2gConfig",
    "L2gNet",
    "make_views",
    "hierarchical_l1_loss",
    "train_l2g_step",
]


@dataclass(frozen=True)
class L2gConfig:
    patch_size: int = 256          # I3: full-resolution input edge
    embed_dim: int = 32            # global branch width after patch embedding
    window: int = 8
    heads: int = 2
    blocks_per_stage: tuple = (2, 2)
    decoder_widths: tuple = (48, 32, 24, 16)
    local_channels: int = 16       # coarsest latent width of the tile encoder

    def __post_init__(self):
        if self.patch_size % 2:
            raise ValueError(f"patch size must be even, got {self.patch_size}")
        if len(self.decoder_widths) != 4:
            raise ValueError("decoder needs exactly four stage widths")
        grid = self.patch_size // 2 // 2  # after tiling halves, embedding halves
        for stage in range(len(self.blocks_per_stage)):
            if grid % self.window:
                raise ValueError(
                    f"stage {stage + 1} grid {grid} not divisible by window {self.window}"
                )
            grid //= 2
        if self.embed_dim % self.heads:
            raise ValueError(f"embed dim {self.embed_dim} not divisible by {self.heads} heads")

    @property
    def tile_size(self) -> int:
        return self.patch_size // 2

    @property
    def global_channels(self) -> int:
        return self.embed_dim * (1 << (len(self.blocks_per_stage) - 1))

    @property
    def fused_grid(self) -> int:
        # embed halves the distant view, each merge halves again
        return self.tile_size // 2 // (1 << (len(self.blocks_per_stage) - 1))


def make_views(patch) -> tuple:
    """(distant view, [4 quadrant tiles]); tiles partition the patch exactly."""
    x = patch if isinstance(patch, Tensor) else Tensor(patch)
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    b, c, h, w = x.shape
    if h != w:
        raise ValueError(f"expected a square patch, got {h}x{w}")
    if h % 2:
        raise ValueError(f"patch edge {h} is odd; quadrants need an even extent")
    half = h // 2
    tiles = [
        x[:, :, :half, :half],
        x[:, :, :half, half:],
        x[:, :, half:, :half],
        x[:, :, half:, half:],
    ]
    distant = bicubic_resize(x, half, half)
    return distant, tiles


class PatchMerge(Module):
    """2x2 neighborhood concat + linear projection, halving the grid."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.proj = Linear(4 * channels, 2 * channels, rng, bias=False)
        self.norm = LayerNorm(4 * channels)

    def forward(self, x) -> Tensor:
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"cannot merge odd grid {h}x{w}")
        x = x.reshape(b, c, h // 2, 2, w // 2, 2)
        x = x.transpose(0, 2, 4, 3, 5, 1)          # b, h/2, w/2, 2, 2, c
        x = x.reshape(b, (h // 2) * (w // 2), 4 * c)
        x = self.proj(self.norm(x))
        x = x.reshape(b, h // 2, w // 2, 2 * c).transpose(0, 3, 1, 2)
        return x


class AttentionBlock(Module):
    """Pre-norm windowed attention + MLP, both residual, on NCHW maps."""

    def __init__(self, channels: int, window: int, shift: int, heads: int, rng):
        super().__init__()
        self.attn = WindowAttention(channels, window, shift, heads, rng)
        self.norm1 = LayerNorm(channels)
        self.norm2 = LayerNorm(channels)
        self.fc1 = Linear(channels, 4 * channels, rng)
        self.fc2 = Linear(4 * channels, channels, rng)

    def _tokens(self, x):
        b, c, h, w = x.shape
        return x.reshape(b, c, h * w).transpose(0, 2, 1), (b, c, h, w)

    def forward(self, x) -> Tensor:
        tokens, (b, c, h, w) = self._tokens(x)
        normed = self.norm1(tokens).transpose(0, 2, 1).reshape(b, c, h, w)
        x = x + self.attn(normed)
        tokens, _ = self._tokens(x)
        mlp = self.fc2(self.fc1(self.norm2(tokens)).gelu())
        return x + mlp.transpose(0, 2, 1).reshape(b, c, h, w)


class GlobalBranch(Module):
    """Patch embedding, windowed-attention stages, merge between stages."""

    def __init__(self, config: L2gConfig, rng):
        super().__init__()
        self.embed = Conv2d(3, config.embed_dim, 2, rng, stride=2)
        self.embed_norm = LayerNorm(config.embed_dim)
        stages = ModuleList()
        merges = ModuleList()
        dim = config.embed_dim
        for s, depth in enumerate(config.blocks_per_stage):
            blocks = ModuleList()
            for i in range(depth):
                shift = 0 if i % 2 == 0 else config.window // 2
                blocks.append(AttentionBlock(dim, config.window, shift, config.heads, rng))
            stages.append(blocks)
            if s + 1 < len(config.blocks_per_stage):
                merges.append(PatchMerge(dim, rng))
                dim *= 2
        self.stages = stages
        self.merges = merges
        self.out_norm = LayerNorm(dim)

    def forward(self, distant) -> Tensor:
        x = self.embed(distant)
        b, c, h, w = x.shape
        tokens = x.reshape(b, c, h * w).transpose(0, 2, 1)
        x = self.embed_norm(tokens).transpose(0, 2, 1).reshape(b, c, h, w)
        for s, blocks in enumerate(self.stages):
            for block in blocks:
                x = block(x)
            if s < len(self.merges):
                x = self.merges[s](x)
        b, c, h, w = x.shape
        tokens = x.reshape(b, c, h * w).transpose(0, 2, 1)
        return self.out_norm(tokens).transpose(0, 2, 1).reshape(b, c, h, w)


class L2gNet(Module):
    """Two-branch encoder, additive quadrant fusion, 4-scale decoder."""

    def __init__(self, config: L2gConfig, encoder: Qhvae, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        self.global_branch = GlobalBranch(config, rng)
        cg = config.global_channels
        aligns = ModuleList()
        for _ in range(4):
            aligns.append(Conv2d(config.local_channels, cg, 1, rng))
        self.aligns = aligns
        widths = config.decoder_widths
        self.dec_in = Conv2d(cg, widths[0], 3, rng, padding=1)
        convs = ModuleList()
        heads = ModuleList()
        prev = widths[0]
        heads.append(Conv2d(prev, 3, 3, rng, padding=1))
        for wdt in widths[1:]:
            convs.append(Conv2d(prev, wdt, 3, rng, padding=1))
            heads.append(Conv2d(wdt, 3, 3, rng, padding=1))
            prev = wdt
        self.dec_convs = convs
        self.dec_heads = heads
        # the tile encoder is frozen scaffolding; registering it as a child
        # would hand its weights to this module's optimizer traversal
        object.__setattr__(self, "_encoder", encoder)

    @property
    def encoder(self) -> Qhvae:
        return self._encoder

    def encode_local(self, tile) -> Tensor:
        """Frozen coarsest-level latent map of one tile, as a constant."""
        features = self._encoder.extract(tile)
        return Tensor(features[0][None].astype(np.float32))

    def encode_global(self, distant) -> Tensor:
        return self.global_branch(distant)

    def fuse(self, z_global, z_locals) -> Tensor:
        """z_F = z_G + sum of per-quadrant projected local features."""
        if len(z_locals) != 4:
            raise ValueError(f"expected 4 tile features, got {len(z_locals)}")
        b, c, h, w = z_global.shape
        if h % 2 or w % 2:
            raise ValueError(f"global grid {h}x{w} cannot split into quadrants")
        qh, qw = h // 2, w // 2
        rows = []
        for r in range(2):
            cols = []
            for cidx in range(2):
                m = 2 * r + cidx
                z = z_locals[m]
                if z.shape[-2:] != (qh, qw):
                    raise ValueError(
                        f"tile {m} feature grid {z.shape[-2:]} != quadrant {(qh, qw)}"
                    )
                cols.append(self.aligns[m](z))
            rows.append(concatenate(cols, axis=3))
        scattered = concatenate(rows, axis=2)
        return z_global + scattered

    def decode(self, z_fused) -> list:
        """Reconstructions at 1/8, 1/4, 1/2, and full patch resolution."""
        x = self.dec_in(z_fused).gelu()
        outs = [self.dec_heads[0](x)]
        for conv, head in zip(self.dec_convs, self.dec_heads[1:]):
            x = conv(x.upsample_nearest2d(2)).gelu()
            outs.append(head(x))
        return outs

    def forward(self, patch) -> dict:
        distant, tiles = make_views(patch)
        z_locals = [self.encode_local(t) for t in tiles]
        z_global = self.encode_global(distant)
        z_fused = self.fuse(z_global, z_locals)
        return {
            "recons": self.decode(z_fused),
            "z_global": z_global,
            "z_fused": z_fused,
            "z_locals": z_locals,
        }

    def slide_feature(self, z_fused) -> np.ndarray:
        """Spatial mean pool of the fused grid; one vector per patch."""
        data = z_fused.data if isinstance(z_fused, Tensor) else np.asarray(z_fused)
        return data.mean(axis=(2, 3)).reshape(-1)


def hierarchical_l1_loss(recons, targets) -> Tensor:
    """Sum over scales of the per-scale mean absolute error."""
    if len(recons) != len(targets):
        raise ValueError(f"{len(recons)} reconstructions vs {len(targets)} targets")
    loss = None
    for i, (r, t) in enumerate(zip(recons, targets)):
        t = t if isinstance(t, Tensor) else Tensor(t)
        if r.shape != t.shape:
            raise ValueError(f"scale {i}: shape {r.shape} != target {t.shape}")
        term = (r.astype(np.float64) - t.astype(np.float64)).abs().mean()
        loss = term if loss is None else loss + term
    return loss


def pyramid_targets(patch, n_scales: int = 4) -> list:
    """Bicubic downsamples of the ground truth, coarsest first."""
    x = patch if isinstance(patch, Tensor) else Tensor(patch)
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    size = x.shape[-1]
    outs = []
    for i in range(n_scales - 1, 0, -1):
        s = size >> i
        outs.append(bicubic_resize(x, s, s))
    outs.append(x)
    return outs


def train_l2g_step(model: L2gNet, patch, optimizer, local_cache=None) -> dict:
    """One supervised step; local features may come from a per-patch cache."""
    x = patch if isinstance(patch, Tensor) else Tensor(patch)
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    distant, tiles = make_views(x)
    if local_cache is None:
        z_locals = [model.encode_local(t) for t in tiles]
    else:
        z_locals = local_cache
    z_global = model.encode_global(distant)
    z_fused = model.fuse(z_global, z_locals)
    recons = model.decode(z_fused)
    targets = pyramid_targets(x)
    loss = hierarchical_l1_loss(recons, targets)
    if not np.isfinite(loss.data):
        finites = [bool(np.all(np.isfinite(r.data))) for r in recons]
        raise FloatingPointError(f"non-finite loss; per-scale recon finiteness {finites}")
    model.zero_grad()
    loss.backward()
    optimizer.step()
    full = recons[-1].data.astype(np.float64)
    mse = float(((full - x.data.astype(np.float64)) ** 2).mean())
    return {"loss": float(loss.data), "psnr_full": psnr_from_mse(mse), "z_fused": z_fused}
