"""End-to-end orchestration over a slide dataset.

Everything here is plain plumbing between the library pieces: dataset
synthesis, QHVAE and scorer training, the two-stage cascade, patch
compression, reconstruction-network training, feature emission, and the
slide-level aggregator. All outputs are text records, raw bitstreams,
or lossless images inside the run's output directory, and every stage
is deterministic under the run seed.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clustering import balanced_sample, kmeans, min_cluster_size
from .config import RunConfig
from .engine import Adam, Linear, Module, Tensor, no_grad
from .l2g import L2gConfig, L2gNet, make_views, train_l2g_step
from .metrics import psnr, ssim
from .mil import (AttentionMap, GatedAttentionMil, fuse_scores,
                  gated_attention_scores, normalize_to_common_grid,
                  scores_to_map, select_top_p, train_mil_scorer)
from .qhvae import Qhvae, QhvaeConfig, train_step
from .slides import SlideParams, ingest_tiles, load_patch, load_tile, synth_slide

_EXTRACT_BATCH = 16


# ---------------------------------------------------------------------------
# records and checkpoints

def format_record(row: dict) -> str:
    parts = []
    for key, value in row.items():
        if isinstance(value, float):
            value = f"{value:.8g}"
        parts.append(f"{key}={value}")
    return " ".join(parts)


def write_records(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(format_record(r) + "\n" for r in rows))


def read_records(path) -> list:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rows.append(dict(part.split("=", 1) for part in line.split()))
    return rows


def save_params(module: Module, path, extra: dict = None):
    """Write named parameters (plus optional metadata arrays) to one file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {f"p/{name}": p.data for name, p in module.named_parameters()}
    for key, value in (extra or {}).items():
        payload[f"m/{key}"] = np.asarray(value)
    np.savez(path, **payload)


def load_params(module: Module, path) -> dict:
    """Restore parameters in place; names and shapes must match exactly."""
    with np.load(Path(path)) as blob:
        stored = {k[2:]: blob[k] for k in blob.files if k.startswith("p/")}
        meta = {k[2:]: blob[k] for k in blob.files if k.startswith("m/")}
    params = dict(module.named_parameters())
    if set(stored) != set(params):
        missing = sorted(set(params) - set(stored))
        surplus = sorted(set(stored) - set(params))
        raise ValueError(f"checkpoint mismatch: missing {missing}, surplus {surplus}")
    for name, arr in stored.items():
        if params[name].data.shape != arr.shape:
            raise ValueError(
                f"{name}: checkpoint shape {arr.shape} != model {params[name].data.shape}"
            )
        params[name].data[...] = arr
    return meta


def params_digest(module: Module) -> str:
    """Order-independent hash of all named parameter tensors."""
    digest = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        digest.update(name.encode())
        digest.update(str(p.data.shape).encode())
        digest.update(np.ascontiguousarray(p.data, dtype=np.float32).tobytes())
    return digest.hexdigest()


def cosine_lr(base: float, step: int, total: int) -> float:
    """Linear warmup over the first 15% of steps, cosine decay after.

    Fan-in initialized nets start with full-scale activations, so the first
    optimizer steps see large, noisy gradients; ramping the rate in avoids
    settling into the early noise.  ``step`` counts from 1.
    """
    warm = max(int(round(0.15 * total)), 1)
    if step <= warm:
        return base * step / warm
    return 0.5 * base * (1.0 + np.cos(np.pi * (step - warm) / (total - warm)))


# ---------------------------------------------------------------------------
# dataset

def slide_seed(base_seed: int, index: int) -> int:
    return (base_seed * 1_000_003 + index) % (1 << 63)


def synth_dataset(config: RunConfig, out_root) -> list:
    """Generate the run's slides; even indices carry the planted region."""
    s = config.slides
    manifests = []
    for i in range(s.n_slides):
        fraction = s.tumor_fraction if i % 2 == 0 else 0.0
        params = SlideParams(rows=s.rows, cols=s.cols, tile_size=s.tile_size,
                             tumor_fraction=fraction, tissue_cover=s.tissue_cover)
        sid = f"slide_{i:04d}"
        manifests.append(
            synth_slide(Path(out_root) / "slides" / sid, sid,
                        slide_seed(config.run.seed, i), params)
        )
    return manifests


def load_dataset(out_root, jobs: int = 1) -> tuple:
    """Ingest every slide directory under out_root/slides."""
    slide_dirs = sorted((Path(out_root) / "slides").iterdir())
    if not slide_dirs:
        raise FileNotFoundError(f"no slide directories under {out_root}/slides")
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            ingested = list(pool.map(ingest_tiles, slide_dirs))
    else:
        ingested = [ingest_tiles(d) for d in slide_dirs]
    manifests = [m for m, _ in ingested]
    grids = {m.slide_id: g for m, (_, g) in zip(manifests, ingested)}
    return manifests, grids


def split_slides(labels, holdout: float, seed: int) -> tuple:
    """Stratified train/test split over slide indices."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in sorted(set(labels)):
        idx = np.array([i for i, l in enumerate(labels) if l == cls])
        rng.shuffle(idx)
        n_test = max(1, round(holdout * len(idx)))
        test.extend(idx[:n_test].tolist())
        train.extend(idx[n_test:].tolist())
    return sorted(train), sorted(test)


# ---------------------------------------------------------------------------
# QHVAE training and feature extraction

def build_encoder(config: RunConfig, seed: int = None) -> Qhvae:
    q = config.qhvae
    seed = config.run.seed if seed is None else seed
    return Qhvae(
        QhvaeConfig(levels=q.levels, widths=q.widths,
                    latent_channels=q.latent_channels,
                    input_size=config.sizes.i2, lam=q.lam),
        seed=seed,
    )


def train_qhvae(config: RunConfig, manifests, grids, log=None) -> tuple:
    """Rate-distortion training on random tissue tiles from all slides."""
    q = config.qhvae
    i2 = config.sizes.i2
    model = build_encoder(config)
    pool = [
        (mi, r, c)
        for mi, man in enumerate(manifests)
        for r, c in grids[man.slide_id][i2].tissue_cells()
    ]
    if not pool:
        raise ValueError("no tissue tiles available for training")
    rng = np.random.default_rng(slide_seed(config.run.seed, 7919))
    opt = Adam(model.parameters(), lr=q.lr)
    history = []
    for step in range(1, q.train_steps + 1):
        opt.lr = cosine_lr(q.lr, step, q.train_steps)
        picks = rng.choice(len(pool), size=min(q.batch, len(pool)), replace=False)
        batch = np.stack([load_tile(manifests[mi], r, c) for mi, r, c in
                          (pool[j] for j in picks)])
        m = train_step(model, batch, opt, rng)
        if step % 25 == 0 or step == q.train_steps:
            history.append({"step": step, "loss": m["loss"],
                            "rate_bpp": m["rate_bpp"], "psnr": m["psnr"]})
            if log:
                log(f"qhvae step {step}/{q.train_steps} "
                    f"loss {m['loss']:.1f} bpp {m['rate_bpp']:.3f} psnr {m['psnr']:.2f}")
    return model, history


def _pooled_batch(encoder: Qhvae, tiles: np.ndarray, level: int) -> np.ndarray:
    maps = encoder.extract_batch(tiles, max_levels=level + 1)[level]
    return maps.mean(axis=(2, 3)).astype(np.float32)


def slide_bags(encoder: Qhvae, manifest, grids, scales, level: int = 0) -> dict:
    """Pooled per-tissue-cell features for one slide at each scale.

    Returns {scale: (features (N, C), cells (N, 2))} with cells in the
    scale's own grid coordinates, raster order.
    """
    tile_scale = manifest.tile_size
    out = {}
    for scale in scales:
        grid = grids[scale]
        cells = grid.tissue_cells()
        pieces = []
        for start in range(0, len(cells), _EXTRACT_BATCH):
            chunk = cells[start:start + _EXTRACT_BATCH]
            tiles = []
            for r, c in chunk:
                if scale == tile_scale:
                    tiles.append(load_tile(manifest, r, c))
                elif tile_scale % scale == 0:
                    f = tile_scale // scale
                    parent = load_tile(manifest, r // f, c // f)
                    dr, dc = (r % f) * scale, (c % f) * scale
                    tiles.append(parent[:, dr:dr + scale, dc:dc + scale])
                else:
                    raise ValueError(f"scale {scale} not a divisor of tile "
                                     f"size {tile_scale}")
            pieces.append(_pooled_batch(encoder, np.stack(tiles), level))
        feats = (np.concatenate(pieces) if pieces
                 else np.zeros((0, encoder.config.latent_channels[-1]), np.float32))
        out[scale] = (feats, np.array(cells, dtype=np.int64).reshape(-1, 2))
    return out


def extract_all_bags(encoder, manifests, grids, scales, out_dir=None,
                     jobs: int = 1, level: int = 0) -> dict:
    """Per-slide pooled feature bags, optionally cached to .npz files."""
    def one(man):
        return slide_bags(encoder, man, grids[man.slide_id], scales, level)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, manifests))
    else:
        results = [one(m) for m in manifests]
    bags = {m.slide_id: r for m, r in zip(manifests, results)}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for sid, per_scale in bags.items():
            payload = {}
            for scale, (feats, cells) in per_scale.items():
                payload[f"s{scale}_feats"] = feats
                payload[f"s{scale}_cells"] = cells
            np.savez(out_dir / f"{sid}.npz", **payload)
    return bags


def load_all_bags(out_dir) -> dict:
    bags = {}
    for path in sorted(Path(out_dir).glob("slide_*.npz")):
        with np.load(path) as blob:
            scales = sorted({int(k.split("_")[0][1:]) for k in blob.files})
            bags[path.stem] = {
                s: (blob[f"s{s}_feats"], blob[f"s{s}_cells"]) for s in scales
            }
    return bags


# ---------------------------------------------------------------------------
# scorers and cascade

def train_scorers(config: RunConfig, bags, labels_by_slide, train_ids=None) -> dict:
    """One gated-attention scorer per scale, trained on per-slide bags."""
    sc = config.scorers
    scales = (config.sizes.i2, config.sizes.i2 // 2)
    slide_ids = sorted(bags)
    if train_ids is None:
        train_ids = slide_ids
    scorers = {}
    for n, scale in enumerate(scales):
        train_bags = [bags[sid][scale][0] for sid in train_ids]
        train_labels = [labels_by_slide[sid] for sid in train_ids]
        scorers[scale] = train_mil_scorer(
            train_bags, train_labels, scale, hidden=sc.hidden,
            epochs=sc.epochs, lr=sc.lr,
            seed=slide_seed(config.run.seed, 104729 + n),
        )
    return scorers


@dataclass(frozen=True)
class CascadeResult:
    slide_id: str
    fused: AttentionMap
    survivors: list
    representatives: list
    p2: float


def cascade_slide(config: RunConfig, encoder: Qhvae, scorers: dict, manifest,
                  grids, bags, slide_index: int = 0) -> CascadeResult:
    """Two-stage selection for one slide.

    Stage 1 fuses the per-scale attention maps on the common grid and
    keeps the top p1 percent of tissue cells; stage 2 clusters the
    survivors' flattened latent maps and draws a balanced sample.
    """
    i2 = config.sizes.i2
    maps = []
    for scale in sorted(scorers, reverse=True):
        feats, cells = bags[scale]
        grid = grids[scale]
        if len(feats) == 0:
            raise ValueError(f"{manifest.slide_id}: no tissue cells at scale {scale}")
        scores = gated_attention_scores(scorers[scale], feats)
        amap = scores_to_map(scores, [tuple(rc) for rc in cells],
                             (grid.rows, grid.cols), scale)
        maps.append(normalize_to_common_grid(amap, i2))
    fused = fuse_scores(maps, config.scorers.weights[:len(maps)])
    tissue = grids[i2].tissue
    chosen = select_top_p(fused, config.cascade.p1, mask=tissue)
    survivors = [(r, c, float(fused.grid[r, c])) for r, c in chosen]

    tiles = np.stack([load_tile(manifest, r, c) for r, c, _ in survivors])
    level = config.cascade.feature_level
    feats2 = encoder.extract_batch(tiles, max_levels=level + 1)[level]
    feats2 = feats2.reshape(len(survivors), -1)
    k = min(config.cascade.k, len(survivors))
    model = kmeans(feats2, k, seed=slide_seed(config.run.seed, 1299709 + slide_index))
    m_min = min_cluster_size(model)
    ids = balanced_sample(model, m_min,
                          seed=slide_seed(config.run.seed, 15485863 + slide_index))
    reps = [(survivors[i][0], survivors[i][1], survivors[i][2],
             int(model.assignments[i])) for i in ids]
    reps.sort(key=lambda t: (-t[2], t[0], t[1]))
    if config.cascade.cap and len(reps) > config.cascade.cap:
        reps = reps[:config.cascade.cap]
    return CascadeResult(
        slide_id=manifest.slide_id,
        fused=fused,
        survivors=survivors,
        representatives=reps,
        p2=len(reps) / len(survivors),
    )


def write_cascade_outputs(result: CascadeResult, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sid = result.slide_id
    write_records(out_dir / f"{sid}_survivors.txt", [
        {"slide": sid, "row": r, "col": c, "scale": result.fused.scale, "score": s}
        for r, c, s in result.survivors
    ])
    write_records(out_dir / f"{sid}_representatives.txt", [
        {"slide": sid, "row": r, "col": c, "scale": result.fused.scale,
         "score": s, "cluster": cl}
        for r, c, s, cl in result.representatives
    ])
    np.save(out_dir / f"{sid}_scores.npy", result.fused.grid)


def read_representatives(out_dir, slide_id: str) -> list:
    rows = read_records(Path(out_dir) / f"{slide_id}_representatives.txt")
    return [(int(r["row"]), int(r["col"]), float(r["score"]), int(r["cluster"]))
            for r in rows]


# ---------------------------------------------------------------------------
# compression of selected tiles

def compress_selected(encoder: Qhvae, manifest, cells, out_dir) -> list:
    """Compress the given tiles to raw bitstream files; report metrics."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for r, c in cells:
        tile = load_tile(manifest, r, c)
        res = encoder.compress(tile)
        name = f"r{r:02d}_c{c:02d}.bin"
        (out_dir / name).write_bytes(res.bitstream)
        n_px = tile.shape[-2] * tile.shape[-1]
        rows.append({
            "slide": manifest.slide_id, "row": r, "col": c,
            "bytes": len(res.bitstream),
            "bpp": res.payload_bits / n_px,
            "psnr": psnr(res.recon[0], tile),
            "ssim": ssim(res.recon[0], tile),
        })
    return rows


def decompress_dir(encoder: Qhvae, comp_dir, recon_dir=None) -> list:
    """Decode every bitstream in a directory; optionally write PNG recons."""
    from PIL import Image

    comp_dir = Path(comp_dir)
    results = []
    for path in sorted(comp_dir.glob("r*_c*.bin")):
        recon, _ = encoder.decompress(path.read_bytes())
        if recon_dir is not None:
            Path(recon_dir).mkdir(parents=True, exist_ok=True)
            img = np.round(np.clip(recon[0], 0, 1) * 255).astype(np.uint8)
            Image.fromarray(img.transpose(1, 2, 0)).save(
                Path(recon_dir) / (path.stem + ".png"))
        results.append((path.stem, recon))
    return results


# ---------------------------------------------------------------------------
# reconstruction network over selected blocks

def selected_blocks(manifest, representatives) -> list:
    """Map selected cells to deduplicated 2x2-cell block anchors."""
    blocks, seen = [], set()
    for r, c, _, _ in representatives:
        anchor = (min(r, manifest.rows - 2), min(c, manifest.cols - 2))
        if anchor not in seen:
            seen.add(anchor)
            blocks.append(anchor)
    return blocks


def build_l2g(config: RunConfig, encoder: Qhvae, seed: int = None) -> L2gNet:
    g = config.l2g
    seed = config.run.seed if seed is None else seed
    return L2gNet(
        L2gConfig(patch_size=config.sizes.i3, embed_dim=g.embed_dim,
                  window=g.window, heads=g.heads, blocks_per_stage=g.blocks,
                  decoder_widths=g.decoder_widths,
                  local_channels=config.qhvae.latent_channels[-1]),
        encoder, seed=seed,
    )


def train_l2g(config: RunConfig, encoder: Qhvae, manifests_by_id,
              blocks_by_slide, log=None) -> tuple:
    """Train the reconstruction network over all selected blocks."""
    g = config.l2g
    model = build_l2g(config, encoder)
    entries = [(sid, r, c) for sid in sorted(blocks_by_slide)
               for r, c in blocks_by_slide[sid]]
    if not entries:
        raise ValueError("no selected blocks to train on")
    patches, caches = [], []
    for sid, r, c in entries:
        patch = load_patch(manifests_by_id[sid], r, c, cells=2)[None]
        patches.append(patch)
        _, tiles = make_views(Tensor(patch))
        caches.append([model.encode_local(t) for t in tiles])
    rng = np.random.default_rng(slide_seed(config.run.seed, 32452843))
    opt = Adam(model.parameters(), lr=g.lr)
    history = []
    order = np.arange(len(entries))
    for step in range(1, g.train_steps + 1):
        if (step - 1) % len(entries) == 0:
            rng.shuffle(order)
        pick = order[(step - 1) % len(entries)]
        opt.lr = cosine_lr(g.lr, step, g.train_steps)
        m = train_l2g_step(model, patches[pick], opt, local_cache=caches[pick])
        if step % 25 == 0 or step == g.train_steps:
            history.append({"step": step, "loss": m["loss"],
                            "psnr_full": m["psnr_full"]})
            if log:
                log(f"l2g step {step}/{g.train_steps} "
                    f"loss {m['loss']:.4f} psnr {m['psnr_full']:.2f}")
    return model, history


def block_feature(model: L2gNet, patch) -> np.ndarray:
    """Fused slide-level feature of one block, no decoder work."""
    with no_grad():
        x = patch if isinstance(patch, Tensor) else Tensor(patch)
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        distant, tiles = make_views(x)
        z_locals = [model.encode_local(t) for t in tiles]
        z_fused = model.fuse(model.encode_global(distant), z_locals)
        return model.slide_feature(z_fused)


def emit_features(model: L2gNet, manifests_by_id, blocks_by_slide) -> list:
    rows = []
    for sid in sorted(blocks_by_slide):
        for r, c in blocks_by_slide[sid]:
            patch = load_patch(manifests_by_id[sid], r, c, cells=2)
            vec = block_feature(model, patch)
            rows.append({
                "slide": sid, "patch": f"r{r:02d}_c{c:02d}",
                "feature": ",".join(f"{v:.8g}" for v in vec),
            })
    return rows


def read_feature_bags(rows) -> dict:
    """Group emitted feature records into per-slide bags."""
    bags = {}
    for row in rows:
        vec = np.array([float(v) for v in row["feature"].split(",")],
                       dtype=np.float32)
        bags.setdefault(row["slide"], []).append(vec)
    return {sid: np.stack(vecs) for sid, vecs in bags.items()}


# ---------------------------------------------------------------------------
# slide-level aggregation

class MeanPoolClassifier(Module):
    """Ablation head: logistic regression on the bag-mean feature."""

    def __init__(self, in_dim: int, rng):
        super().__init__()
        self.head = Linear(in_dim, 1, rng)

    def forward(self, feats):
        x = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats))
        pooled = x.mean(axis=0).reshape(1, -1)
        return self.head(pooled).reshape(()), None


def train_aggregator(bags, labels_by_slide, train_ids, config: RunConfig,
                     seed: int, mean_pool: bool = False):
    """Fit the slide-level classifier on training bags."""
    a = config.aggregate
    train_bags = [bags[sid] for sid in train_ids]
    train_labels = [labels_by_slide[sid] for sid in train_ids]
    if not mean_pool:
        return train_mil_scorer(train_bags, train_labels, scale=config.sizes.i3,
                                hidden=a.hidden, epochs=a.epochs, lr=a.lr,
                                seed=seed)
    if len(set(train_labels)) < 2:
        raise ValueError("aggregator training needs both classes")
    rng = np.random.default_rng(seed)
    model = MeanPoolClassifier(train_bags[0].shape[1], rng)
    opt = Adam(model.parameters(), lr=a.lr)
    order = np.arange(len(train_bags))
    for _ in range(a.epochs):
        rng.shuffle(order)
        for i in order:
            logit, _ = model.forward(train_bags[i])
            loss = logit.softplus() - logit * float(train_labels[i])
            model.zero_grad()
            loss.backward()
            opt.step()
    return model


def evaluate_aggregator(model, bags, labels_by_slide, test_ids) -> dict:
    from .metrics import accuracy, auc

    logits, labels = [], []
    for sid in test_ids:
        logit, _ = model.forward(bags[sid])
        logits.append(float(logit.data))
        labels.append(labels_by_slide[sid])
    preds = [int(l > 0) for l in logits]
    out = {"acc": accuracy(labels, preds)}
    if len(set(labels)) == 2:
        out["auc"] = auc(labels, logits)
    return out


__all__ = [
    "CascadeResult", "MeanPoolClassifier", "block_feature", "build_encoder",
    "build_l2g", "cascade_slide", "compress_selected", "cosine_lr",
    "decompress_dir", "emit_features", "evaluate_aggregator",
    "extract_all_bags", "format_record", "load_all_bags", "load_dataset",
    "load_params", "params_digest", "read_feature_bags", "read_records",
    "read_representatives", "save_params", "selected_blocks", "slide_bags",
    "slide_seed", "split_slides", "synth_dataset", "train_aggregator",
    "train_l2g", "train_qhvae", "train_scorers", "write_cascade_outputs",
    "write_records",
]
