"""Command-line front end.

Every subcommand reads and writes inside one run directory so stages
can be chained: synth -> train-qhvae -> train-scorers -> cascade ->
compress/decompress -> train-l2g -> features -> aggregate -> heatmap ->
eval. State between stages lives in files (checkpoints, record files,
bitstreams); there is no hidden in-process state. On failure every
command prints a single machine-readable error line to stderr and
returns a nonzero exit code.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .config import default_config, dump_config, override, parse_config
from .heatmap import emit_heatmap, score_image
from .metrics import iou, psnr, ssim
from .mil import AttentionMap, GatedAttentionMil, select_top_p
from .slides import load_tile


def _resolve(args):
    config = parse_config(args.config) if args.config else default_config()
    return override(config, seed=args.seed, out_dir=args.out, jobs=args.jobs)


def _out(config) -> Path:
    out = Path(config.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_encoder(config, out: Path):
    path = out / "checkpoints" / "qhvae.npz"
    if not path.exists():
        raise FileNotFoundError(f"no QHVAE checkpoint at {path}; run train-qhvae first")
    encoder = pl.build_encoder(config)
    pl.load_params(encoder, path)
    return encoder


def _load_scorers(config, out: Path) -> dict:
    scorers = {}
    for scale in (config.sizes.i2, config.sizes.i2 // 2):
        path = out / "checkpoints" / f"scorer_{scale}.npz"
        if not path.exists():
            raise FileNotFoundError(f"no scorer checkpoint at {path}; "
                                    "run train-scorers first")
        with np.load(path) as blob:
            in_dim = int(blob["m/in_dim"])
            hidden = int(blob["m/hidden"])
        scorer = GatedAttentionMil(in_dim, hidden, np.random.default_rng(0))
        pl.load_params(scorer, path)
        scorer.scale = scale
        scorers[scale] = scorer
    return scorers


def _dataset(config, out: Path):
    manifests, grids = pl.load_dataset(out, jobs=config.run.jobs)
    labels = {m.slide_id: m.label for m in manifests}
    return manifests, grids, labels


def _bags(config, encoder, manifests, grids, out: Path) -> dict:
    features_dir = out / "features"
    expected = {m.slide_id for m in manifests}
    if features_dir.exists():
        cached = pl.load_all_bags(features_dir)
        if set(cached) == expected:
            return cached
    scales = (config.sizes.i2, config.sizes.i2 // 2)
    return pl.extract_all_bags(encoder, manifests, grids, scales,
                               out_dir=features_dir, jobs=config.run.jobs)


def cmd_synth(config, args) -> int:
    out = _out(config)
    manifests = pl.synth_dataset(config, out)
    (out / "config.txt").write_text(dump_config(config))
    positives = sum(m.label for m in manifests)
    print(f"wrote {len(manifests)} slides ({positives} positive) under {out / 'slides'}")
    return 0


def cmd_ingest(config, args) -> int:
    out = _out(config)
    manifests, grids, _ = _dataset(config, out)
    rows = []
    for man in manifests:
        per_scale = grids[man.slide_id]
        row = {"slide": man.slide_id, "rows": man.rows, "cols": man.cols,
               "label": "-" if man.label is None else man.label}
        for scale in sorted(per_scale, reverse=True):
            row[f"tissue_{scale}"] = per_scale[scale].n_patches
        rows.append(row)
    pl.write_records(out / "ingest.txt", rows)
    print(f"ingested {len(manifests)} slides; report in {out / 'ingest.txt'}")
    return 0


def cmd_train_qhvae(config, args) -> int:
    out = _out(config)
    manifests, grids, _ = _dataset(config, out)
    model, history = pl.train_qhvae(config, manifests, grids, log=print)
    pl.save_params(model, out / "checkpoints" / "qhvae.npz",
                   extra={"digest_seed": config.run.seed})
    pl.write_records(out / "records" / "qhvae_history.txt", history)
    print(f"checkpoint {out / 'checkpoints' / 'qhvae.npz'} "
          f"digest {pl.params_digest(model)[:16]}")
    return 0


def cmd_train_scorers(config, args) -> int:
    out = _out(config)
    manifests, grids, labels = _dataset(config, out)
    encoder = _load_encoder(config, out)
    bags = _bags(config, encoder, manifests, grids, out)
    label_list = [m.label for m in manifests]
    if any(l is None for l in label_list):
        raise ValueError("scorer training needs labeled slides")
    train_idx, _ = pl.split_slides(label_list, config.aggregate.holdout,
                                   pl.slide_seed(config.run.seed, 2))
    train_ids = [manifests[i].slide_id for i in train_idx]
    scorers = pl.train_scorers(config, bags, labels, train_ids)
    for scale, scorer in scorers.items():
        pl.save_params(scorer, out / "checkpoints" / f"scorer_{scale}.npz",
                       extra={"in_dim": scorer.v1.data.shape[0],
                              "hidden": scorer.v1.data.shape[1]})
    print(f"trained scorers at scales {sorted(scorers, reverse=True)} "
          f"on {len(train_ids)} slides")
    return 0


def cmd_cascade(config, args) -> int:
    out = _out(config)
    manifests, grids, _ = _dataset(config, out)
    encoder = _load_encoder(config, out)
    scorers = _load_scorers(config, out)
    bags = _bags(config, encoder, manifests, grids, out)
    counts = []
    for i, man in enumerate(manifests):
        result = pl.cascade_slide(config, encoder, scorers, man,
                                  grids[man.slide_id], bags[man.slide_id], i)
        pl.write_cascade_outputs(result, out / "cascade")
        score_image(result.fused, out / "cascade" / f"{man.slide_id}_scores.png")
        counts.append({"slide": man.slide_id,
                       "survivors": len(result.survivors),
                       "representatives": len(result.representatives),
                       "p2": result.p2})
        print(f"{man.slide_id}: {len(result.survivors)} survivors -> "
              f"{len(result.representatives)} representatives (p2 {result.p2:.3f})")
    pl.write_records(out / "cascade" / "counts.txt", counts)
    mean_reps = float(np.mean([c["representatives"] for c in counts]))
    print(f"mean representatives per slide: {mean_reps:.2f}")
    return 0


def _selected_cells(out: Path, slide_id: str):
    path = out / "cascade" / f"{slide_id}_representatives.txt"
    if not path.exists():
        raise FileNotFoundError(f"no cascade output for {slide_id}; run cascade first")
    return [(r, c) for r, c, _, _ in pl.read_representatives(out / "cascade", slide_id)]


def _slide_filter(manifests, name):
    if not name:
        return manifests
    chosen = [m for m in manifests if m.slide_id == name]
    if not chosen:
        raise ValueError(f"slide {name!r} not found")
    return chosen


def cmd_compress(config, args) -> int:
    out = _out(config)
    manifests, _, _ = _dataset(config, out)
    encoder = _load_encoder(config, out)
    rows = []
    for man in _slide_filter(manifests, args.slide):
        cells = _selected_cells(out, man.slide_id)
        rows.extend(pl.compress_selected(encoder, man, cells,
                                         out / "compressed" / man.slide_id))
    pl.write_records(out / "records" / "compression.txt", rows)
    bpp = float(np.mean([r["bpp"] for r in rows]))
    print(f"compressed {len(rows)} tiles, mean {bpp:.3f} bpp")
    return 0


def cmd_decompress(config, args) -> int:
    out = _out(config)
    manifests, _, _ = _dataset(config, out)
    encoder = _load_encoder(config, out)
    rows = []
    for man in _slide_filter(manifests, args.slide):
        comp_dir = out / "compressed" / man.slide_id
        if not comp_dir.exists():
            raise FileNotFoundError(f"no bitstreams under {comp_dir}; "
                                    "run compress first")
        recons = pl.decompress_dir(encoder, comp_dir, out / "recon" / man.slide_id)
        for stem, recon in recons:
            r, c = int(stem[1:3]), int(stem[5:7])
            tile = load_tile(man, r, c)
            rows.append({"slide": man.slide_id, "row": r, "col": c,
                         "psnr": psnr(recon[0], tile), "ssim": ssim(recon[0], tile)})
    pl.write_records(out / "records" / "reconstruction.txt", rows)
    vals = [r["psnr"] for r in rows if np.isfinite(r["psnr"])]
    mean_psnr = float(np.mean(vals)) if vals else float("inf")
    print(f"decoded {len(rows)} tiles, mean psnr {mean_psnr:.2f}")
    return 0


def _blocks_by_slide(out: Path, manifests) -> dict:
    blocks = {}
    for man in manifests:
        reps = pl.read_representatives(out / "cascade", man.slide_id)
        blocks[man.slide_id] = pl.selected_blocks(man, reps)
    return blocks


def cmd_train_l2g(config, args) -> int:
    out = _out(config)
    manifests, _, _ = _dataset(config, out)
    encoder = _load_encoder(config, out)
    blocks = _blocks_by_slide(out, manifests)
    mans_by_id = {m.slide_id: m for m in manifests}
    model, history = pl.train_l2g(config, encoder, mans_by_id, blocks, log=print)
    pl.save_params(model, out / "checkpoints" / "l2g.npz",
                   extra={"encoder_digest_prefix": 0})
    pl.write_records(out / "records" / "l2g_history.txt", history)
    print(f"checkpoint {out / 'checkpoints' / 'l2g.npz'}")
    return 0


def cmd_features(config, args) -> int:
    out = _out(config)
    manifests, _, _ = _dataset(config, out)
    encoder = _load_encoder(config, out)
    model = pl.build_l2g(config, encoder)
    path = out / "checkpoints" / "l2g.npz"
    if not path.exists():
        raise FileNotFoundError(f"no L2G checkpoint at {path}; run train-l2g first")
    pl.load_params(model, path)
    blocks = _blocks_by_slide(out, manifests)
    mans_by_id = {m.slide_id: m for m in manifests}
    rows = pl.emit_features(model, mans_by_id, blocks)
    pl.write_records(out / "l2g_features.txt", rows)
    print(f"wrote {len(rows)} feature records to {out / 'l2g_features.txt'}")
    return 0


def cmd_aggregate(config, args) -> int:
    out = _out(config)
    manifests, _, labels = _dataset(config, out)
    path = out / "l2g_features.txt"
    if not path.exists():
        raise FileNotFoundError(f"no features at {path}; run features first")
    bags = pl.read_feature_bags(pl.read_records(path))
    label_list = [m.label for m in manifests]
    train_idx, test_idx = pl.split_slides(label_list, config.aggregate.holdout,
                                          pl.slide_seed(config.run.seed, 2))
    train_ids = [manifests[i].slide_id for i in train_idx]
    test_ids = [manifests[i].slide_id for i in test_idx]
    model = pl.train_aggregator(bags, labels, train_ids, config,
                                seed=pl.slide_seed(config.run.seed, 3),
                                mean_pool=args.mean_pool)
    result = pl.evaluate_aggregator(model, bags, labels, test_ids)
    kind = "meanpool" if args.mean_pool else "attention"
    rows = [{"pooling": kind, "split": "test", "n": len(test_ids), **result}]
    pl.write_records(out / "records" / f"aggregate_{kind}.txt", rows)
    print(f"{kind} pooling: " + " ".join(f"{k}={v:.4g}" for k, v in result.items()))
    return 0


def cmd_heatmap(config, args) -> int:
    out = _out(config)
    manifests, grids, _ = _dataset(config, out)
    top_ps = tuple(float(p) for p in args.top_ps.split(","))
    heat_dir = out / "heatmaps"
    heat_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for man in _slide_filter(manifests, args.slide):
        score_path = out / "cascade" / f"{man.slide_id}_scores.npy"
        if not score_path.exists():
            raise FileNotFoundError(f"no scores for {man.slide_id}; run cascade first")
        amap = AttentionMap(scale=config.sizes.i2, grid=np.load(score_path))
        tissue = grids[man.slide_id][config.sizes.i2].tissue
        stats = emit_heatmap(amap, tissue, heat_dir / f"{man.slide_id}.png",
                             top_ps=top_ps, mask=man.mask, slide_id=man.slide_id)
        rows.append({"slide": man.slide_id, **{k: v for k, v in sorted(stats.items())}})
    if rows:
        pl.write_records(out / "records" / "heatmap_iou.txt", rows)
    print(f"wrote {len(rows)} heatmaps under {heat_dir}")
    return 0


def _eval_figures(out: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    report = out / "report"
    report.mkdir(parents=True, exist_ok=True)
    written = []

    hist_path = out / "records" / "qhvae_history.txt"
    if hist_path.exists():
        rows = pl.read_records(hist_path)
        steps = [int(r["step"]) for r in rows]
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
        axes[0].plot(steps, [float(r["psnr"]) for r in rows])
        axes[0].set_xlabel("step"); axes[0].set_ylabel("train PSNR (dB)")
        axes[1].plot(steps, [float(r["rate_bpp"]) for r in rows], color="#b5472a")
        axes[1].set_xlabel("step"); axes[1].set_ylabel("rate (bpp)")
        fig.suptitle("QHVAE training")
        fig.tight_layout()
        fig.savefig(report / "qhvae_training.png", dpi=110)
        plt.close(fig)
        written.append("qhvae_training.png")

    comp_path = out / "records" / "compression.txt"
    if comp_path.exists():
        rows = pl.read_records(comp_path)
        bpps = [float(r["bpp"]) for r in rows]
        psnrs = [float(r["psnr"]) for r in rows]
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.scatter(bpps, psnrs, s=14, alpha=0.7)
        ax.set_xlabel("rate (bpp)"); ax.set_ylabel("PSNR (dB)")
        ax.set_title("Compressed tiles")
        fig.tight_layout()
        fig.savefig(report / "rate_distortion.png", dpi=110)
        plt.close(fig)
        written.append("rate_distortion.png")

    counts_path = out / "cascade" / "counts.txt"
    if counts_path.exists():
        rows = pl.read_records(counts_path)
        names = [r["slide"][-4:] for r in rows]
        fig, ax = plt.subplots(figsize=(max(5, 0.4 * len(rows)), 3.5))
        ax.bar(names, [int(r["survivors"]) for r in rows], label="survivors")
        ax.bar(names, [int(r["representatives"]) for r in rows],
               label="representatives")
        ax.set_ylabel("patches"); ax.legend(); ax.set_title("Cascade selection")
        plt.setp(ax.get_xticklabels(), rotation=60, fontsize=7)
        fig.tight_layout()
        fig.savefig(report / "cascade_counts.png", dpi=110)
        plt.close(fig)
        written.append("cascade_counts.png")
    return written


def cmd_eval(config, args) -> int:
    out = _out(config)
    manifests, grids, _ = _dataset(config, out)
    summary = []

    comp_path = out / "records" / "compression.txt"
    if comp_path.exists():
        rows = pl.read_records(comp_path)
        summary.append({"metric": "compressed_tiles", "value": len(rows)})
        summary.append({"metric": "mean_bpp",
                        "value": float(np.mean([float(r["bpp"]) for r in rows]))})
        finite = [float(r["psnr"]) for r in rows if np.isfinite(float(r["psnr"]))]
        if finite:
            summary.append({"metric": "mean_psnr", "value": float(np.mean(finite))})
        summary.append({"metric": "mean_ssim",
                        "value": float(np.mean([float(r["ssim"]) for r in rows]))})

    counts_path = out / "cascade" / "counts.txt"
    if counts_path.exists():
        rows = pl.read_records(counts_path)
        reps = [int(r["representatives"]) for r in rows]
        summary.append({"metric": "mean_representatives",
                        "value": float(np.mean(reps))})
        # selected-data accounting, both ways, asserting neither as canonical
        i2 = config.sizes.i2
        total_cells = sum(grids[m.slide_id][i2].n_patches for m in manifests)
        total_px = sum(m.rows * m.cols * m.tile_size ** 2 for m in manifests)
        sel_cells = sum(reps)
        summary.append({"metric": "selected_cell_ratio",
                        "value": sel_cells / max(total_cells, 1)})
        summary.append({"metric": "selected_pixel_ratio",
                        "value": sel_cells * i2 * i2 / max(total_px, 1)})

    iou_rows = []
    for man in manifests:
        score_path = out / "cascade" / f"{man.slide_id}_scores.npy"
        if man.mask is None or not man.mask.any() or not score_path.exists():
            continue
        amap = AttentionMap(scale=config.sizes.i2, grid=np.load(score_path))
        tissue = grids[man.slide_id][config.sizes.i2].tissue
        cells = select_top_p(amap, config.cascade.p1, mask=tissue)
        chosen = np.zeros_like(tissue)
        for r, c in cells:
            chosen[r, c] = True
        iou_rows.append({"slide": man.slide_id,
                         "iou_top_p1": iou(chosen, man.mask)})
    if iou_rows:
        pl.write_records(out / "records" / "selection_iou.txt", iou_rows)
        vals = [float(r["iou_top_p1"]) for r in iou_rows]
        summary.append({"metric": "mean_selection_iou", "value": float(np.mean(vals))})
        summary.append({"metric": "selection_iou_ge_05",
                        "value": float(np.mean([v >= 0.5 for v in vals]))})

    for kind in ("attention", "meanpool"):
        agg_path = out / "records" / f"aggregate_{kind}.txt"
        if agg_path.exists():
            row = pl.read_records(agg_path)[0]
            summary.append({"metric": f"{kind}_acc", "value": float(row["acc"])})
            if "auc" in row:
                summary.append({"metric": f"{kind}_auc", "value": float(row["auc"])})

    pl.write_records(out / "metrics.txt", summary)
    figures = _eval_figures(out)
    for row in summary:
        print(pl.format_record(row))
    print(f"metrics in {out / 'metrics.txt'}; figures: {', '.join(figures) or 'none'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slidecascade",
        description="Cascaded patch selection, compression, and reconstruction "
                    "over tiled slide images.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="config file (key = value sections)")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--out", help="override [run] out_dir")
        p.add_argument("--jobs", type=int, help="override [run] jobs")
        p.set_defaults(func=func)
        return p

    add("synth", cmd_synth, "generate the synthetic slide dataset")
    add("ingest", cmd_ingest, "validate tiles and report tissue grids")
    add("train-qhvae", cmd_train_qhvae, "train the compression autoencoder")
    add("train-scorers", cmd_train_scorers, "train the attention scorers")
    add("cascade", cmd_cascade, "run two-stage patch selection")
    p = add("compress", cmd_compress, "compress selected tiles to bitstreams")
    p.add_argument("--slide", help="restrict to one slide id")
    p = add("decompress", cmd_decompress, "decode bitstreams and score recons")
    p.add_argument("--slide", help="restrict to one slide id")
    add("train-l2g", cmd_train_l2g, "train the reconstruction network")
    add("features", cmd_features, "emit fused slide-level features")
    p = add("aggregate", cmd_aggregate, "train and evaluate the slide classifier")
    p.add_argument("--mean-pool", action="store_true",
                   help="swap attention pooling for the bag mean")
    p = add("heatmap", cmd_heatmap, "render score heatmaps with top-p overlays")
    p.add_argument("--slide", help="restrict to one slide id")
    p.add_argument("--top-ps", default="1,5,20", help="overlay percentages")
    add("eval", cmd_eval, "consolidate metrics and render report figures")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _resolve(args)
        return args.func(config, args)
    except Exception as exc:  # single machine-readable line, nonzero exit
        message = str(exc).replace("\n", " ")
        print(f"error: command={args.command} type={type(exc).__name__} "
              f'message="{message}"', file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
