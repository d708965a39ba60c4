"""Synthetic slide generation and tile-directory ingestion.

A slide is a grid of lossless PNG tiles plus a manifest text file. The
generator renders procedural tissue (multi-octave value noise driving
stain-like palettes, scattered nuclei dots) over a glass background and
plants a contiguous tumor region with a distinct texture; the planted
cell mask ships with the manifest so selection quality can be scored
against ground truth. Generation is cell-granular: every tile is wholly
glass, normal, stroma, or tumor, which keeps tissue detection and mask
arithmetic exact at the grid level.

Ingestion reads a tile directory back, verifies every declared tile is
present with the declared extent, and builds per-scale patch grids with
a saturation/luminance tissue mask recomputed from pixels.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

TISSUE_SATURATION = 0.07
TISSUE_LUMINANCE = 0.92

# (light, dark) endpoints of each stain-like palette, RGB in [0, 1].
_PALETTES = {
    "normal": ((0.93, 0.79, 0.86), (0.52, 0.30, 0.60)),
    "stroma": ((0.95, 0.83, 0.88), (0.73, 0.52, 0.68)),
    "tumor": ((0.72, 0.55, 0.80), (0.30, 0.15, 0.45)),
}
_NUCLEUS_COLOR = np.array([0.24, 0.13, 0.38])
_GLASS_COLOR = np.array([0.962, 0.955, 0.966])


@dataclass(frozen=True)
class SlideParams:
    """Geometry and content knobs for one synthetic slide."""

    rows: int = 16
    cols: int = 16
    tile_size: int = 128
    tumor_fraction: float = 0.0
    tissue_cover: float = 0.8

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid {self.rows}x{self.cols} must be positive")
        if self.tile_size < 8 or self.tile_size % 2:
            raise ValueError(f"tile_size {self.tile_size} must be even and >= 8")
        if not 0.0 <= self.tumor_fraction <= 1.0:
            raise ValueError(f"tumor_fraction {self.tumor_fraction} outside [0, 1]")
        if not 0.0 < self.tissue_cover <= 1.0:
            raise ValueError(f"tissue_cover {self.tissue_cover} outside (0, 1]")


@dataclass(frozen=True)
class SlideManifest:
    """What a tile directory contains and how to index it."""

    slide_id: str
    tile_dir: Path
    tile_size: int
    rows: int
    cols: int
    levels: tuple
    label: int | None = None
    mask: np.ndarray | None = None

    def tile_path(self, row: int, col: int) -> Path:
        return Path(self.tile_dir) / f"r{row:02d}_c{col:02d}.png"


@dataclass(frozen=True)
class PatchGrid:
    """Per-scale patch index over one slide with its tissue flags."""

    slide_id: str
    scale: int
    rows: int
    cols: int
    tissue: np.ndarray

    def __post_init__(self):
        if self.tissue.shape != (self.rows, self.cols):
            raise ValueError(
                f"tissue mask {self.tissue.shape} != grid {(self.rows, self.cols)}"
            )

    @property
    def n_patches(self) -> int:
        return int(self.tissue.sum())

    def cell_origin(self, row: int, col: int) -> tuple:
        """Top-left pixel of a cell in slide coordinates."""
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise ValueError(f"cell ({row}, {col}) outside {self.rows}x{self.cols}")
        return row * self.scale, col * self.scale

    def tissue_cells(self) -> list:
        rr, cc = np.nonzero(self.tissue)
        return list(zip(rr.tolist(), cc.tolist()))


def multi_octave_noise(rng, height: int, width: int, base: int = 16,
                       octaves: int = 5, persistence: float = 0.55) -> np.ndarray:
    """Sum of bilinearly upsampled random grids, rescaled to [0, 1]."""
    out = np.zeros((height, width))
    amp = 1.0
    cells = base
    for _ in range(octaves):
        grid = rng.random((min(cells, height), min(cells, width)))
        out += amp * ndimage.zoom(
            grid, (height / grid.shape[0], width / grid.shape[1]), order=1
        )
        amp *= persistence
        cells *= 2
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) if hi > lo else np.zeros_like(out)


def _scatter_nuclei(rng, canvas: np.ndarray, allowed: np.ndarray, count: int):
    """Stamp small dark disks at random positions inside an allowed mask."""
    height, width = allowed.shape
    ys = rng.integers(0, height, size=count)
    xs = rng.integers(0, width, size=count)
    radii = rng.integers(2, 5, size=count)
    for y, x, r in zip(ys, xs, radii):
        if not allowed[y, x]:
            continue
        y0, y1 = max(0, y - r), min(height, y + r + 1)
        x0, x1 = max(0, x - r), min(width, x + r + 1)
        dy = np.arange(y0, y1) - y
        dx = np.arange(x0, x1) - x
        disk = (dy[:, None] ** 2 + dx[None, :] ** 2) <= r * r
        region = canvas[:, y0:y1, x0:x1]
        blend = 0.75 * disk[None]
        region[...] = region * (1 - blend) + _NUCLEUS_COLOR[:, None, None] * blend


def render_texture(kind: str, rng, height: int, width: int) -> np.ndarray:
    """Render one texture family standalone, shape (3, height, width)."""
    if kind == "glass":
        wobble = multi_octave_noise(rng, height, width, base=8, octaves=2)
        return np.clip(
            _GLASS_COLOR[:, None, None] + 0.012 * (wobble - 0.5)[None], 0, 1
        ).astype(np.float32)
    if kind not in _PALETTES:
        raise ValueError(f"unknown texture kind {kind!r}")
    t = multi_octave_noise(rng, height, width)
    lo, hi = (np.array(c) for c in _PALETTES[kind])
    canvas = lo[:, None, None] + t[None] * (hi - lo)[:, None, None]
    if kind == "stroma":
        # low-frequency collagen ridges
        yy, xx = np.mgrid[0:height, 0:width]
        theta = rng.uniform(0, np.pi)
        ridge = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / 48.0)
        canvas += 0.05 * ridge[None]
    if kind == "tumor":
        yy, xx = np.mgrid[0:height, 0:width]
        theta = rng.uniform(0, np.pi)
        stripe = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / 9.0)
        canvas += 0.07 * stripe[None]
    density = {"normal": 500, "stroma": 900, "tumor": 260}[kind]
    _scatter_nuclei(rng, canvas, np.ones((height, width), bool),
                    count=height * width // density)
    return np.clip(canvas, 0, 1).astype(np.float32)


def _grow_cell_region(rng, tissue: np.ndarray, count: int) -> np.ndarray:
    """Pick a compact connected set of tissue cells, jumping seeds if needed."""
    region = np.zeros_like(tissue)
    available = tissue.copy()
    while count > 0 and available.any():
        rr, cc = np.nonzero(available)
        pick = rng.integers(len(rr))
        seed = (int(rr[pick]), int(cc[pick]))
        frontier = [seed]
        while frontier and count > 0:
            # nearest-to-seed first keeps the region roughly round
            frontier.sort(key=lambda rc: (rc[0] - seed[0]) ** 2 + (rc[1] - seed[1]) ** 2)
            r, c = frontier.pop(0)
            if not available[r, c]:
                continue
            region[r, c] = True
            available[r, c] = False
            count -= 1
            for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if 0 <= nr < tissue.shape[0] and 0 <= nc < tissue.shape[1]:
                    if available[nr, nc] and (nr, nc) not in frontier:
                        frontier.append((nr, nc))
    return region


def render_slide(seed: int, params: SlideParams) -> tuple:
    """Render the full slide canvas.

    Returns (canvas uint8 (H, W, 3), cell kind codes (rows, cols), tumor
    cell mask). Kind codes: 0 glass, 1 normal, 2 stroma, 3 tumor.
    """
    rng = np.random.default_rng(seed)
    rows, cols, tile = params.rows, params.cols, params.tile_size
    height, width = rows * tile, cols * tile

    cover_field = multi_octave_noise(rng, rows, cols, base=4, octaves=2)
    threshold = np.quantile(cover_field, 1.0 - params.tissue_cover)
    tissue = cover_field >= threshold
    if not tissue.any():
        tissue[rows // 2, cols // 2] = True

    n_tissue = int(tissue.sum())
    n_tumor = 0
    if params.tumor_fraction > 0:
        n_tumor = max(1, round(params.tumor_fraction * n_tissue))
    tumor = _grow_cell_region(rng, tissue, n_tumor)

    split_field = multi_octave_noise(rng, rows, cols, base=4, octaves=2)
    stroma = tissue & ~tumor & (split_field > np.quantile(split_field, 0.68))

    kinds = np.zeros((rows, cols), dtype=np.uint8)
    kinds[tissue] = 1
    kinds[stroma] = 2
    kinds[tumor] = 3

    ones = np.ones((tile, tile), bool)
    masks = {k: np.kron(kinds == k, ones) for k in range(4)}

    t = multi_octave_noise(rng, height, width)
    wobble = multi_octave_noise(rng, height, width, base=8, octaves=2)
    canvas = np.empty((3, height, width))
    canvas[:] = _GLASS_COLOR[:, None, None] + 0.012 * (wobble - 0.5)[None]

    yy, xx = np.mgrid[0:height, 0:width]
    for code, kind in ((1, "normal"), (2, "stroma"), (3, "tumor")):
        sel = masks[code]
        if not sel.any():
            continue
        lo, hi = (np.array(c) for c in _PALETTES[kind])
        for ch in range(3):
            canvas[ch][sel] = lo[ch] + t[sel] * (hi[ch] - lo[ch])
        theta = rng.uniform(0, np.pi)
        if kind == "stroma":
            ridge = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / 48.0)
            canvas[:, sel] += 0.05 * ridge[sel]
        elif kind == "tumor":
            stripe = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / 9.0)
            canvas[:, sel] += 0.07 * stripe[sel]

    area = height * width
    _scatter_nuclei(rng, canvas, masks[1] | masks[2], count=area // 550)
    _scatter_nuclei(rng, canvas, masks[3], count=area // 260)

    canvas8 = np.round(np.clip(canvas, 0, 1) * 255).astype(np.uint8)
    return canvas8.transpose(1, 2, 0), kinds, tumor


def write_manifest(manifest: SlideManifest):
    lines = [
        f"slide_id={manifest.slide_id}",
        f"tile_size={manifest.tile_size}",
        f"rows={manifest.rows}",
        f"cols={manifest.cols}",
        "levels=" + ",".join(f"{s}:{r}x{c}" for s, r, c in manifest.levels),
    ]
    if manifest.label is not None:
        lines.append(f"label={manifest.label}")
    if manifest.mask is not None:
        lines.append("mask_file=mask.png")
        mask8 = (manifest.mask.astype(np.uint8)) * 255
        Image.fromarray(mask8, mode="L").save(Path(manifest.tile_dir) / "mask.png")
    path = Path(manifest.tile_dir) / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")


_LEVEL_RE = re.compile(r"^(\d+):(\d+)x(\d+)$")
_MANIFEST_KEYS = {"slide_id", "tile_size", "rows", "cols", "levels", "label", "mask_file"}


def read_manifest(tile_dir) -> SlideManifest:
    tile_dir = Path(tile_dir)
    path = tile_dir / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.txt in {tile_dir}")
    fields = {}
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{ln}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        if key not in _MANIFEST_KEYS:
            raise ValueError(f"{path}:{ln}: unknown key {key!r}")
        if key in fields:
            raise ValueError(f"{path}:{ln}: duplicate key {key!r}")
        fields[key] = value
    for key in ("slide_id", "tile_size", "rows", "cols", "levels"):
        if key not in fields:
            raise ValueError(f"{path}: missing required key {key!r}")
    levels = []
    for part in fields["levels"].split(","):
        m = _LEVEL_RE.match(part.strip())
        if m is None:
            raise ValueError(f"{path}: bad level entry {part!r}")
        levels.append(tuple(int(g) for g in m.groups()))
    mask = None
    if "mask_file" in fields:
        mask_path = tile_dir / fields["mask_file"]
        if not mask_path.exists():
            raise FileNotFoundError(f"declared mask file missing: {mask_path}")
        mask = np.asarray(Image.open(mask_path)) > 127
    return SlideManifest(
        slide_id=fields["slide_id"],
        tile_dir=tile_dir,
        tile_size=int(fields["tile_size"]),
        rows=int(fields["rows"]),
        cols=int(fields["cols"]),
        levels=tuple(levels),
        label=int(fields["label"]) if "label" in fields else None,
        mask=mask,
    )


def synth_slide(out_dir, slide_id: str, seed: int, params: SlideParams) -> SlideManifest:
    """Render one slide and write its tiles, mask, and manifest."""
    canvas, kinds, tumor = render_slide(seed, params)
    tile = params.tile_size
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for r in range(params.rows):
        for c in range(params.cols):
            piece = canvas[r * tile:(r + 1) * tile, c * tile:(c + 1) * tile]
            Image.fromarray(piece).save(out_dir / f"r{r:02d}_c{c:02d}.png")
    manifest = SlideManifest(
        slide_id=slide_id,
        tile_dir=out_dir,
        tile_size=tile,
        rows=params.rows,
        cols=params.cols,
        levels=(
            (tile, params.rows, params.cols),
            (tile // 2, params.rows * 2, params.cols * 2),
        ),
        label=int(tumor.any()),
        mask=tumor,
    )
    write_manifest(manifest)
    return manifest


def load_tile(manifest: SlideManifest, row: int, col: int) -> np.ndarray:
    """One tile as float32 (3, tile, tile) in [0, 1]."""
    path = manifest.tile_path(row, col)
    arr = np.asarray(Image.open(path), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def load_patch(manifest: SlideManifest, row: int, col: int, cells: int = 2) -> np.ndarray:
    """A square block of cells stitched into one patch, cell units."""
    if row + cells > manifest.rows or col + cells > manifest.cols:
        raise ValueError(
            f"{cells}x{cells} block at ({row}, {col}) exceeds "
            f"{manifest.rows}x{manifest.cols} grid"
        )
    rows = []
    for r in range(row, row + cells):
        rows.append(np.concatenate(
            [load_tile(manifest, r, c) for c in range(col, col + cells)], axis=2
        ))
    return np.concatenate(rows, axis=1)


def saturation_luminance(pixels: np.ndarray) -> tuple:
    """Mean HSV saturation and mean Rec.601 luminance of (3, h, w) pixels."""
    mx = pixels.max(axis=0)
    mn = pixels.min(axis=0)
    sat = np.where(mx > 0, (mx - mn) / np.maximum(mx, 1e-12), 0.0)
    lum = 0.299 * pixels[0] + 0.587 * pixels[1] + 0.114 * pixels[2]
    return float(sat.mean()), float(lum.mean())


def is_tissue(pixels: np.ndarray) -> bool:
    sat, lum = saturation_luminance(pixels)
    return sat > TISSUE_SATURATION and lum < TISSUE_LUMINANCE


def ingest_tiles(tile_dir, sat_threshold: float = TISSUE_SATURATION,
                 lum_threshold: float = TISSUE_LUMINANCE) -> tuple:
    """Read a tile directory into (manifest, {scale: PatchGrid}).

    Validates that every declared tile exists with the declared extent,
    reporting all offenders at once. Tissue flags are recomputed from
    pixels at the stored scale and at the half scale derived by
    quartering each tile.
    """
    manifest = read_manifest(tile_dir)
    tile = manifest.tile_size
    problems = []
    for r in range(manifest.rows):
        for c in range(manifest.cols):
            path = manifest.tile_path(r, c)
            if not path.exists():
                problems.append(f"missing {path.name}")
                continue
            with Image.open(path) as im:
                if im.size != (tile, tile):
                    problems.append(
                        f"{path.name}: extent {im.size[0]}x{im.size[1]}, "
                        f"declared {tile}x{tile}"
                    )
    if problems:
        raise ValueError(f"{len(problems)} bad tiles: " + "; ".join(problems))

    half = tile // 2
    coarse = np.zeros((manifest.rows, manifest.cols), bool)
    fine = np.zeros((manifest.rows * 2, manifest.cols * 2), bool)
    for r in range(manifest.rows):
        for c in range(manifest.cols):
            pixels = load_tile(manifest, r, c)
            sat, lum = saturation_luminance(pixels)
            coarse[r, c] = sat > sat_threshold and lum < lum_threshold
            for dr in range(2):
                for dc in range(2):
                    sub = pixels[:, dr * half:(dr + 1) * half, dc * half:(dc + 1) * half]
                    s, l = saturation_luminance(sub)
                    fine[r * 2 + dr, c * 2 + dc] = s > sat_threshold and l < lum_threshold
    grids = {
        tile: PatchGrid(manifest.slide_id, tile, manifest.rows, manifest.cols, coarse),
        half: PatchGrid(manifest.slide_id, half, manifest.rows * 2,
                        manifest.cols * 2, fine),
    }
    return manifest, grids


__all__ = [
    "SlideParams", "SlideManifest", "PatchGrid",
    "multi_octave_noise", "render_texture", "render_slide", "synth_slide",
    "write_manifest", "read_manifest", "load_tile", "load_patch",
    "saturation_luminance", "is_tissue", "ingest_tiles",
    "TISSUE_SATURATION", "TISSUE_LUMINANCE",
]
