"""Synthetic slide rendering, manifests, and tile-directory ingestion."""

import numpy as np
import pytest
from PIL import Image

from slidecascade.slides import (
    PatchGrid,
    SlideManifest,
    SlideParams,
    ingest_tiles,
    is_tissue,
    load_patch,
    load_tile,
    multi_octave_noise,
    read_manifest,
    render_slide,
    render_texture,
    saturation_luminance,
    synth_slide,
    write_manifest,
)

PARAMS = SlideParams(rows=6, cols=7, tile_size=32, tumor_fraction=0.1)


def test_params_validation():
    with pytest.raises(ValueError):
        SlideParams(rows=0)
    with pytest.raises(ValueError):
        SlideParams(tile_size=9)
    with pytest.raises(ValueError):
        SlideParams(tile_size=4)
    with pytest.raises(ValueError):
        SlideParams(tumor_fraction=1.5)
    with pytest.raises(ValueError):
        SlideParams(tissue_cover=0.0)


def test_render_slide_geometry_and_codes():
    canvas, kinds, tumor = render_slide(0, PARAMS)
    assert canvas.shape == (6 * 32, 7 * 32, 3)
    assert canvas.dtype == np.uint8
    assert kinds.shape == (6, 7)
    assert set(np.unique(kinds)).issubset({0, 1, 2, 3})
    # tumor cells carry code 3 exactly
    np.testing.assert_array_equal(tumor, kinds == 3)


def test_tumor_fraction_hits_target():
    params = SlideParams(rows=12, cols=12, tile_size=16, tumor_fraction=0.05)
    _, kinds, tumor = render_slide(1, params)
    n_tissue = int((kinds > 0).sum())
    want = max(1, round(0.05 * n_tissue))
    assert int(tumor.sum()) == want


def test_tumor_region_is_connected():
    from scipy import ndimage

    params = SlideParams(rows=10, cols=10, tile_size=16, tumor_fraction=0.08)
    _, _, tumor = render_slide(2, params)
    _, n_components = ndimage.label(tumor)
    assert n_components == 1


def test_zero_fraction_means_no_tumor():
    _, kinds, tumor = render_slide(3, SlideParams(rows=4, cols=4, tile_size=16))
    assert not tumor.any()
    assert not (kinds == 3).any()


def test_render_determinism():
    a, ka, ta = render_slide(4, PARAMS)
    b, kb, tb = render_slide(4, PARAMS)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(ka, kb)
    np.testing.assert_array_equal(ta, tb)
    c, _, _ = render_slide(5, PARAMS)
    assert not np.array_equal(a, c)


def test_render_texture_kinds():
    rng = np.random.default_rng(0)
    for kind in ("glass", "normal", "stroma", "tumor"):
        tex = render_texture(kind, rng, 48, 40)
        assert tex.shape == (3, 48, 40)
        assert tex.dtype == np.float32
        assert tex.min() >= 0.0 and tex.max() <= 1.0
    with pytest.raises(ValueError):
        render_texture("bone", rng, 16, 16)


def test_texture_families_separate_by_tissue_rule():
    rng = np.random.default_rng(1)
    assert not is_tissue(render_texture("glass", rng, 64, 64))
    for kind in ("normal", "stroma", "tumor"):
        assert is_tissue(render_texture(kind, rng, 64, 64))


def test_multi_octave_noise_range():
    rng = np.random.default_rng(2)
    field = multi_octave_noise(rng, 33, 57)
    assert field.shape == (33, 57)
    assert field.min() == 0.0 and field.max() == 1.0


def test_saturation_luminance_primaries():
    red = np.zeros((3, 4, 4))
    red[0] = 1.0
    sat, lum = saturation_luminance(red)
    assert sat == 1.0
    assert lum == pytest.approx(0.299, abs=1e-12)
    white = np.ones((3, 4, 4))
    sat, lum = saturation_luminance(white)
    assert sat == 0.0
    assert lum == pytest.approx(1.0, abs=1e-12)
    assert saturation_luminance(np.zeros((3, 2, 2))) == (0.0, 0.0)


# ---------------------------------------------------------------------------
# tile round trips


def test_synth_and_load_tile_byte_identity(tmp_path):
    man = synth_slide(tmp_path / "s0", "s0", seed=0, params=PARAMS)
    canvas, _, _ = render_slide(0, PARAMS)
    tile = load_tile(man, 2, 3)
    assert tile.shape == (3, 32, 32)
    piece = canvas[2 * 32:3 * 32, 3 * 32:4 * 32].transpose(2, 0, 1)
    # PNG is lossless: bytes survive exactly
    np.testing.assert_array_equal(np.round(tile * 255).astype(np.uint8), piece)


def test_load_patch_stitches_in_order(tmp_path):
    man = synth_slide(tmp_path / "s1", "s1", seed=1, params=PARAMS)
    patch = load_patch(man, 1, 2, cells=2)
    assert patch.shape == (3, 64, 64)
    np.testing.assert_array_equal(patch[:, :32, :32], load_tile(man, 1, 2))
    np.testing.assert_array_equal(patch[:, 32:, 32:], load_tile(man, 2, 3))
    with pytest.raises(ValueError):
        load_patch(man, 5, 6, cells=2)


def test_manifest_roundtrip(tmp_path):
    man = synth_slide(tmp_path / "s2", "s2", seed=2, params=PARAMS)
    back = read_manifest(tmp_path / "s2")
    assert back.slide_id == "s2"
    assert (back.tile_size, back.rows, back.cols) == (32, 6, 7)
    assert back.levels == ((32, 6, 7), (16, 12, 14))
    assert back.label == 1
    np.testing.assert_array_equal(back.mask, man.mask)


def test_manifest_without_label_or_mask(tmp_path):
    d = tmp_path / "bare"
    d.mkdir()
    man = SlideManifest(slide_id="bare", tile_dir=d, tile_size=16, rows=1,
                        cols=1, levels=((16, 1, 1),))
    write_manifest(man)
    back = read_manifest(d)
    assert back.label is None
    assert back.mask is None


def test_manifest_error_enumeration(tmp_path):
    d = tmp_path / "m"
    d.mkdir()
    path = d / "manifest.txt"

    with pytest.raises(FileNotFoundError):
        read_manifest(d)

    path.write_text("slide_id=x\nnot a pair\n")
    with pytest.raises(ValueError, match="2: expected key=value"):
        read_manifest(d)

    path.write_text("slide_id=x\ncolor=blue\n")
    with pytest.raises(ValueError, match="unknown key"):
        read_manifest(d)

    path.write_text("slide_id=x\nslide_id=y\n")
    with pytest.raises(ValueError, match="duplicate key"):
        read_manifest(d)

    path.write_text("slide_id=x\ntile_size=16\nrows=1\ncols=1\n")
    with pytest.raises(ValueError, match="missing required key"):
        read_manifest(d)

    path.write_text("slide_id=x\ntile_size=16\nrows=1\ncols=1\nlevels=16:1by1\n")
    with pytest.raises(ValueError, match="bad level entry"):
        read_manifest(d)

    path.write_text(
        "slide_id=x\ntile_size=16\nrows=1\ncols=1\nlevels=16:1x1\nmask_file=gone.png\n"
    )
    with pytest.raises(FileNotFoundError, match="declared mask file"):
        read_manifest(d)


# ---------------------------------------------------------------------------
# ingestion


def test_ingest_recovers_generated_masks(tmp_path):
    params = SlideParams(rows=5, cols=5, tile_size=32, tumor_fraction=0.1,
                         tissue_cover=0.6)
    synth_slide(tmp_path / "s3", "s3", seed=3, params=params)
    man, grids = ingest_tiles(tmp_path / "s3")
    assert sorted(grids) == [16, 32]
    coarse = grids[32]
    assert isinstance(coarse, PatchGrid)
    assert (coarse.rows, coarse.cols) == (5, 5)
    # generation is cell-granular, so the pixel rule matches the plan exactly
    _, kinds, _ = render_slide(3, params)
    np.testing.assert_array_equal(coarse.tissue, kinds > 0)
    fine = grids[16]
    assert (fine.rows, fine.cols) == (10, 10)
    np.testing.assert_array_equal(fine.tissue, np.kron(kinds > 0, np.ones((2, 2), bool)))
    assert fine.n_patches == 4 * coarse.n_patches


def test_ingest_reports_all_offenders(tmp_path):
    man = synth_slide(tmp_path / "s4", "s4", seed=4, params=PARAMS)
    man.tile_path(0, 0).unlink()
    man.tile_path(1, 1).unlink()
    small = np.zeros((8, 8, 3), dtype=np.uint8)
    Image.fromarray(small).save(man.tile_path(2, 2))
    with pytest.raises(ValueError) as err:
        ingest_tiles(tmp_path / "s4")
    msg = str(err.value)
    assert msg.startswith("3 bad tiles")
    assert "missing r00_c00.png" in msg
    assert "missing r01_c01.png" in msg
    assert "r02_c02.png: extent 8x8" in msg


def test_all_glass_slide_has_zero_tissue(tmp_path):
    d = tmp_path / "glass"
    d.mkdir()
    rng = np.random.default_rng(5)
    tex = render_texture("glass", rng, 32, 32)
    img = np.round(tex.transpose(1, 2, 0) * 255).astype(np.uint8)
    for r in range(2):
        for c in range(2):
            Image.fromarray(img).save(d / f"r{r:02d}_c{c:02d}.png")
    write_manifest(SlideManifest(slide_id="glass", tile_dir=d, tile_size=32,
                                 rows=2, cols=2, levels=((32, 2, 2),)))
    _, grids = ingest_tiles(d)
    assert grids[32].n_patches == 0
    assert grids[16].n_patches == 0
    assert grids[32].tissue_cells() == []


def test_patch_grid_cell_origin():
    grid = PatchGrid("x", 64, 2, 3, np.ones((2, 3), bool))
    assert grid.cell_origin(1, 2) == (64, 128)
    with pytest.raises(ValueError):
        grid.cell_origin(2, 0)
    with pytest.raises(ValueError):
        PatchGrid("x", 64, 2, 3, np.ones((3, 2), bool))
