"""The run-config text format: parsing, dumping, validation, overrides."""

import pytest

from slidecascade.config import (
    RunConfig,
    SizesSection,
    default_config,
    dump_config,
    override,
    parse_config,
)


def write(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return path


def test_empty_file_is_all_defaults(tmp_path):
    cfg = parse_config(write(tmp_path, ""))
    assert cfg == default_config()


def test_parse_types_and_comments(tmp_path):
    cfg = parse_config(write(tmp_path, """
# full-line comment
[run]
seed = 42        # trailing comment
out_dir = /tmp/somewhere

[qhvae]
widths = 16, 24, 48
lam = 512.0

[scorers]
weights = 0.25,0.75
"""))
    assert cfg.run.seed == 42
    assert cfg.run.out_dir == "/tmp/somewhere"
    assert cfg.qhvae.widths == (16, 24, 48)
    assert cfg.qhvae.lam == 512.0
    assert cfg.scorers.weights == (0.25, 0.75)
    # untouched sections keep defaults
    assert cfg.cascade == default_config().cascade


def test_dump_parse_roundtrip(tmp_path):
    cfg = default_config()
    back = parse_config(write(tmp_path, dump_config(cfg)))
    assert back == cfg


def test_dump_covers_every_key():
    text = dump_config(default_config())
    for section in ("run", "slides", "sizes", "qhvae", "scorers",
                    "cascade", "l2g", "aggregate"):
        assert f"[{section}]" in text
    assert "latent_channels = 4,8,16" in text
    assert "p1 = 5.0" in text


@pytest.mark.parametrize(
    "body, message",
    [
        ("[nope]\n", "1: unknown section"),
        ("[run]\nbanana = 1\n", "2: unknown key"),
        ("seed = 1\n", "1: key before any"),
        ("[run]\nseed\n", "2: expected key = value"),
        ("[run]\nseed = 1\nseed = 2\n", "3: duplicate key"),
        ("[run]\nseed = fast\n", "2: bad value for 'seed'"),
        ("[qhvae]\nwidths = 8,x\n", "2: bad value for 'widths'"),
    ],
)
def test_parse_errors_carry_path_and_line(tmp_path, body, message):
    path = write(tmp_path, body)
    with pytest.raises(ValueError, match=message) as err:
        parse_config(path)
    assert str(path) in str(err.value)


def test_size_ladder_validation():
    with pytest.raises(ValueError, match="i3 = 2"):
        RunConfig(sizes=SizesSection(i1=32, i2=128, i3=512))
    with pytest.raises(ValueError, match="i3 = 2"):
        RunConfig(sizes=SizesSection(i1=16, i2=128, i3=256))


def test_section_value_validation(tmp_path):
    with pytest.raises(ValueError, match="p1"):
        parse_config(write(tmp_path, "[cascade]\np1 = 0\n"))
    with pytest.raises(ValueError, match="k.*>= 1"):
        parse_config(write(tmp_path, "[cascade]\nk = 0\n"))
    with pytest.raises(ValueError, match="cap"):
        parse_config(write(tmp_path, "[cascade]\ncap = -1\n"))
    with pytest.raises(ValueError, match="holdout"):
        parse_config(write(tmp_path, "[aggregate]\nholdout = 1.0\n"))
    with pytest.raises(ValueError, match="jobs"):
        parse_config(write(tmp_path, "[run]\njobs = 0\n"))
    with pytest.raises(ValueError, match="tile_size"):
        parse_config(write(tmp_path, "[slides]\ntile_size = 64\n"))


def test_override_replaces_only_named_fields():
    cfg = default_config()
    out = override(cfg, seed=9, out_dir="/x", jobs=3)
    assert (out.run.seed, out.run.out_dir, out.run.jobs) == (9, "/x", 3)
    assert out.qhvae == cfg.qhvae
    untouched = override(cfg)
    assert untouched == cfg
    partial = override(cfg, seed=1)
    assert partial.run.seed == 1
    assert partial.run.out_dir == cfg.run.out_dir
