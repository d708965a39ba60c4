"""Run configuration: a strict plain-text format and its schema.

The file format is `key = value` lines under `[section]` headers, with
`#` comments. Every field of RunConfig is addressable; misspelled or
unknown keys are hard errors rather than silently ignored defaults.
Values are typed by the schema below (int, float, str, or comma lists).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path


def _int_tuple(text: str) -> tuple:
    return tuple(int(p.strip()) for p in text.split(","))


def _float_tuple(text: str) -> tuple:
    return tuple(float(p.strip()) for p in text.split(","))


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out_dir: str = "runs/out"
    jobs: int = 1


@dataclass(frozen=True)
class SlidesSection:
    n_slides: int = 20
    rows: int = 16
    cols: int = 16
    tile_size: int = 128
    tumor_fraction: float = 0.05
    tissue_cover: float = 0.8


@dataclass(frozen=True)
class SizesSection:
    i1: int = 32
    i2: int = 128
    i3: int = 256


@dataclass(frozen=True)
class QhvaeSection:
    levels: int = 3
    widths: tuple = (32, 64, 96)
    latent_channels: tuple = (4, 8, 16)
    lam: float = 2048.0
    train_steps: int = 600
    lr: float = 3e-3
    batch: int = 4


@dataclass(frozen=True)
class ScorersSection:
    hidden: int = 64
    epochs: int = 30
    lr: float = 1e-3
    weights: tuple = (0.5, 0.5)


@dataclass(frozen=True)
class CascadeSection:
    p1: float = 5.0
    k: int = 8
    cap: int = 0
    feature_level: int = 0


@dataclass(frozen=True)
class L2gSection:
    embed_dim: int = 32
    window: int = 8
    heads: int = 2
    blocks: tuple = (2, 2)
    decoder_widths: tuple = (48, 32, 24, 16)
    train_steps: int = 400
    lr: float = 2e-3


@dataclass(frozen=True)
class AggregateSection:
    hidden: int = 48
    epochs: int = 60
    lr: float = 3e-3
    holdout: float = 0.3


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    slides: SlidesSection = field(default_factory=SlidesSection)
    sizes: SizesSection = field(default_factory=SizesSection)
    qhvae: QhvaeSection = field(default_factory=QhvaeSection)
    scorers: ScorersSection = field(default_factory=ScorersSection)
    cascade: CascadeSection = field(default_factory=CascadeSection)
    l2g: L2gSection = field(default_factory=L2gSection)
    aggregate: AggregateSection = field(default_factory=AggregateSection)

    def __post_init__(self):
        s = self.sizes
        if s.i3 != 2 * s.i2 or s.i2 != 4 * s.i1:
            raise ValueError(
                f"patch sizes must honor i3 = 2*i2 and i2 = 4*i1, "
                f"got ({s.i1}, {s.i2}, {s.i3})"
            )
        if not 0.0 < self.cascade.p1 <= 100.0:
            raise ValueError(f"p1 {self.cascade.p1} outside (0, 100]")
        if self.cascade.k < 1:
            raise ValueError(f"k {self.cascade.k} must be >= 1")
        if self.cascade.cap < 0:
            raise ValueError(f"cap {self.cascade.cap} must be >= 0")
        if not 0.0 < self.aggregate.holdout < 1.0:
            raise ValueError(f"holdout {self.aggregate.holdout} outside (0, 1)")
        if self.run.jobs < 1:
            raise ValueError(f"jobs {self.run.jobs} must be >= 1")
        if self.slides.tile_size != self.sizes.i2:
            raise ValueError(
                f"tile_size {self.slides.tile_size} must equal i2 {self.sizes.i2}"
            )


_SECTIONS = {
    "run": RunSection,
    "slides": SlidesSection,
    "sizes": SizesSection,
    "qhvae": QhvaeSection,
    "scorers": ScorersSection,
    "cascade": CascadeSection,
    "l2g": L2gSection,
    "aggregate": AggregateSection,
}

# tuple-typed keys need an explicit element parser
_TUPLE_PARSERS = {
    ("qhvae", "widths"): _int_tuple,
    ("qhvae", "latent_channels"): _int_tuple,
    ("scorers", "weights"): _float_tuple,
    ("l2g", "blocks"): _int_tuple,
    ("l2g", "decoder_widths"): _int_tuple,
}


def _parse_value(section: str, key: str, text: str, kind: type):
    if kind is tuple:
        return _TUPLE_PARSERS[(section, key)](text)
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is str:
        return text
    raise TypeError(f"unsupported config type {kind} for [{section}] {key}")


def parse_config(path) -> RunConfig:
    """Read a config file, applying defaults for everything unset."""
    path = Path(path)
    values = {name: {} for name in _SECTIONS}
    section = None
    for ln, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ValueError(f"{path}:{ln}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{ln}: expected key = value, got {raw!r}")
        if section is None:
            raise ValueError(f"{path}:{ln}: key before any [section] header")
        key, text = (part.strip() for part in line.split("=", 1))
        cls = _SECTIONS[section]
        schema = {f.name: f.type for f in fields(cls)}
        if key not in schema:
            raise ValueError(f"{path}:{ln}: unknown key {key!r} in [{section}]")
        if key in values[section]:
            raise ValueError(f"{path}:{ln}: duplicate key {key!r} in [{section}]")
        kind = type(getattr(cls(), key))
        try:
            values[section][key] = _parse_value(section, key, text, kind)
        except ValueError as exc:
            raise ValueError(f"{path}:{ln}: bad value for {key!r}: {exc}") from exc
    parts = {name: _SECTIONS[name](**values[name]) for name in _SECTIONS}
    return RunConfig(**parts)


def default_config() -> RunConfig:
    return RunConfig()


def override(config: RunConfig, seed=None, out_dir=None, jobs=None) -> RunConfig:
    """Apply command-line overrides on top of a parsed config."""
    run = config.run
    if seed is not None:
        run = replace(run, seed=seed)
    if out_dir is not None:
        run = replace(run, out_dir=str(out_dir))
    if jobs is not None:
        run = replace(run, jobs=jobs)
    return replace(config, run=run)


def dump_config(config: RunConfig) -> str:
    """Render a config back to the file format, every key explicit."""
    lines = []
    for name, cls in _SECTIONS.items():
        lines.append(f"[{name}]")
        part = getattr(config, name)
        for f in fields(cls):
            value = getattr(part, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        lines.append("")
    return "\n".join(lines)


__all__ = [
    "RunConfig", "RunSection", "SlidesSection", "SizesSection", "QhvaeSection",
    "ScorersSection", "CascadeSection", "L2gSection", "AggregateSection",
    "parse_config", "default_config", "override", "dump_config",
]
