"""Flat sectioned experiment configs.

INI syntax with exactly four sections: [model], [train], [data], [output].
Every key is documented in docs/config.md; unknown sections or keys are
hard errors that name the offender and its line. render/parse round-trip
to the same ExperimentConfig.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .train import TrainConfig


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or "file"
    path: str = ""
    split_fraction: float = 0.9
    synthetic_bytes: int = 262144
    seed: int = 0

    def validate(self) -> None:
        if self.source not in ("synthetic", "file"):
            raise ConfigError(f"data source must be synthetic or file, got {self.source!r}")
        if self.source == "file" and not self.path:
            raise ConfigError("data source 'file' needs a path")
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError(f"split_fraction must be in (0, 1), got {self.split_fraction}")
        if self.synthetic_bytes < 1:
            raise ConfigError("synthetic_bytes must be >= 1")


@dataclass
class OutputConfig:
    out_dir: str = "runs/exp"


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.data.validate()


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "output": OutputConfig,
}


def _find_line(text: str, section: str, key: str | None) -> int:
    """Best-effort line number of a section header or of a key inside it."""
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            if key is None and line[1:-1].strip() == section:
                return lineno
            current = line[1:-1].strip()
        elif key is not None and current == section:
            name = line.split("=", 1)[0].split(":", 1)[0].strip()
            if name == key:
                return lineno
    return 0


def _convert(section: str, key: str, raw: str, target_type):
    raw = raw.strip()
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type == "optional_float":
            return None if raw.lower() in ("none", "off") else float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc


def _field_types(cls) -> dict:
    out = {}
    for f in fields(cls):
        if f.name == "grad_clip_norm":
            out[f.name] = "optional_float"
        elif f.type in ("int", int):
            out[f.name] = int
        elif f.type in ("float", float):
            out[f.name] = float
        else:
            out[f.name] = str
    return out


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from exc
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(
                f"unknown section [{section}] at line {_find_line(text, section, None)}"
            )
        target = getattr(cfg, section)
        types = _field_types(type(target))
        for key, raw in parser.items(section):
            if key not in types:
                raise ConfigError(
                    f"unknown key {key!r} in [{section}] at line {_find_line(text, section, key)}"
                )
            setattr(target, key, _convert(section, key, raw, types[key]))
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def render_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; parse(render(cfg)) == cfg."""
    lines = []
    for section, obj in (
        ("model", cfg.model),
        ("train", cfg.train),
        ("data", cfg.data),
        ("output", cfg.output),
    ):
        lines.append(f"[{section}]")
        for f in fields(type(obj)):
            val = getattr(obj, f.name)
            lines.append(f"{f.name} = {'none' if val is None else val}")
        lines.append("")
    return "\n".join(lines)


# Reference geometries for the accounting commands: width, ffn width,
# heads, depth, factor rank. Vocab 32000 with untied embeddings, context
# 256. The 1b row keeps depth 24 (its published parameter total is only
# consistent with 24 layers; the head count does not affect counts).
_REFERENCE = {
    "60m": dict(d_model=512, d_ff=1376, n_heads=8, n_layers=8, r=128),
    "130m": dict(d_model=768, d_ff=2048, n_heads=12, n_layers=12, r=256),
    "350m": dict(d_model=1024, d_ff=2736, n_heads=16, n_layers=24, r=256),
    "1b": dict(d_model=2048, d_ff=5461, n_heads=32, n_layers=24, r=512),
    "7b": dict(d_model=4096, d_ff=11008, n_heads=32, n_layers=32, r=1024),
}


def reference_model_config(name: str, parameterization: str = "lost") -> ModelConfig:
    """One of the standard accounting geometries (60m, 130m, 350m, 1b, 7b)."""
    key = name.lower()
    if key not in _REFERENCE:
        raise ConfigError(f"unknown reference config {name!r}, expected one of {sorted(_REFERENCE)}")
    geom = _REFERENCE[key]
    return ModelConfig(
        n_layers=geom["n_layers"],
        d_model=geom["d_model"],
        d_ff=geom["d_ff"],
        n_heads=geom["n_heads"],
        vocab_size=32000,
        seq_len=256,
        parameterization=parameterization,
        r=geom["r"],
        rho=0.01,
        gamma=0.7,
        r_comp=256,
    )
