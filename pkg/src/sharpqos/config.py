"""Experiment configuration: TOML sections mirroring the pipeline stages.

Every key has a default, so an empty file is a valid configuration apart
from the ``[data]`` source.  Relative data paths resolve against the
directory holding the config file; the output directory resolves against
the working directory.
"""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .sharpnet import ModelConfig
from .trainloop import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    # exactly one source: a normalized archive, raw WS-DREAM files, or raw matrices + context
    archive: str = ""
    wsdream: str = ""
    matrices: list = field(default_factory=list)
    context: str = ""
    tasks: list = field(default_factory=list)
    users: int = 0          # subsample size, 0 keeps all
    services: int = 0
    subsample_seed: int = 0


@dataclass
class SplitConfig:
    td: float = 10.0
    seed: int = 0
    val_fraction: float = 0.05
    cold_start: str = ""     # e.g. "CB:10"
    outlier_frac: float = 0.0


@dataclass
class FeatureConfig:
    d1: int = 128
    d2: int = 128
    nmf_iters: int = 200
    ae_epochs: int = 300
    seed: int = 0


@dataclass
class EvalConfig:
    groups: int = 50
    levels: list = field(default_factory=lambda: [90, 95, 99])
    ci_seed: int = 0
    baseline: bool = True


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: str = "runs/default"
    base_dir: str = "."

    def resolve(self, path):
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def as_dict(self):
        out = asdict(self)
        out.pop("base_dir")
        return out

    def digest(self):
        """Short stable hash of the effective settings."""
        blob = json.dumps(self.as_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


SECTIONS = {"data": DataConfig, "split": SplitConfig, "features": FeatureConfig,
            "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}


def _build(cls, table, section):
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")
    try:
        return cls(**table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def from_dict(raw, base_dir="."):
    raw = dict(raw)
    unknown = set(raw) - set(SECTIONS) - {"output"}
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    parts = {name: _build(cls, raw.get(name, {}), name) for name, cls in SECTIONS.items()}
    return ExperimentConfig(**parts, output=raw.get("output", "runs/default"), base_dir=str(base_dir))


def load_config(path):
    path = Path(path)
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(raw, base_dir=path.parent)


def bundled_config(name):
    """Path of a config shipped inside the package (``tiny.toml``)."""
    path = Path(__file__).parent / "fixtures" / name
    if not path.exists():
        raise FileNotFoundError(name)
    return path
