"""Run configuration: one dataclass tree covering every stage, strict
dict/YAML loading (unknown keys are errors), dotted command-line overrides,
and the config hash that guards checkpoints.
"""

from __future__ import annotations

import dataclasses
import json
import os
import subprocess
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .ccm import AttentionConfig
from .dps import ClusterConfig
from .episodes import SyntheticSpec
from .model import BackboneConfig, DecoderConfig, config_hash
from .pipeline import TrainConfig, VariantConfig
from .vlmd import RefinerConfig, SourceConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = ""
    kind: str = "synthetic"          # synthetic feature grids or real RGB images
    fold: int = 0
    k_shot: int = 1
    input_size: int | None = None


@dataclass
class EvalConfig:
    episodes: int = 1000
    include_background: bool = False
    per_episode: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = ""
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    source: SourceConfig = field(default_factory=SourceConfig)
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    dps: ClusterConfig = field(default_factory=ClusterConfig)
    ccm: AttentionConfig = field(default_factory=AttentionConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    variant: VariantConfig = field(default_factory=VariantConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def resolved_output_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        env = os.environ.get("LFSS_OUTPUT_DIR")
        return Path(env) if env else Path("runs")

    def hash(self) -> str:
        """Hash over the sections that define what a trained decoder means."""
        keep = ("backbone", "source", "refiner", "dps", "ccm", "decoder", "variant")
        payload = {k: dataclasses.asdict(getattr(self, k)) for k in keep}
        return config_hash(payload)


def _tuplify(value):
    if isinstance(value, (list, tuple)):
        return tuple(_tuplify(v) for v in value)
    return value


def _build(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"unknown config key: {where}")
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a mapping")
            kwargs[key] = _build(hint, value, where)
        elif isinstance(value, list):
            kwargs[key] = _tuplify(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return _build(RunConfig, data)


def load_config(path: Path | str) -> RunConfig:
    path = Path(path)
    text = path.read_text()
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    return from_dict(data or {})


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def parse_overrides(pairs) -> dict:
    """``["dps.n_sp=7", "train.lr=0.01"]`` -> nested dict, values YAML-typed."""
    tree: dict = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        dotted, raw = pair.split("=", 1)
        value = yaml.safe_load(raw)
        node = tree
        parts = dotted.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {pair!r} conflicts with an earlier scalar")
        node[parts[-1]] = value
    return tree


def resolve_config(file: Path | str | None = None, overrides=None) -> RunConfig:
    """Defaults, then the config file, then dotted overrides — later wins."""
    merged: dict = {}
    if file is not None:
        path = Path(file)
        text = path.read_text()
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        merged = _deep_merge(merged, data or {})
    merged = _deep_merge(merged, parse_overrides(overrides))
    base = dataclasses.asdict(RunConfig())
    return from_dict(_deep_merge(base, merged))


def _version_stamp() -> dict:
    from . import __version__
    stamp = {"package_version": __version__}
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        if out.returncode == 0:
            stamp["git"] = out.stdout.strip()
    except OSError:
        pass
    return stamp


def write_resolved(cfg: RunConfig, out_dir: Path | str) -> Path:
    """Persist the fully resolved config plus a version stamp next to outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"config": dataclasses.asdict(cfg), "config_hash": cfg.hash(),
               "stamp": _version_stamp()}
    path = out_dir / "resolved_config.json"
    path.write_text(json.dumps(payload, indent=2, default=str) + "\n")
    return path
