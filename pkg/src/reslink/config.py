"""Run configuration: one YAML file drives a whole training run.

Schema (all fields optional unless noted)::

    seed: 42                 # required; no wall-clock fallback
    out: runs/demo           # output directory (CLI --out overrides)
    model:                   # any ModelConfig field, e.g.
      input_h: 64
      input_w: 64
      input_c: 1
      stem_filters: 8
      stage_filters: [8, 16]
      area_h: 4
      area_w: 4
    optim:
      lr: 0.001
      beta1: 0.9
      beta2: 0.999
      epsilon: 1.0e-8
      epochs: 5
      batch_size: 32
    data:                    # exactly one of root / manifest / synthetic
      root: dataset/         # class-per-directory image tree
      manifest: files.csv    # path,label manifest
      synthetic:             # generated in memory at model input size
        per_class: 100
      split: {train: 0.8, val: 0.1, test: 0.1}
      oversample: true
      resample_first: false  # oversample before splitting instead of after

Relative ``root``/``manifest`` paths are resolved against the directory
containing the config file, so a run directory can be archived and replayed
from anywhere.  Unknown keys in any section are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .data import SplitSpec
from .errors import ConfigError
from .model import ModelConfig


def _require_mapping(value, where: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(value).__name__}")
    return value


def _reject_unknown(seen: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(seen) - allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(unknown)}")


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where} must be a number, got {value!r}")
    return float(value)


def _integer(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where} must be an integer, got {value!r}")
    return value


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 5
    batch_size: int = 32

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"optim.lr must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"optim.{name} must lie in [0, 1), got {v}")
        if self.epsilon <= 0:
            raise ConfigError(f"optim.epsilon must be positive, got {self.epsilon}")
        if self.epochs < 0:
            raise ConfigError(f"optim.epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"optim.batch_size must be >= 1, got {self.batch_size}")

    @classmethod
    def from_dict(cls, raw: dict) -> "OptimConfig":
        raw = _require_mapping(raw, "optim")
        _reject_unknown(raw, {"lr", "beta1", "beta2", "epsilon", "epochs",
                              "batch_size"}, "optim")
        kwargs = {}
        for key in ("lr", "beta1", "beta2", "epsilon"):
            if key in raw:
                kwargs[key] = _number(raw[key], f"optim.{key}")
        for key in ("epochs", "batch_size"):
            if key in raw:
                kwargs[key] = _integer(raw[key], f"optim.{key}")
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "epsilon": self.epsilon, "epochs": self.epochs,
                "batch_size": self.batch_size}


@dataclass(frozen=True)
class DataConfig:
    root: Optional[str] = None
    manifest: Optional[str] = None
    synthetic_per_class: Optional[int] = None
    split: SplitSpec = field(default_factory=SplitSpec)
    oversample: bool = True
    resample_first: bool = False

    def __post_init__(self):
        sources = [s for s in (self.root, self.manifest,
                               self.synthetic_per_class) if s is not None]
        if len(sources) != 1:
            raise ConfigError(
                "data must name exactly one source: root, manifest, or synthetic"
            )
        if self.synthetic_per_class is not None and self.synthetic_per_class < 1:
            raise ConfigError(
                f"data.synthetic.per_class must be >= 1, "
                f"got {self.synthetic_per_class}"
            )

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Optional[Path] = None) -> "DataConfig":
        raw = _require_mapping(raw, "data")
        _reject_unknown(raw, {"root", "manifest", "synthetic", "split",
                              "oversample", "resample_first"}, "data")
        kwargs: dict = {}
        for key in ("root", "manifest"):
            if raw.get(key) is not None:
                value = raw[key]
                if not isinstance(value, str):
                    raise ConfigError(f"data.{key} must be a path string")
                if base_dir is not None:
                    value = str((base_dir / value).resolve())
                kwargs[key] = value
        if raw.get("synthetic") is not None:
            synth = _require_mapping(raw["synthetic"], "data.synthetic")
            _reject_unknown(synth, {"per_class"}, "data.synthetic")
            if "per_class" not in synth:
                raise ConfigError("data.synthetic requires per_class")
            kwargs["synthetic_per_class"] = _integer(
                synth["per_class"], "data.synthetic.per_class")
        if raw.get("split") is not None:
            split = _require_mapping(raw["split"], "data.split")
            _reject_unknown(split, {"train", "val", "test"}, "data.split")
            fracs = {k: _number(split[k], f"data.split.{k}")
                     for k in ("train", "val", "test") if k in split}
            kwargs["split"] = SplitSpec(
                train_frac=fracs.get("train", 0.8),
                val_frac=fracs.get("val", 0.1),
                test_frac=fracs.get("test", 0.1),
            )
        for key in ("oversample", "resample_first"):
            if key in raw:
                if not isinstance(raw[key], bool):
                    raise ConfigError(f"data.{key} must be true or false")
                kwargs[key] = raw[key]
        return cls(**kwargs)

    def to_dict(self) -> dict:
        d: dict = {
            "split": {"train": self.split.train_frac, "val": self.split.val_frac,
                      "test": self.split.test_frac},
            "oversample": self.oversample,
            "resample_first": self.resample_first,
        }
        if self.root is not None:
            d["root"] = self.root
        if self.manifest is not None:
            d["manifest"] = self.manifest
        if self.synthetic_per_class is not None:
            d["synthetic"] = {"per_class": self.synthetic_per_class}
        return d


@dataclass
class RunConfig:
    seed: int
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=lambda: DataConfig(root="."))
    out: Optional[str] = None

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "model": self.model.to_dict(),
             "optim": self.optim.to_dict(), "data": self.data.to_dict()}
        if self.out is not None:
            d["out"] = self.out
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True,
                              default_flow_style=False)


def parse_run_config(raw: dict, base_dir: Optional[Path] = None) -> RunConfig:
    raw = _require_mapping(raw, "run config")
    _reject_unknown(raw, {"seed", "out", "model", "optim", "data"}, "run config")
    if "seed" not in raw:
        raise ConfigError("run config requires an explicit seed")
    seed = _integer(raw["seed"], "seed")
    out = raw.get("out")
    if out is not None:
        if not isinstance(out, str):
            raise ConfigError("out must be a path string")
        if base_dir is not None:
            out = str((base_dir / out).resolve())
    model = ModelConfig.from_dict(_require_mapping(raw.get("model"), "model"))
    optim = OptimConfig.from_dict(raw.get("optim"))
    data = DataConfig.from_dict(raw.get("data"), base_dir=base_dir)
    return RunConfig(seed=seed, model=model, optim=optim, data=data, out=out)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if raw is None:
        raise ConfigError(f"config {path} is empty")
    return parse_run_config(raw, base_dir=path.parent)
