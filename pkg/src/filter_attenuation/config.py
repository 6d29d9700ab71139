"""JSON run configuration.

Schema (all sections optional; defaults shown by ``default_config()``)::

    {
      "seed": 0,
      "output_dir": "runs/desk",
      "data": {"source": "synthetic", "class_count": 5, "n_per_class": 150,
               "size": 16, "noise": 0.25, "jitter": 3, "split": [0.6, 0.2, 0.2],
               "standardize": true},
      "model": {"conv_channels": [8, 16]},
      "train": {"learning_rate": 0.05, "batch_size": 32},
      "prune": {<PruneConfig fields>}
    }

``data.source`` may also be ``"cifar10"`` (with ``"path"``: a binary batch file)
or ``"idx"`` (with ``"images"`` and ``"labels"`` paths). Relative paths resolve
against the config file's directory. With ``standardize`` (default true) every
split is standardized per channel with the training split's mean and std.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .data import gen_synthetic, load_cifar10_binary, load_idx
from .masking import ConfigError, PruneConfig
from .nn import TrainConfig, build_desk_model

DESK_PRUNE = dict(fa=0.8, a=1, k0=0, t1=0.2, t2=0.1, criterion="l1",
                  target_prune_fraction=0.5, warmup_epochs=10, warmup_max_epochs=30,
                  warmup_floor=0.9, finetune_epochs=2, max_rounds=150)

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/desk",
    "data": {"source": "synthetic", "class_count": 5, "n_per_class": 150, "size": 16,
             "noise": 0.25, "jitter": 3, "split": [0.6, 0.2, 0.2], "standardize": True},
    "model": {"conv_channels": [8, 16]},
    "train": {"learning_rate": 0.05, "batch_size": 32},
    "prune": {**asdict(PruneConfig()), **DESK_PRUNE},
}

DATA_KEYS = {
    "synthetic": {"source", "class_count", "n_per_class", "size", "noise", "jitter",
                  "channels", "split", "standardize"},
    "cifar10": {"source", "path", "split", "standardize"},
    "idx": {"source", "images", "labels", "class_count", "split", "standardize"},
}


def default_config():
    return copy.deepcopy(DEFAULTS)


def _merge(base, override, where="config"):
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown key {where}.{key}")
        if isinstance(base[key], dict) and key != "data":
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{key} must be an object")
            _merge(base[key], value, f"{where}.{key}")
        else:
            base[key] = value
    return base


@dataclass
class RunConfig:
    seed: int
    output_dir: Path
    data: dict
    model: dict
    train: TrainConfig
    prune: PruneConfig
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, raw, base_dir="."):
        cfg = _merge(default_config(), raw)
        data = cfg["data"]
        source = data.get("source")
        if source not in DATA_KEYS:
            raise ConfigError(f"data.source must be one of {sorted(DATA_KEYS)}")
        extra = set(data) - DATA_KEYS[source]
        if extra:
            raise ConfigError(f"unknown data keys for {source}: {sorted(extra)}")
        if source == "synthetic":
            data = {**DEFAULTS["data"], **data}
        train_keys = {f.name for f in fields(TrainConfig)} - {"rng_seed", "epochs"}
        if set(cfg["train"]) - train_keys:
            raise ConfigError(f"unknown train keys: {sorted(set(cfg['train']) - train_keys)}")
        try:
            train = TrainConfig(rng_seed=int(cfg["seed"]), **cfg["train"])
            prune = PruneConfig(**cfg["prune"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(int(cfg["seed"]), Path(cfg["output_dir"]), data, cfg["model"], train, prune,
                   Path(base_dir))

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(raw, path.parent)

    def to_dict(self):
        return {
            "seed": self.seed,
            "output_dir": str(self.output_dir),
            "data": self.data,
            "model": self.model,
            "train": {"learning_rate": self.train.learning_rate,
                      "batch_size": self.train.batch_size},
            "prune": asdict(self.prune),
        }

    def _path(self, key):
        if key not in self.data:
            raise ConfigError(f"data.{key} is required for source {self.data['source']!r}")
        p = Path(self.data[key])
        return p if p.is_absolute() else self.base_dir / p

    def load_dataset(self):
        d = self.data
        if d["source"] == "synthetic":
            ds = gen_synthetic(d["class_count"], d["n_per_class"], d["size"], self.seed,
                               d["noise"], d["jitter"], d.get("channels", 1))
        elif d["source"] == "cifar10":
            ds = load_cifar10_binary(self._path("path"))
        else:
            ds = load_idx(self._path("images"), self._path("labels"), d.get("class_count"))
        return ds

    def splits(self):
        """``(train, val, test)`` datasets."""
        split = self.data.get("split", [0.6, 0.2, 0.2])
        if len(split) != 3:
            raise ConfigError("data.split must list train/val/test fractions")
        parts = self.load_dataset().split(split, seed=self.seed)
        if self.data.get("standardize", True):
            mean, std = parts[0].channel_stats()
            parts = [p.standardized(mean, std) for p in parts]
        return parts

    def build_model(self, dataset):
        channels = self.model.get("conv_channels", [8, 16])
        return build_desk_model(dataset.images.shape[1:], dataset.class_count, self.seed,
                                tuple(channels))
