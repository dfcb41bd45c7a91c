"""JSON run configuration with every default materialized.

Only one master ``seed`` is configurable; component seeds are derived from
it (see :meth:`RunConfig.seeds`) and written to every manifest.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from . import data, zoo
from .attacks import AttackConfig
from .errors import ConfigError
from .evaluation import ANCHORS
from .ranking import NOISE_DRAWS, NOISE_STD, STRATEGIES

SCHEMA_VERSION = 1

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "dataset": {
        "kind": "blobs",
        "n": 4000,
        "num_classes": 4,
        "dim": 64,
        "spread": 0.25,
        "image_shape": [1, 8, 8],
        "test_fraction": 0.25,
    },
    "zoo": {
        "victim": "mlp-narrow",
        "surrogate": "mlp-wide",
        "f0": ["mlp-deep", "cnn-small", "cnn-pool"],
        "allow_surrogate_in_f0": False,
    },
    "train": {"epochs": 15, "learning_rate": 0.05, "momentum": 0.9, "batch_size": 32},
    "attack": {"kind": "pgd", "epsilon": 20 / 255, "steps": 10, "step_size": None,
               "random_start": True, "mu": 1.0},
    "e2_attack": {"kind": "pgd", "epsilon": 40 / 255, "steps": 2, "step_size": 40 / 255 / 3,
                  "random_start": True, "mu": 1.0},
    "strategies": list(STRATEGIES),
    "k_anchors": list(ANCHORS),
    "noise": {"std": NOISE_STD, "draws": NOISE_DRAWS},
    "e2": {"m_perturbations": 20, "n_trials": 100},
}

_DATASET_KEYS = {
    "blobs": {"kind", "n", "num_classes", "dim", "spread", "image_shape", "test_fraction"},
    "rings": {"kind", "n", "image_shape", "test_fraction"},
    "idx": {"kind", "train_images", "train_labels", "test_images", "test_labels",
            "limit", "downsample_to", "num_classes"},
}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path}{key}")
        if isinstance(value, dict) and isinstance(base.get(key), dict) and key != "dataset":
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class RunConfig:
    raw: dict

    @classmethod
    def from_dict(cls, d, seed=None):
        if d.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {d.get('schema_version')}")
        raw = _merge(DEFAULTS, d)
        ds = raw["dataset"]
        kind = ds.get("kind", "blobs")
        if kind not in _DATASET_KEYS:
            raise ConfigError(f"unknown dataset kind {kind!r}")
        if kind == "blobs":
            ds = {**DEFAULTS["dataset"], **ds}
        elif kind == "rings":
            ds = {"n": 2000, "image_shape": [2], "test_fraction": 0.25, **ds}
        else:
            ds = {"limit": None, "downsample_to": 14, "num_classes": None, **ds}
        unknown = set(ds) - _DATASET_KEYS[kind]
        if unknown:
            raise ConfigError(f"unknown dataset keys {sorted(unknown)}")
        raw["dataset"] = ds
        if seed is not None:
            raw["seed"] = int(seed)
        cfg = cls(raw)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, seed=None):
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d, seed)

    def validate(self):
        z = self.raw["zoo"]
        names = [z["victim"], z["surrogate"], *z["f0"]]
        for n in names:
            if n not in zoo.ARCHITECTURES:
                raise ConfigError(f"unknown architecture {n!r}")
        if not z["f0"]:
            raise ConfigError("f0 must name at least one architecture")
        pairwise = names if not z["allow_surrogate_in_f0"] else [z["victim"], *z["f0"]]
        if len(set(pairwise)) != len(pairwise):
            raise ConfigError(f"victim, surrogate and f0 architectures must be distinct: {names}")
        for s in self.raw["strategies"]:
            if s not in STRATEGIES:
                raise ConfigError(f"unknown strategy {s!r}")
        self.train_config()
        self.attack_config()
        self.attack_config("e2_attack")
        e2 = self.raw["e2"]
        if e2["m_perturbations"] < 1 or e2["n_trials"] < 1:
            raise ConfigError("e2 needs positive m_perturbations and n_trials")

    @property
    def seed(self):
        return self.raw["seed"]

    def seeds(self):
        s = self.seed
        # keyed by registry position so a model's seeds do not depend on its role
        slot = {a: list(zoo.ARCHITECTURES).index(a) for a in self.architectures()}
        return {
            "dataset": s,
            "split": s + 1,
            "init": {a: s + 100 + i for a, i in slot.items()},
            "train": {a: s + 200 + i for a, i in slot.items()},
            "attack": s,
            "noise": s,
            "e2": s,
        }

    def architectures(self):
        z = self.raw["zoo"]
        seen = []
        for n in [z["victim"], z["surrogate"], *z["f0"]]:
            if n not in seen:
                seen.append(n)
        return seen

    def train_config(self, arch=None):
        seed = self.seeds()["train"][arch] if arch else self.seed
        try:
            return zoo.TrainConfig(seed=seed, **self.raw["train"])
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from exc

    def attack_config(self, key="attack"):
        try:
            return AttackConfig(seed=self.seeds()["attack"], **self.raw[key])
        except TypeError as exc:
            raise ConfigError(f"bad {key} config: {exc}") from exc

    def load_datasets(self):
        """``(train, test)`` datasets shaped for the configured networks."""
        ds = self.raw["dataset"]
        seeds = self.seeds()
        if ds["kind"] == "idx":
            train = data.load_idx(ds["train_images"], ds["train_labels"], ds["limit"],
                                  ds["downsample_to"], ds["num_classes"])
            test = data.load_idx(ds["test_images"], ds["test_labels"], ds["limit"],
                                 ds["downsample_to"], train.num_classes)
            return data.Dataset(train.inputs, train.labels, train.num_classes, "train"), test
        if ds["kind"] == "blobs":
            full = data.gen_blobs(ds["n"], ds["num_classes"], ds["dim"], ds["spread"], seeds["dataset"])
        else:
            full = data.gen_rings(ds["n"], seeds["dataset"])
        try:
            full = full.reshaped(*ds["image_shape"])
        except ValueError as exc:
            raise ConfigError(f"image_shape {ds['image_shape']} does not fit the samples") from exc
        return data.split(full, ds["test_fraction"], seeds["split"])

    def materialized(self):
        """The full config plus derived seeds, as written into manifests."""
        out = copy.deepcopy(self.raw)
        out["derived_seeds"] = self.seeds()
        out["attack"] = self.attack_config().to_dict()
        out["e2_attack"] = self.attack_config("e2_attack").to_dict()
        return out
