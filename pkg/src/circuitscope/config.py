"""Experiment configuration: one JSON document drives every stage."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import scale_timesteps
from .faces import DatasetConfig, default_correlation_table
from .unet import UNetConfig

ANALYSIS_TIMESTEPS = (100, 300, 600, 900)
OUT_ENV = "CIRCUITSCOPE_OUT"


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "seed": 0,
    "arms": {
        "A": {"style": "crisp", "count": 512},
        "B": {"style": "textured", "count": 512},
    },
    "model": {},
    "schedule": {"T": 200},
    "training": {"steps": 2000, "batch_size": 8, "lr": 1e-3},
    "analysis": {
        "timesteps": list(ANALYSIS_TIMESTEPS),
        "eval_count": 32,
        "eval_batch": 4,
        "bins": 16,
        "per_row_entropy": False,
        "sparsity_eps": 1e-6,
    },
    "interventions": {"n": 32, "mode": "zero"},
    "statistics": {"resamples": 10000, "coverage": 0.95, "alpha": 0.05},
    "output_dir": "circuitscope_out",
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k == "arms":
            out[k] = copy.deepcopy(v)
        elif isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint32)[0])


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __post_init__(self):
        self.raw = _merge(DEFAULTS, self.raw)
        try:
            self._validate()
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    # ------------------------------------------------------------ loading

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(copy.deepcopy(d))

    @classmethod
    def load(cls, path: str | Path | None, seed: int | None = None, out: str | None = None) -> "ExperimentConfig":
        d: dict = {}
        if path is not None:
            try:
                d = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(d, dict):
                raise ConfigError("config must be a JSON object")
        if seed is not None:
            d["seed"] = seed
        if out is not None:
            d["output_dir"] = out
        elif os.environ.get(OUT_ENV):
            d["output_dir"] = os.environ[OUT_ENV]
        return cls.from_dict(d)

    # ------------------------------------------------------------ validation

    def _validate(self) -> None:
        r = self.raw
        if not r["arms"]:
            raise ConfigError("at least one arm is required")
        for name in r["arms"]:
            if name not in ("A", "B"):
                raise ConfigError(f"arms are named A and B, got {name!r}")
        self.model_config()
        for name in self.arm_names:
            self.dataset_config(name)
        T = self.T
        if T < 2:
            raise ConfigError("schedule.T must be >= 2")
        ts = self.timesteps
        if any(not 0 <= t < T for t in ts):
            raise ConfigError(f"analysis timesteps {ts} must lie in [0, {T})")
        if len(set(ts)) != len(ts):
            raise ConfigError(f"analysis timesteps collapse after scaling to T={T}: {ts}")
        a = r["analysis"]
        if a["eval_count"] < 1 or a["eval_batch"] < 1:
            raise ConfigError("eval_count and eval_batch must be positive")
        if r["training"]["steps"] < 0 or r["training"]["batch_size"] < 1:
            raise ConfigError("training.steps must be >= 0 and batch_size >= 1")
        if r["interventions"]["mode"] not in ("zero", "mean"):
            raise ConfigError("interventions.mode must be zero or mean")

    # ------------------------------------------------------------ accessors

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def arm_names(self) -> list[str]:
        return sorted(self.raw["arms"])

    @property
    def T(self) -> int:
        return int(self.raw["schedule"]["T"])

    @property
    def timesteps(self) -> list[int]:
        return sorted(scale_timesteps(self.raw["analysis"]["timesteps"], self.T))

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    def section(self, name: str) -> dict:
        return self.raw[name]

    def model_config(self) -> UNetConfig:
        m = dict(self.raw["model"])
        m.setdefault("image_size", self.raw["arms"][self.arm_names[0]].get("image_size", 32))
        m.setdefault("channels", self.raw["arms"][self.arm_names[0]].get("channels", 3))
        m.setdefault("base_channels", 16)
        return UNetConfig(**m)

    def arm_index(self, arm: str) -> int:
        return "AB".index(arm)

    def dataset_config(self, arm: str) -> DatasetConfig:
        spec = dict(self.raw["arms"][arm])
        spec.pop("external_dir", None)
        mc = self.raw["model"]
        spec.setdefault("image_size", mc.get("image_size", 32))
        spec.setdefault("channels", mc.get("channels", 3))
        spec.setdefault("correlation_table", default_correlation_table())
        spec["seed"] = spec.get("seed", derive_seed(self.seed, self.arm_index(arm), 0))
        return DatasetConfig(**spec)

    def external_dir(self, arm: str) -> str | None:
        return self.raw["arms"][arm].get("external_dir")

    def train_seed(self) -> int:
        # shared by both arms so their models start from the same initialization
        return derive_seed(self.seed, 1)

    def eval_seed(self, arm: str) -> int:
        return derive_seed(self.seed, self.arm_index(arm), 2)

    # ------------------------------------------------------------ identity

    def to_dict(self, include_output: bool = False) -> dict:
        d = copy.deepcopy(self.raw)
        if not include_output:
            d.pop("output_dir", None)
        return d

    def digest(self) -> str:
        """sha256 of the canonical config, output directory excluded."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()
