"""Experiment configuration: one JSON document, every field defaulted.

Schema (all sections optional)::

    {
      "seed": 0,                      # drives model init, world, data and training; env SLED_SEED overrides
      "model":    {"d", "L", "heads", "T", "ff_mult"},
      "world":    {"n_atoms", "tokens_per_atom", "grid", "regions", "amplitude",
                   "background_sigma", "n_waves"},
      "pretrain": {"lr", "batch_size", "iterations", "loss_threshold", "dataset_size",
                   "ks", "neutral_rate", "warmup", "log_every"},
      "train":    {"lr", "batch_size", "iterations", "objective", "spps_null", "rank",
                   "weight_decay", "ks", "dataset_size"},   # null batch/iterations = mode defaults
      "eval":     {"gamma", "delta", "alpha_min", "alpha_max", "steps", "seeds"}
    }

Model ``vocab`` and ``grid`` are derived from the world section.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .adapters import GSTLORA, STLORA
from .mmdit import ModelConfig, PretrainParams
from .pps import Hyperparams, default_hyperparams
from .world import WorldSpec

SEED_ENV = "SLED_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    gamma: int = 1
    delta: int | None = None
    alpha_min: float = -0.5
    alpha_max: float = 1.25
    steps: int = 32
    seeds: tuple = (0,)

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.gamma not in (1, 2, 3):
            raise ConfigError("eval.gamma must be 1, 2 or 3")
        if self.steps < 1:
            raise ConfigError("eval.steps must be >= 1")
        if not self.alpha_min < self.alpha_max:
            raise ConfigError("eval.alpha_min must be below alpha_max")

    def resolved_delta(self, gamma: int | None = None) -> int:
        g = self.gamma if gamma is None else gamma
        if self.delta is not None:
            return int(self.delta)
        return 15 if g == 1 else 7

    def alphas(self, gamma: int | None = None) -> np.ndarray:
        return np.linspace(self.alpha_min, self.alpha_max, self.resolved_delta(gamma))


@dataclass
class TrainSection:
    lr: float = 1e-4
    batch_size: int | None = None
    iterations: int | None = None
    objective: str = "spps"
    spps_null: str = "empty"
    rank: int = 16
    weight_decay: float = 0.0
    ks: tuple = (1, 2, 3)
    dataset_size: int = 2048

    def hyperparams(self, mode: str, seed: int, objective: str | None = None) -> Hyperparams:
        over = {k: v for k, v in asdict(self).items() if v is not None}
        if objective is not None:
            over["objective"] = objective
        return default_hyperparams(mode, seed=seed, **over)


@dataclass
class Config:
    seed: int = 0
    model: dict = field(default_factory=lambda: {"d": 64, "L": 4, "heads": 4, "T": 24, "ff_mult": 4})
    world: WorldSpec = field(default_factory=WorldSpec)
    pretrain: PretrainParams = field(default_factory=PretrainParams)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        spec = self.world
        if spec.n_atoms * spec.tokens_per_atom > self.model["T"] - 1:
            raise ConfigError(f"{spec.n_atoms} atoms x {spec.tokens_per_atom} tokens leave no pad in T={self.model['T']}")

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(vocab=self.world.vocab_size, grid=self.world.grid, seed=self.seed, **self.model)

    @property
    def world_spec(self) -> WorldSpec:
        return WorldSpec.from_dict({**self.world.to_dict(), "seed": self.seed})

    @property
    def pretrain_params(self) -> PretrainParams:
        return PretrainParams.from_dict({**self.pretrain.to_dict(), "seed": self.seed})

    def to_dict(self) -> dict:
        w = self.world.to_dict()
        w.pop("seed", None)
        p = self.pretrain.to_dict()
        p.pop("seed", None)
        return {"seed": self.seed, "model": dict(self.model), "world": w, "pretrain": p,
                "train": asdict(self.train), "eval": asdict(self.eval)}

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _build(cls, data: dict, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items()})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad {section!r} section: {e}") from e


def config_from_dict(d: dict) -> Config:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(d) - {"seed", "model", "world", "pretrain", "train", "eval"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    model = {"d": 64, "L": 4, "heads": 4, "T": 24, "ff_mult": 4}
    extra = set(d.get("model", {})) - set(model)
    if extra:
        raise ConfigError(f"unknown keys in 'model': {sorted(extra)}")
    model.update(d.get("model", {}))
    try:
        cfg = Config(
            seed=int(d.get("seed", 0)),
            model=model,
            world=_build(WorldSpec, d.get("world", {}), "world"),
            pretrain=_build(PretrainParams, d.get("pretrain", {}), "pretrain"),
            train=_build(TrainSection, d.get("train", {}), "train"),
            eval=_build(EvalConfig, d.get("eval", {}), "eval"),
        )
        cfg.model_config  # validates the model section
        for mode in (STLORA, GSTLORA):
            cfg.train.hyperparams(mode, cfg.seed)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return cfg


def load_config(path, env=None) -> Config:
    """Parse a config file; ``SLED_SEED`` in ``env`` (default os.environ) overrides the seed."""
    env = os.environ if env is None else env
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed config {path}: {e}") from e
    if env.get(SEED_ENV):
        try:
            raw = {**raw, "seed": int(env[SEED_ENV])}
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    return config_from_dict(raw)


def dump_config(cfg: Config) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n"
