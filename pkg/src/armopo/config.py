"""Run configuration with strict schema validation.

A run config is a JSON object with the sections below; every section is
optional and unknown keys anywhere are rejected before any work starts.

.. code-block:: json

    {
      "env": "pendulum",
      "seed": 0,
      "regimes": ["medium"],
      "data": {"n_steps": 20000, "sac": {"hidden": [64, 64]}},
      "model": {"kinds": ["dmdn", "darmdn", "ensemble"], "grid": {"hidden": [64]}},
      "metrics": {"l_max": 20},
      "agent": {"grid": {"lam": [1.0], "horizon": [5], "heuristic": ["ma"]}, "seeds": [0, 1, 2]}
    }
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .agent.sac import SACConfig
from .data import REGIMES, RegimeConfig
from .metrics import MetricConfig
from .models import KINDS, ModelConfig


class ConfigError(ValueError):
    pass


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError, NotImplementedError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _check_grid(grid: dict, allowed: set, where: str) -> dict:
    if not isinstance(grid, dict):
        raise ConfigError(f"{where}: grid must be an object")
    unknown = sorted(set(grid) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown grid keys {unknown}")
    for k, v in grid.items():
        if not isinstance(v, list) or not v:
            raise ConfigError(f"{where}.{k}: grid values must be a non-empty list")
    return grid


def grid_cells(grid: dict) -> list[dict]:
    """Cartesian product of ``grid`` in sorted-key order; ``{}`` gives one empty cell."""
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


@dataclass
class DataSection:
    n_steps: int = 20_000
    n_expert_steps: int | None = None
    expert_train_steps: int = 8_000
    medium_max_train_steps: int = 8_000
    medium_fraction: float = 0.5
    medium_eval_every: int = 500
    medium_eval_episodes: int = 10
    n_ref_episodes: int = 10
    val_fraction: float = 0.1
    sac: dict = field(default_factory=lambda: {"hidden": [64, 64], "start_steps": 500})

    def regime_config(self) -> RegimeConfig:
        return RegimeConfig(
            n_steps=self.n_steps,
            n_expert_steps=self.n_expert_steps,
            expert_train_steps=self.expert_train_steps,
            medium_max_train_steps=self.medium_max_train_steps,
            medium_fraction=self.medium_fraction,
            medium_eval_every=self.medium_eval_every,
            medium_eval_episodes=self.medium_eval_episodes,
            n_ref_episodes=self.n_ref_episodes,
        )

    def sac_config(self) -> SACConfig:
        return _build(SACConfig, self.sac, "data.sac")


@dataclass
class ModelSection:
    kinds: list = field(default_factory=lambda: list(KINDS))
    base: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    selection: str = "lr"

    def cells(self, kind: str) -> list[ModelConfig]:
        out = []
        for cell in grid_cells(self.grid):
            out.append(_build(ModelConfig, {**self.base, **cell, "kind": kind}, f"model[{kind}]"))
        return out


@dataclass
class AgentSection:
    models: list = field(default_factory=lambda: ["darmdn"])
    grid: dict = field(default_factory=lambda: {"lam": [1.0], "horizon": [5], "heuristic": ["ma"]})
    base: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    final_eval_episodes: int = 10


_MOPO_KEYS = {"lam", "horizon", "heuristic", "n_batches", "rho_real", "eval_every", "eval_episodes",
              "rollout_starts", "rollout_every", "buffer_capacity", "sac"}


@dataclass
class RunConfig:
    env: str = "pendulum"
    seed: int = 0
    regimes: list = field(default_factory=lambda: ["medium"])
    data_dir: str | None = None
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    agent: AgentSection = field(default_factory=AgentSection)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def mopo_configs(self):
        from .agent.mopo import MOPOConfig

        return [_build(MOPOConfig, {**self.agent.base, **cell}, "agent") for cell in grid_cells(self.agent.grid)]


_SECTIONS = {"data": DataSection, "model": ModelSection, "metrics": MetricConfig, "agent": AgentSection}


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    kw = {k: v for k, v in raw.items() if k not in _SECTIONS}
    for name, cls in _SECTIONS.items():
        kw[name] = _build(cls, raw.get(name), name)
    cfg = RunConfig(**kw)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    from . import env as envs

    try:
        envs.get_spec(cfg.env)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"env: {exc}") from exc
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
        raise ConfigError("seed must be an integer")
    bad = sorted(set(cfg.regimes) - set(REGIMES))
    if bad or not cfg.regimes:
        raise ConfigError(f"regimes must be a non-empty subset of {list(REGIMES)}")
    for k in cfg.model.kinds:
        if k not in KINDS:
            raise ConfigError(f"model.kinds: unknown kind {k!r}")
    if cfg.model.selection not in ("lr", "log_likelihood", "r2"):
        raise ConfigError("model.selection must be one of lr, log_likelihood, r2")
    model_keys = {f.name for f in fields(ModelConfig)} - {"kind"}
    _check_grid(cfg.model.grid, model_keys, "model.grid")
    if set(cfg.model.base) - model_keys:
        raise ConfigError(f"model.base: unknown keys {sorted(set(cfg.model.base) - model_keys)}")
    _check_grid(cfg.agent.grid, _MOPO_KEYS, "agent.grid")
    if set(cfg.agent.base) - _MOPO_KEYS:
        raise ConfigError(f"agent.base: unknown keys {sorted(set(cfg.agent.base) - _MOPO_KEYS)}")
    for k in cfg.agent.models:
        if k not in cfg.model.kinds:
            raise ConfigError(f"agent.models: {k!r} is not among model.kinds")
    if not cfg.agent.seeds:
        raise ConfigError("agent.seeds must be non-empty")
    if not 0.0 < cfg.data.val_fraction < 1.0:
        raise ConfigError("data.val_fraction must lie in (0, 1)")
    # Build every cell once so bad values fail now rather than mid-run.
    cfg.data.sac_config()
    for kind in cfg.model.kinds:
        cfg.model.cells(kind)
    cfg.mopo_configs()


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return parse_config(raw)
