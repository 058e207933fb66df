"""Single-source-of-truth run configuration: dataclass tree, YAML loading,
dotted-path overrides, validation that reports every violated key, and the
config hash recorded into every artifact manifest."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

__all__ = ["RunConfig", "PriceConfig", "OcpSettings", "PpoSettings", "EvalSettings",
           "load_config", "apply_overrides", "config_hash", "ConfigError"]


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


@dataclass
class PriceConfig:
    source: str = "synthetic"  # synthetic | csv
    csv_path: str | None = None
    timestamp_col: str = "utc_timestamp"
    price_col: str = "AT_price_day_ahead"
    train_start: str = "2015-03-29"
    train_end: str = "2018-03-25"
    test_start: str = "2018-03-26"
    test_end: str = "2018-09-30"
    synthetic_seed: int = 0

    def problems(self) -> list[str]:
        out = []
        if self.source not in ("synthetic", "csv"):
            out.append(f"price.source must be 'synthetic' or 'csv', got {self.source!r}")
        if self.source == "csv" and not self.csv_path:
            out.append("price.csv_path is required when price.source = csv")
        return out


@dataclass
class DatagenSettings:
    n_trajectories: int = 84
    n_train: int = 63
    traj_len: int = 480
    c_target: float = 0.1367
    w_rho: float = 10.0
    w_F: float = 0.1
    lookahead: int = 8
    terminal_weight: float = 48.0
    gs_iters: int = 18

    def problems(self) -> list[str]:
        out = []
        if not (0 < self.n_train < self.n_trajectories):
            out.append("datagen.n_train must leave a nonempty validation split")
        if self.traj_len <= 0 or self.traj_len % 4:
            out.append("datagen.traj_len must be a positive multiple of 4")
        if self.w_rho <= 0 or self.w_F <= 0:
            out.append("datagen.w_rho and datagen.w_F must be positive")
        return out


@dataclass
class CurriculumSettings:
    ramp_epochs: int = 250
    long_horizon: int = 240
    max_epochs: int = 5000
    min_epochs_before_stop: int = 350
    patience: int = 100
    lr: float = 0.5e-4
    minibatch: int = 64
    windows_per_traj: int = 8

    def problems(self) -> list[str]:
        out = []
        if self.patience >= self.max_epochs:
            out.append("curriculum.patience must be below curriculum.max_epochs")
        if self.ramp_epochs <= 0:
            out.append("curriculum.ramp_epochs must be positive")
        if self.long_horizon < 2:
            out.append("curriculum.long_horizon must be at least 2")
        return out


@dataclass
class OcpSettings:
    nmpc_horizon: int = 12
    enmpc_horizon: int = 36
    block: int = 4
    slack_penalty: float = 1e3
    tikhonov: float = 1e-4
    qp_tol: float = 1e-8
    qp_max_iter: int = 60

    def problems(self) -> list[str]:
        out = []
        for name in ("nmpc_horizon", "enmpc_horizon"):
            if getattr(self, name) % self.block:
                out.append(f"ocp.{name} must be a multiple of ocp.block")
        if self.slack_penalty <= 0:
            out.append("ocp.slack_penalty must be positive")
        return out


@dataclass
class PpoSettings:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    koopman_actor_lr: float = 1e-5
    mlp_actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    steps_per_update: int = 2048
    epochs: int = 10
    minibatch: int = 64
    clip_norm: float = 0.5
    sigma_init_frac: float = 0.1
    sigma_final_frac: float = 0.02
    sigma_decay_portion: float = 0.5
    total_episodes: int = 500
    n_envs: int = 1

    def problems(self) -> list[str]:
        out = []
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            out.append("ppo.gamma and ppo.gae_lambda must be in (0, 1]")
        if self.steps_per_update < self.minibatch:
            out.append("ppo.steps_per_update must be at least one minibatch")
        if self.total_episodes <= 0:
            out.append("ppo.total_episodes must be positive")
        return out


@dataclass
class EvalSettings:
    nmpc_episodes: int = 20
    enmpc_days: int = 30
    embedding_steps: int = 20000
    seed: int = 123

    def problems(self) -> list[str]:
        out = []
        if self.nmpc_episodes <= 0 or self.enmpc_days <= 0 or self.embedding_steps <= 0:
            out.append("evaluation sizes must be positive")
        return out


@dataclass
class RunConfig:
    task: str = "nmpc"
    seed: int = 0
    out_dir: str = "runs/desk"
    price: PriceConfig = field(default_factory=PriceConfig)
    datagen: DatagenSettings = field(default_factory=DatagenSettings)
    curriculum: CurriculumSettings = field(default_factory=CurriculumSettings)
    ocp: OcpSettings = field(default_factory=OcpSettings)
    ppo: PpoSettings = field(default_factory=PpoSettings)
    evaluation: EvalSettings = field(default_factory=EvalSettings)

    def problems(self) -> list[str]:
        out = []
        if self.task not in ("nmpc", "enmpc"):
            out.append(f"task must be 'nmpc' or 'enmpc', got {self.task!r}")
        for section in ("price", "datagen", "curriculum", "ocp", "ppo", "evaluation"):
            out.extend(getattr(self, section).problems())
        return out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build_section(cls, data: dict, prefix: str, problems: list[str]):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            problems.append(f"unknown key {prefix}{key}")
            continue
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{prefix.rstrip('.') or 'config'}: {exc}")
        return cls()


_SECTIONS = {
    "price": PriceConfig,
    "datagen": DatagenSettings,
    "curriculum": CurriculumSettings,
    "ocp": OcpSettings,
    "ppo": PpoSettings,
    "evaluation": EvalSettings,
}


def config_from_dict(data: dict) -> RunConfig:
    problems: list[str] = []
    kwargs = {}
    for key, value in (data or {}).items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                problems.append(f"section {key} must be a mapping")
                continue
            kwargs[key] = _build_section(_SECTIONS[key], value, f"{key}.", problems)
        elif key in ("task", "seed", "out_dir"):
            kwargs[key] = value
        else:
            problems.append(f"unknown key {key}")
    cfg = RunConfig(**kwargs)
    problems.extend(cfg.problems())
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    data = {}
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError([f"config root of {path} must be a mapping"])
    if overrides:
        data = apply_overrides(data, overrides)
    return config_from_dict(data)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Dotted-path key=value overrides; values parsed as YAML scalars."""
    out = json.loads(json.dumps(data))  # deep copy of plain structures
    problems = []
    for item in overrides:
        if "=" not in item:
            problems.append(f"override {item!r} is not of the form key=value")
            continue
        key, raw = item.split("=", 1)
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                problems.append(f"override {key!r} crosses a non-mapping node")
                break
        else:
            node[parts[-1]] = yaml.safe_load(raw)
    if problems:
        raise ConfigError(problems)
    return out


def config_hash(cfg: RunConfig) -> str:
    """Hash of the experiment-relevant configuration (the output location is
    deliberately excluded so artifacts stay identifiable wherever they live)."""
    payload = cfg.to_dict()
    payload.pop("out_dir", None)
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]
