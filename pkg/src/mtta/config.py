"""Run configuration: dataclass defaults, JSON files, and command-line overrides.

Precedence is flags > config file > defaults.  Unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class PretrainConfig:
    n_source_profiles: int = 48
    source_minutes: float = 0.5
    mirror: bool = True
    f_hidden: int = 128
    f_steps: int = 5000
    f_batch: int = 64
    f_lr: float = 1e-3
    f_lr_min: float = 1e-5
    f_lambda_2d: float = 0.1
    latent_dim: int = 32
    width: int = 32
    n_codes: int = 32
    depth: int = 3
    m_steps: int = 8000
    m_batch: int = 32
    m_lr: float = 2e-4
    m_lr_min: float = 1e-5
    m_betas: tuple = (0.9, 0.99)
    m_weight_decay: float = 1e-4
    mu_pt: float = 0.99
    revive_every: int = 500
    usage_floor: float = 0.05
    noise_sigma: float = 0.015
    mask_prob: float = 0.25
    log_every: int = 50

    def validate(self):
        if not 0.0 <= self.mu_pt < 1.0:
            raise ConfigError("mu_pt must lie in [0, 1)")
        if self.n_source_profiles < 8:
            raise ConfigError("at least 8 source profiles are required")
        if min(self.f_steps, self.m_steps, self.f_batch, self.m_batch) < 1:
            raise ConfigError("step counts and batch sizes must be positive")
        if self.depth < 1 or self.n_codes < 1:
            raise ConfigError("codebook needs depth >= 1 and n_codes >= 1")
        return self


@dataclass
class AdaptConfig:
    cycles: int = 12
    lr: float = 5e-5
    lr_min: float = 1e-6
    lambda_s: float = 0.001
    lambda_2d: float = 0.1
    lambda_ach: float = 0.3
    mu_f: float = 0.95
    mu_c: float = 0.999
    mu_m: float | None = None        # soft reset on M as well (off when None)
    replay_minibatch: int = 4
    minibatch: int = 32
    use_pose_loss: bool = True
    use_anchor_loss: bool = True
    use_self_replay: bool = True
    use_soft_reset: bool = True
    continuous: bool = True
    k: int = 3                       # codebook layers used; 0 disables the codebook
    sync_test_latents: bool = False  # also EMA-update C with test latents
    noise_sigma: float = 0.015
    mask_prob: float = 0.25
    usage_floor: float = 0.05
    drift_probes: int = 16
    record_timing: bool = True

    def validate(self):
        if self.cycles < 1:
            raise ConfigError("cycles must be >= 1")
        if min(self.lambda_s, self.lambda_2d, self.lambda_ach) < 0:
            raise ConfigError("loss weights must be non-negative")
        for name in ("mu_f", "mu_c"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.mu_m is not None and not 0.0 <= self.mu_m <= 1.0:
            raise ConfigError("mu_m must lie in [0, 1] or be null")
        if self.k < 0:
            raise ConfigError("k must be >= 0")
        if self.minibatch < 1 or self.replay_minibatch < 0:
            raise ConfigError("minibatch sizes must be positive")
        return self

    @property
    def anchor_active(self) -> bool:
        return self.use_anchor_loss and self.k > 0 and self.lambda_ach > 0

    @property
    def replay_active(self) -> bool:
        return self.use_self_replay and self.k > 0 and self.replay_minibatch > 0


@dataclass
class SuiteConfig:
    """Synthetic evaluation suite: test persons, their stream length and domain shift."""
    n_persons: int = 4
    minutes: float = 10.0
    shift: str = "standard"
    person_seed_offset: int = 1000


@dataclass
class RunConfig:
    seed: int = 42
    threads: int = 1
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    suite: SuiteConfig = field(default_factory=SuiteConfig)

    def validate(self):
        self.pretrain.validate()
        self.adapt.validate()
        if self.suite.shift == "source":
            raise ConfigError("the test suite must use a shifted domain, not 'source'")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        return self


def to_dict(cfg) -> dict:
    return asdict(cfg)


def _merge(obj, updates: dict, where: str):
    if not isinstance(updates, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(obj)}
    changes = {}
    for key, value in updates.items():
        if key not in known:
            raise ConfigError(f"unknown config key {where}{key}")
        current = getattr(obj, key)
        if is_dataclass(current):
            changes[key] = _merge(current, value, f"{where}{key}.")
        elif isinstance(current, tuple):
            changes[key] = tuple(value)
        elif isinstance(current, bool) and not isinstance(value, bool):
            raise ConfigError(f"{where}{key}: expected true/false")
        elif isinstance(current, (int, float)) and not isinstance(current, bool) and value is not None:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{where}{key}: expected a number")
            if isinstance(current, int) and not float(value).is_integer():
                raise ConfigError(f"{where}{key}: expected an integer")
            changes[key] = type(current)(value)
        else:
            changes[key] = value
    return replace(obj, **changes)


def merge(cfg, updates: dict):
    return _merge(cfg, updates, "")


def load(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        cfg = merge(cfg, data)
    if overrides:
        cfg = merge(cfg, overrides)
    return cfg.validate()


def dump(cfg, path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")
