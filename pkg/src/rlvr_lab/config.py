"""Experiment configuration: one JSON document per run, with a schema version.

Desk defaults are sized so a GRPO-vs-SELF comparison finishes in minutes on
one core. ``reference_scale()`` records the large-model settings (learning
rate 1e-6, group size 8, batch 64, sampling temperature 1, 500 steps); it is
kept for comparison and is not expected to learn anything at desk scale.
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields

from rlvr_lab import envs

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "RLVR_LAB_OUTPUT_ROOT"
OBJECTIVES = ("grpo", "self", "reinforce")


class ConfigError(ValueError):
    pass


def default_suite():
    return envs.SuiteConfig()


@dataclass
class ExperimentConfig:
    # problems and base model
    suite: envs.SuiteConfig = field(default_factory=default_suite)
    pretrain_steps: int = 1000
    pretrain_lr: float = 0.5
    pretrain_batch: int = 32
    min_margin: float = 1.0

    # objective
    objective: str = "grpo"
    eta: float = 0.05  # SGD step; the batch gradient is summed over problems
    group_size: int = 8
    eps: float = 0.2
    kl_beta: float = 0.0  # reverse KL to the base model (grpo only)
    beta: float = 1e-4  # forward KL weight (self)
    filter_enabled: bool = True  # self: train only where the greedy answer fails
    kl_correct_only: bool = False  # self: forward KL on correct probe pairs only
    self_advantage: str = "grpo"
    neg_weight: float = 1.0  # reinforce: lambda on negative-reward rollouts
    reward_mode: str = envs.BINARY
    batch_size: int = 0  # problems per step; 0 means every training problem
    sample_temperature: float = 1.0

    # schedule
    steps: int = 400
    checkpoint_every: int = 20
    eval_every: int = 20

    # measurement
    probe_k: int = 4
    probe_temperature: float = 0.9
    pass_ks: tuple = (1, 8, 64)
    eval_temperature: float = 0.6
    eval_samples: int = 0  # 0 means exact Pass@k from enumerated correct mass
    strategy_samples: int = 16

    seed: int = 0
    output_dir: str = ""  # empty: $RLVR_LAB_OUTPUT_ROOT or ./runs

    def __post_init__(self):
        if isinstance(self.suite, dict):
            self.suite = envs.SuiteConfig(**self.suite)
        self.pass_ks = tuple(int(k) for k in self.pass_ks)
        self.validate()

    def validate(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        for name in ("checkpoint_every", "eval_every", "group_size", "probe_k", "pretrain_batch", "strategy_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if self.steps < 0 or self.pretrain_steps < 0 or self.batch_size < 0 or self.eval_samples < 0:
            raise ConfigError("steps, pretrain_steps, batch_size and eval_samples must be >= 0")
        if not self.pass_ks or list(self.pass_ks) != sorted(set(self.pass_ks)) or self.pass_ks[0] < 1:
            raise ConfigError("pass_ks must be a strictly ascending list of positive integers")
        if self.eval_samples and self.eval_samples < self.pass_ks[-1]:
            raise ConfigError("eval_samples must be >= max(pass_ks) (or 0 for exact evaluation)")
        if not 0.0 < self.eps < 1.0:
            raise ConfigError("eps must lie in (0, 1)")
        for name in ("eta", "sample_temperature", "eval_temperature", "probe_temperature", "pretrain_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.beta < 0 or self.kl_beta < 0 or self.neg_weight < 0:
            raise ConfigError("beta, kl_beta and neg_weight must be non-negative")
        if self.self_advantage not in ("grpo", "reinforce"):
            raise ConfigError("self_advantage must be 'grpo' or 'reinforce'")
        envs.RewardSpec(self.reward_mode)

    def resolved_output_dir(self):
        return self.output_dir or os.environ.get(OUTPUT_ROOT_ENV) or "runs"

    def to_dict(self):
        d = asdict(self)
        d["pass_ks"] = list(self.pass_ks)
        d["schema_version"] = SCHEMA_VERSION
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema version {version!r}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        if "suite" in d and isinstance(d["suite"], dict):
            sknown = {f.name for f in fields(envs.SuiteConfig)}
            bad = sorted(set(d["suite"]) - sknown)
            if bad:
                raise ConfigError(f"unknown suite keys: {bad}")
            d["suite"] = envs.SuiteConfig(**d["suite"])
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def replace(self, **changes):
        d = self.to_dict()
        suite_changes = changes.pop("suite", None)
        d.update(changes)
        if suite_changes:
            d["suite"] = {**d["suite"], **(asdict(suite_changes) if isinstance(suite_changes, envs.SuiteConfig) else suite_changes)}
        return ExperimentConfig.from_dict(d)


def load(path):
    with open(path) as fh:
        return ExperimentConfig.from_json(fh.read())


def save(config, path):
    with open(path, "w") as fh:
        fh.write(config.to_json() + "\n")


def strategy_suite():
    """Every skill has one A and one B answer; A is the better-exposed one for 90% of skills."""
    return envs.SuiteConfig(strategy_bias=0.9)


def reference_scale(**overrides):
    base = dict(eta=1e-6, group_size=8, batch_size=64, sample_temperature=1.0, steps=500, beta=1e-4)
    base.update(overrides)
    return ExperimentConfig(**base)


PRESETS = {
    "desk": ExperimentConfig,
    "paper-reference": reference_scale,
    "strategy": lambda **kw: ExperimentConfig(suite=strategy_suite(), **kw),
}
