"""Run configuration: a flat YAML mapping of documented keys plus
``key=value`` overrides. Epsilon and step sizes accept fractions such as
``8/255``. Unknown keys are rejected."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Any

import yaml

from .attacks import AttackConfig, default_alpha
from .corruptions import KINDS
from .evaluation import default_eps_grid
from .models import ArchConfig
from .ss_tasks import SSTask
from .training import ConfigError, TrainConfig, TrainMode, mode_attack


def parse_number(v) -> float:
    """``0.5``, ``"0.5"``, ``"8/255"`` -> float (fractions converted exactly)."""
    if isinstance(v, bool):
        raise ConfigError(f"expected a number, got {v!r}")
    if isinstance(v, (int, float)):
        return float(v)
    try:
        return float(Fraction(str(v).strip()))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"expected a number or fraction, got {v!r}") from None


@dataclass
class RunConfig:
    # model
    arch: str = "tiny-cnn"
    width: float = 1.0
    model_id: str | None = None
    # data
    dataset: str = "cifar10"
    data_dir: str | None = None
    subset: int = 0
    val_fraction: float = 0.15
    synthetic_n: int = 512
    image_size: int = 32
    augment: bool = True
    # self-supervision
    mode: str = "T0"
    lambda1: float = 0.0
    lambda2: float = 1.0
    task: str = "rotation"
    jigsaw_grid: int = 2
    jigsaw_count: int = 24
    # attack used during training
    norm: str = "linf"
    epsilon: float = 8 / 255
    alpha: float | None = None
    steps: int = 10
    random_start: bool = True
    use_ss_loss: bool | None = None
    attack_ss: bool | None = None
    # optimisation
    epochs: int = 100
    batch_size: int = 128
    lr: float = 0.1
    lr_step: int = 40
    lr_gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    checkpoint_every: int = 10
    seed: int = 0
    init_checkpoint: str | None = None
    # evaluation
    eval_steps: int = 20
    eval_restarts: int = 1
    eval_eps: list[float] | None = None
    eval_subset: int = 0
    eval_batch_size: int = 256
    corruptions: list[str] = field(default_factory=lambda: list(KINDS))
    severities: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    corruption_dir: str | None = None

    # derived objects --------------------------------------------------

    def attack_config(self) -> AttackConfig:
        alpha = self.alpha if self.alpha is not None else default_alpha(self.norm, self.epsilon, self.steps)
        base = AttackConfig(self.norm, self.epsilon, alpha, self.steps, self.random_start, lambda2=self.lambda2)
        derived = mode_attack(self.mode, base) if self.mode in ("T0", "T1", "T2", "T3", "T_rotonly") else base
        if self.use_ss_loss is not None:
            derived = dataclasses.replace(derived, use_ss_loss=self.use_ss_loss)
        if self.attack_ss is not None:
            derived = dataclasses.replace(derived, attack_ss=self.attack_ss)
        return derived

    def eval_attack_base(self) -> AttackConfig:
        """Training attack with the SS terms removed; test-time attacks use the supervised loss only."""
        return dataclasses.replace(self.attack_config(), use_ss_loss=False, attack_ss=False)

    def ss_task(self) -> SSTask:
        if self.task == "jigsaw":
            return SSTask("jigsaw", self.jigsaw_grid, self.jigsaw_count, self.seed)
        return SSTask(self.task)

    def train_config(self) -> TrainConfig:
        cfg = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, lr_step=self.lr_step,
            lr_gamma=self.lr_gamma, momentum=self.momentum, weight_decay=self.weight_decay, seed=self.seed,
            mode=TrainMode(self.mode, self.lambda1, self.attack_config()), task=self.ss_task(),
            augment=self.augment, eval_batch_size=self.eval_batch_size, checkpoint_every=self.checkpoint_every,
        )
        cfg.validate()
        return cfg

    def arch_config(self, input_shape, num_classes: int) -> ArchConfig:
        return ArchConfig(self.arch, self.width, tuple(input_shape), num_classes, self.ss_task().class_count)

    def eps_grid(self) -> list[float]:
        if self.eval_eps is not None:
            return list(self.eval_eps)
        return default_eps_grid(self.norm)

    def validate(self) -> None:
        for c in self.corruptions:
            if c not in KINDS:
                raise ConfigError(f"unknown corruption {c!r}; valid kinds: {', '.join(KINDS)}")
        if self.eval_restarts < 1:
            raise ConfigError(f"eval_restarts={self.eval_restarts} must be at least 1")
        for s in self.severities:
            if not 1 <= s <= 5:
                raise ConfigError(f"severity {s} outside [1, 5]")
        if self.task not in ("rotation", "jigsaw"):
            raise ConfigError(f"task={self.task!r} must be rotation or jigsaw")
        self.train_config()

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_NUMERIC = {"epsilon", "alpha", "lambda1", "lambda2", "lr", "lr_gamma", "momentum", "weight_decay",
            "width", "val_fraction"}


def _coerce(name: str, value):
    ftype = {f.name: f.type for f in fields(RunConfig)}[name]
    if value is None:
        if "None" not in ftype:
            raise ConfigError(f"{name} may not be null")
        return None
    if name in _NUMERIC:
        return parse_number(value)
    if name == "eval_eps":
        return [parse_number(v) for v in (value if isinstance(value, list) else [value])]
    if name in ("corruptions",):
        return [str(v) for v in (value if isinstance(value, list) else [value])]
    if name == "severities":
        return [int(v) for v in (value if isinstance(value, list) else [value])]
    if ftype.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false, got {value!r}")
        return value
    if ftype.startswith("int"):
        if isinstance(value, bool) or int(value) != value:
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return int(value)
    return str(value)


def build_config(values: dict[str, Any]) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
    cfg.validate()
    return cfg


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    return key.strip(), yaml.safe_load(raw) if raw.strip() else None


def load_config(path=None, overrides=(), **extra) -> RunConfig:
    values: dict[str, Any] = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a mapping of keys to values")
        values.update(loaded)
    for item in overrides:
        k, v = parse_override(item)
        values[k] = v
    values.update({k: v for k, v in extra.items() if v is not None})
    return build_config(values)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")
