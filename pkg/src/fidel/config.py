"""Experiment configuration: a flat ``key = value`` text format with typed fields."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .nn.architectures import VICTIM_BATCH, VICTIM_LR

DATASETS = ("mnist", "cifar10")
ARCHS = ("fcnn", "cnn")
ACTIVATIONS = ("relu", "sigmoid", "tanh")
BATCH_MODES = ("paper-batch-50", "full-batch")


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _list(cast):
    def parse(text: str):
        return tuple(cast(item.strip()) for item in text.split(",") if item.strip())

    return parse


def _optional_path(text: str):
    return text.strip() or None


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    arch: str = "fcnn"
    activations: tuple = ("relu",)
    dropouts: tuple = (True,)
    dropout_rate: float = 0.5
    n_values: tuple = (30,)
    rounds: int = 200
    pretrain_epochs: int = 1
    batch_mode: str = "paper-batch-50"
    lr: float = VICTIM_LR
    seed: int = 0
    threshold: float = 0.98
    continue_training: bool = False
    retrain_distance: float = 0.0
    generator_budget: float = 600.0
    generator_epochs: int = 0  # 0: train until the budget runs out
    generator_batch: int = 16
    generator_lr: float = 0.001
    renormalize: bool = False
    threads: int = 1
    output: str = "out"
    data_root: str | None = None
    victim_path: str | None = None  # pretrained victim snapshot to reuse
    generator_path: str | None = None  # trained generator to reuse

    _PARSERS = {
        "activations": _list(str),
        "dropouts": _list(_bool),
        "n_values": _list(int),
        "continue_training": _bool,
        "renormalize": _bool,
        "data_root": _optional_path,
        "victim_path": _optional_path,
        "generator_path": _optional_path,
    }

    def client_batch(self, n: int) -> int:
        return VICTIM_BATCH if self.batch_mode == "paper-batch-50" else n

    def validate(self) -> "ExperimentConfig":
        checks = [
            (self.dataset in DATASETS, f"dataset must be one of {DATASETS}"),
            (self.arch in ARCHS, f"arch must be one of {ARCHS}"),
            (bool(self.activations) and all(a in ACTIVATIONS for a in self.activations),
             f"activations must be drawn from {ACTIVATIONS}"),
            (bool(self.dropouts), "dropouts must list at least one flag"),
            (0.0 < self.dropout_rate < 1.0, "dropout_rate must lie in (0, 1)"),
            (bool(self.n_values) and all(n >= 1 for n in self.n_values), "n_values must be positive"),
            (self.rounds >= 1, "rounds must be >= 1"),
            (self.pretrain_epochs >= 0, "pretrain_epochs must be >= 0"),
            (self.batch_mode in BATCH_MODES, f"batch_mode must be one of {BATCH_MODES}"),
            (self.lr > 0, "lr must be positive"),
            (0.0 < self.threshold <= 1.0, "threshold must lie in (0, 1]"),
            (self.retrain_distance >= 0, "retrain_distance must be >= 0"),
            (self.generator_budget > 0 or self.generator_epochs > 0, "generator needs a budget or epochs"),
            (self.generator_batch >= 1, "generator_batch must be >= 1"),
            (self.generator_lr > 0, "generator_lr must be positive"),
            (self.threads >= 1, "threads must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    # -- text form ------------------------------------------------------------

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def set(self, key: str, text: str) -> "ExperimentConfig":
        key = key.strip().replace("-", "_")
        if key not in self.keys():
            raise ConfigError(f"unknown config key {key!r}")
        parser = self._PARSERS.get(key) or type(getattr(ExperimentConfig(), key))
        try:
            value = parser(text.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {text!r}") from exc
        return dataclasses.replace(self, **{key: value})

    def override(self, pairs) -> "ExperimentConfig":
        cfg = self
        for item in pairs:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"expected key=value, got {item!r}")
            cfg = cfg.set(key, value)
        return cfg

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        cfg = cls()
        for number, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {number}: expected key = value, got {raw!r}")
            cfg = cfg.set(key, value)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.parse(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def dumps(self) -> str:
        lines = []
        for key in self.keys():
            value = getattr(self, key)
            if isinstance(value, tuple):
                value = ",".join(str(v).lower() if isinstance(v, bool) else str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            elif value is None:
                value = ""
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"
