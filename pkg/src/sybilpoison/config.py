"""Experiment configuration: flat ``key = value`` files layered under CLI flags."""
from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .attack import METHODS, SCHEMES, malicious_count
from .models import MODEL_NAMES

OUTPUT_ENV = "SYBILPOISON_OUTPUT"
DATASETS = ("mnist", "fmnist", "synthetic")
PARTITIONS = ("dirichlet", "iid")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "mnist"
    data_dir: str = "data"
    model: str = "fc-mnist"
    num_clients: int = 50
    m_pct: float = 40.0
    v: int = 5
    partition: str = "dirichlet"
    alpha: float = 0.5
    rounds: int = 300
    epochs: int = 5
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    participation: float = 1.0
    method: str = "ours"  # ours | fcm | lm | none
    scheme: str = "online-global"
    r_pre: int = 20
    attack_window: str = "last:50"
    poison_steps: int = 300
    poison_lr: float = 1.0
    epsilon: float = math.inf
    poison_count: int = 32
    y_tar: int = 1
    y_adv: int = 7
    reverse_direction: bool = False
    sybil_weight: float = 1.0
    seed: int = 0
    synthetic_per_class: int = 200
    synthetic_test_per_class: int = 100
    synthetic_side: int = 28
    synthetic_noise: float = 0.3
    synthetic_spread: float = 0.1
    gma_baseline: str = ""
    output_dir: str = ""

    def window(self) -> tuple:
        """Attack rounds as a half-open range."""
        return parse_window(self.attack_window, self.rounds)

    def num_malicious(self) -> int:
        return malicious_count(self.num_clients, self.m_pct)

    def validate(self) -> "ExperimentConfig":
        if self.y_tar == self.y_adv:
            raise ConfigError(f"y_tar and y_adv must differ (both {self.y_tar})")
        for key in ("y_tar", "y_adv"):
            if not 0 <= getattr(self, key) < 10:
                raise ConfigError(f"{key} must lie in [0, 10)")
        choices = {"dataset": DATASETS, "model": MODEL_NAMES, "method": METHODS + ("none",),
                   "scheme": SCHEMES, "partition": PARTITIONS}
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {', '.join(allowed)}; got {getattr(self, key)!r}")
        positive = ("num_clients", "rounds", "batch_size", "poison_count", "synthetic_side")
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        for key in ("epochs", "v", "poison_steps", "r_pre", "synthetic_per_class", "synthetic_test_per_class"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0")
        for key in ("alpha", "poison_lr", "epsilon", "sybil_weight"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be > 0")
        if not 0 <= self.m_pct <= 100:
            raise ConfigError("m_pct must lie in [0, 100]")
        if not 0 < self.participation <= 1:
            raise ConfigError("participation must lie in (0, 1]")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("lr must be >= 0 and momentum in [0, 1)")
        try:
            self.num_malicious()
        except ValueError as exc:
            raise ConfigError(f"m_pct: {exc}") from None
        try:
            self.window()
        except ValueError as exc:
            raise ConfigError(f"attack_window: {exc}") from None
        return self

    def resolved_output(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        root = os.environ.get(OUTPUT_ENV, "runs")
        return Path(root) / f"{self.method}-{self.dataset}-s{self.seed}"


FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def parse_window(text: str, rounds: int) -> tuple:
    """``last:K``, ``A:B`` (half-open) or ``none``."""
    text = text.strip()
    if text in ("", "none"):
        return (0, 0)
    if text.startswith("last:"):
        k = int(text[5:])
        if k < 0:
            raise ValueError("window length must be >= 0")
        return (max(rounds - k, 0), rounds)
    a, sep, b = text.partition(":")
    if not sep:
        raise ValueError(f"cannot parse window {text!r}; use last:K, A:B or none")
    start, stop = int(a), int(b)
    if start < 0 or stop < start:
        raise ValueError(f"bad window {text!r}")
    return (start, stop)


def _coerce(key: str, raw):
    kind = FIELD_TYPES[key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {text!r}") from None
    return text


def read_config_file(path) -> dict:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r} ({path}:{lineno})")
        values[key] = _coerce(key, value)
    return values


def build_config(path=None, overrides=None) -> ExperimentConfig:
    """Defaults, then the file, then explicit overrides; the result is validated."""
    values = {}
    if path is not None:
        values.update(read_config_file(path))
    for key, raw in (overrides or {}).items():
        key = key.replace("-", "_")
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return ExperimentConfig(**values).validate()


def to_text(config: ExperimentConfig) -> str:
    lines = []
    for key, value in asdict(config).items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def with_overrides(config: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(config, **changes).validate()
