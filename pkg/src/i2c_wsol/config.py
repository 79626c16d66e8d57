"""Run configuration: defaults, ``key = value`` file parsing, validation."""

from __future__ import annotations

import dataclasses
import math
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from .consistency import LossWeights
from .errors import ConfigError
from .model import ModelConfig
from .synthdata import SPLITS, DatasetSpec

MODES = ("plain", "sc", "sc_gc")
SWEEPABLE = ("lambda1", "lambda2", "K", "delta", "alpha")
WORKSPACE_ENV = "I2C_WORKSPACE"
# Stand-in for an unbounded warm-up; any epoch index is below it.
NEVER = sys.maxsize


@dataclass(frozen=True)
class RunConfig:
    # consistency
    mode: str = "sc_gc"
    delta: float = 0.7
    K: int = 3
    lambda1: float = 0.008
    lambda2: float = 0.001
    alpha: float = 0.05
    warmup_epochs: int = 1
    # batches
    categories_per_batch: int = 8
    images_per_category: int = 2
    # optimisation
    epochs: int = 10
    steps_per_epoch: int = 0  # 0: one pass worth of images per epoch
    lr: float = 0.05
    momentum: float = 0.9
    lr_decay_epochs: int = 0  # 0: constant rate; otherwise halve the rate every n epochs
    seed: int = 0
    # model
    feature_channels: int = 32
    width1: int = 16
    width2: int = 32
    # data
    num_classes: int = 8
    image_size: int = 64
    train_count: int = 2000
    val_count: int = 200
    test_count: int = 500
    data_seed: int = 0
    # evaluation
    k_top: int = 5
    tau: float = 0.0  # 0: tune on the validation split
    # sweep and render commands
    sweep_param: str = "lambda2"
    sweep_values: str = "0.0001,0.001,0.01,0.1"
    render_split: str = "test"
    render_samples: str = "0,1,2,3"
    # paths (relative ones resolve against $I2C_WORKSPACE, else the cwd)
    data_dir: str = "data"
    out_dir: str = "runs/default"
    checkpoint: str = ""  # empty: <out_dir>/model.ckpt

    def __post_init__(self):
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.delta < 1.0:
            problems.append(f"delta must lie in (0, 1), got {self.delta}")
        if self.K < 1:
            problems.append(f"K must be >= 1, got {self.K}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            problems.append("lambda1 and lambda2 must be non-negative")
        if not 0.0 < self.alpha < 1.0:
            problems.append(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.warmup_epochs < 0:
            problems.append("warmup_epochs must be non-negative")
        if not 1 <= self.categories_per_batch <= self.num_classes:
            problems.append(f"categories_per_batch must lie in [1, num_classes={self.num_classes}]")
        if self.images_per_category < 1:
            problems.append("images_per_category must be >= 1")
        if self.epochs < 0 or self.steps_per_epoch < 0 or self.lr_decay_epochs < 0:
            problems.append("epochs, steps_per_epoch and lr_decay_epochs must be non-negative")
        if not self.lr > 0:
            problems.append(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            problems.append(f"momentum must lie in [0, 1), got {self.momentum}")
        if min(self.feature_channels, self.width1, self.width2) < 1:
            problems.append("channel widths must be positive")
        if self.k_top < 1:
            problems.append("k_top must be >= 1")
        if not (self.tau == 0.0 or 0.0 < self.tau < 1.0):
            problems.append(f"tau must be 0 (tune) or lie in (0, 1), got {self.tau}")
        if self.sweep_param not in SWEEPABLE:
            problems.append(f"sweep_param must be one of {SWEEPABLE}, got {self.sweep_param!r}")
        if self.render_split not in SPLITS:
            problems.append(f"render_split must be one of {SPLITS}, got {self.render_split!r}")
        if problems:
            raise ConfigError("; ".join(problems))
        self.sweep_grid()
        self.render_ids()
        # Sub-configs validate the remaining fields.
        self.model_config()
        self.dataset_spec()

    # -- derived views ------------------------------------------------------

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            input_size=self.image_size,
            num_classes=self.num_classes,
            feature_channels=self.feature_channels,
            widths=(self.width1, self.width2),
        )

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            num_classes=self.num_classes,
            image_size=self.image_size,
            counts={"train": self.train_count, "val": self.val_count, "test": self.test_count},
            # object half-extents scale with the canvas: 8..20 pixels at 64x64
            min_half_extent=max(2, self.image_size // 8),
            max_half_extent=self.image_size * 5 // 16,
            seed=self.data_seed,
        )

    def loss_weights(self) -> LossWeights:
        l1 = 0.0 if self.mode == "plain" else self.lambda1
        l2 = self.lambda2 if self.mode == "sc_gc" else 0.0
        return LossWeights(l1, l2, self.warmup_epochs)

    def sweep_grid(self) -> list:
        """Typed values of ``sweep_param`` listed in ``sweep_values``."""
        items = [v for v in self.sweep_values.split(",") if v.strip()]
        if not items:
            raise ConfigError("sweep_values is empty")
        return [coerce(self.sweep_param, v) for v in items]

    def render_ids(self) -> list[int]:
        try:
            ids = [int(v) for v in self.render_samples.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"render_samples must be comma-separated integers, got {self.render_samples!r}") from exc
        if not ids or min(ids) < 0:
            raise ConfigError(f"render_samples must list non-negative ids, got {self.render_samples!r}")
        return ids

    @property
    def batch_size(self) -> int:
        return self.categories_per_batch * self.images_per_category

    def epoch_steps(self) -> int:
        if self.steps_per_epoch:
            return self.steps_per_epoch
        return math.ceil(self.train_count / self.batch_size)

    def path(self, key: str) -> Path:
        value = getattr(self, key)
        if key == "checkpoint" and not value:
            return self.path("out_dir") / "model.ckpt"
        p = Path(value)
        if not p.is_absolute():
            p = Path(os.environ.get(WORKSPACE_ENV, ".")) / p
        return p

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "warmup_epochs" and value == NEVER:
                value = "inf"
            lines.append(f"{f.name} = {_format(value)}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    text = raw.strip()
    try:
        if kind == "int":
            if key == "warmup_epochs" and text.lower() in ("inf", "infinity", "never"):
                return NEVER
            return int(text)
        if kind == "float":
            value = float(text)
            if not math.isfinite(value):
                raise ValueError("non-finite")
            return value
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from exc
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = coerce(key, raw)
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (already typed or raw strings)."""
    values = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise
        except (OSError, UnicodeDecodeError) as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        values.update(parse_config_text(text, str(p)))
    for key, value in (overrides or {}).items():
        values[key] = coerce(key, value) if isinstance(value, str) else value
    unknown = set(values) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**values)
