"""Experiment configuration: parsing, validation, defaults.

Configs are plain JSON with one object per section. Unknown keys are
rejected everywhere so typos fail loudly at parse time rather than
silently training the wrong model.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Union

from .errors import ConfigError
from .model import ACTIVATIONS, AGGREGATIONS, DECODERS, POOLINGS
from .objectives import REGULARIZER_MODES
from .schedules import ScheduleConfig


def _check_keys(section: str, given: dict, allowed):
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in section '{section}'")


def _build(cls, section: str, given: dict):
    if not isinstance(given, dict):
        raise ConfigError(f"section '{section}' must be an object")
    names = [f.name for f in fields(cls)]
    _check_keys(section, given, names)
    try:
        return cls(**given)
    except TypeError as e:
        raise ConfigError(f"section '{section}': {e}") from e


@dataclass
class DatasetConfig:
    """Synthetic blobs by default; kind "fsds" reads a binary dataset file."""

    kind: str = "synthetic"
    num_classes: int = 100
    per_class: int = 40
    input_dim: int = 16
    class_spread: float = 3.0
    noise: float = 1.0
    path: Optional[str] = None

    def validate(self):
        if self.kind not in ("synthetic", "fsds"):
            raise ConfigError(f"dataset kind must be 'synthetic' or 'fsds', got {self.kind!r}")
        if self.kind == "fsds" and not self.path:
            raise ConfigError("dataset kind 'fsds' requires a path")
        if self.kind == "synthetic":
            if min(self.num_classes, self.per_class, self.input_dim) < 1:
                raise ConfigError("synthetic dataset sizes must be positive")
            if self.class_spread < 0 or self.noise <= 0:
                raise ConfigError("synthetic dataset needs class_spread >= 0 and noise > 0")


@dataclass
class ModelConfig:
    encoder_widths: list = field(default_factory=lambda: [64, 64])
    activation: str = "tanh"
    feature_dim: int = 16
    decoder: str = "linear"
    decoder_widths: list = field(default_factory=lambda: [32])
    aggregation: str = "prototype"
    pooling: str = "mean"
    mean_head_widths: list = field(default_factory=list)
    var_head_widths: list = field(default_factory=list)
    r_widths: list = field(default_factory=list)
    input_dim: Optional[int] = None

    def validate(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {tuple(ACTIVATIONS)}")
        if self.decoder not in DECODERS:
            raise ConfigError(f"decoder must be one of {DECODERS}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        for name in ("encoder_widths", "decoder_widths", "mean_head_widths", "var_head_widths", "r_widths"):
            widths = getattr(self, name)
            if any(int(w) < 1 for w in widths):
                raise ConfigError(f"{name} must hold positive integers")


@dataclass
class EpisodeConfig:
    num_ways: int = 5
    num_shots: int = 1
    num_queries: int = 15

    def validate(self):
        if min(self.num_ways, self.num_shots, self.num_queries) < 1:
            raise ConfigError("episode shape values must be positive")


@dataclass
class ObjectiveConfig:
    mode: str = "mmd"
    mc_samples: int = 10
    mmd_samples: int = 32
    bandwidth: Union[float, str] = "median"

    def validate(self):
        if self.mode not in REGULARIZER_MODES:
            raise ConfigError(f"objective mode must be one of {REGULARIZER_MODES}")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        if self.mode == "mmd" and self.mmd_samples < 2:
            raise ConfigError("mmd_samples must be >= 2 when mode is 'mmd'")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "median":
                raise ConfigError("bandwidth must be a positive number or 'median'")
        elif self.bandwidth <= 0:
            raise ConfigError("bandwidth must be positive")


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-4
    tasks_per_batch: int = 16
    steps: int = 2000
    eval_interval: int = 200
    eval_tasks: int = 600

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.tasks_per_batch < 1:
            raise ConfigError("tasks_per_batch must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.eval_interval < 0:
            raise ConfigError("eval_interval must be >= 0 (0 disables mid-run eval)")
        if self.eval_tasks < 1:
            raise ConfigError("eval_tasks must be >= 1")


@dataclass
class TrainConfig:
    """Full experiment description; everything downstream reads from here."""

    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0

    def validate(self):
        self.dataset.validate()
        self.model.validate()
        self.episode.validate()
        self.objective.validate()
        self.optimizer.validate()
        needed = self.episode.num_shots + self.episode.num_queries
        if self.dataset.kind == "synthetic" and self.dataset.per_class < needed:
            raise ConfigError(
                f"dataset per_class ({self.dataset.per_class}) is below shots+queries ({needed})"
            )
        if self.dataset.kind == "synthetic" and self.model.input_dim is not None:
            if self.model.input_dim != self.dataset.input_dim:
                raise ConfigError(
                    f"model input_dim ({self.model.input_dim}) conflicts with dataset "
                    f"input_dim ({self.dataset.input_dim})"
                )
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
        _check_keys("(root)", raw, [f.name for f in fields(cls)])
        dataset = _build(DatasetConfig, "dataset", raw.get("dataset", {}))
        model = _build(ModelConfig, "model", raw.get("model", {}))
        episode = _build(EpisodeConfig, "episode", raw.get("episode", {}))
        objective = _build(ObjectiveConfig, "objective", raw.get("objective", {}))
        optimizer = _build(OptimizerConfig, "optimizer", raw.get("optimizer", {}))
        sched_raw = dict(raw.get("schedule", {}))
        _check_keys("schedule", sched_raw, [f.name for f in fields(ScheduleConfig)])
        # The schedule is laid out over the training horizon unless pinned.
        sched_raw.setdefault("total_steps", max(optimizer.steps, 1))
        schedule = ScheduleConfig(**sched_raw)
        seed = raw.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        cfg = cls(
            dataset=dataset,
            model=model,
            episode=episode,
            objective=objective,
            schedule=schedule,
            optimizer=optimizer,
            seed=seed,
        )
        return cfg.validate()


def load_train_config(path: str) -> TrainConfig:
    """Parse and validate a JSON config file."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
    return TrainConfig.from_dict(raw)
