"""Run configuration: JSON file, flag overrides, snapshot."""
from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .losses import LossWeights
from .networks.specs import PROFILES
from .pose import DEFAULT_DILATE_RADIUS, DEFAULT_SIGMA


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    profile: str = "market"
    image_size: Optional[tuple[int, int]] = None  # None: profile default
    width_divisor: int = 1
    stage: int = 1
    steps: int = 1000
    batch_size: int = 8
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 0  # 0: final checkpoint only
    log_every: int = 1
    sample_every: int = 0  # 0: samples only with checkpoints
    sigma: float = DEFAULT_SIGMA
    dilate_radius: int = DEFAULT_DILATE_RADIUS
    merge_weights: tuple[float, float] = (1.0, 1.0)
    label_smoothing: float = 0.0

    def __post_init__(self) -> None:
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if self.image_size is not None:
            self.image_size = tuple(int(v) for v in self.image_size)
        self.merge_weights = tuple(float(v) for v in self.merge_weights)
        self.validate()

    def validate(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigError(f"profile: must be one of {PROFILES}, got {self.profile!r}")
        if self.stage not in (1, 2):
            raise ConfigError(f"stage: must be 1 or 2, got {self.stage}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.width_divisor < 1:
            raise ConfigError("width_divisor must be >= 1")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.image_size is not None and len(self.image_size) != 2:
            raise ConfigError("image_size must be [height, width]")
        if len(self.merge_weights) != 2:
            raise ConfigError("merge_weights must have two entries")

    @property
    def real_label(self) -> float:
        return 1.0 - self.label_smoothing

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size) if self.image_size else None
        d["merge_weights"] = list(self.merge_weights)
        return d


@dataclass
class RunConfig(TrainConfig):
    dataset_root: Optional[str] = None
    pairs_file: str = "pairs.csv"
    run_dir: Optional[str] = None
    g1_checkpoint: Optional[str] = None
    resume_from: Optional[str] = None

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in vars(self).items() if k in names})


LOSS_KEYS = tuple(f.name for f in fields(LossWeights))


def _position(text: str, key: str) -> str:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    if not m:
        return ""
    line = text.count("\n", 0, m.start()) + 1
    col = m.start() - text.rfind("\n", 0, m.start())
    return f"line {line}, column {col}"


def parse_config(data: dict, text: str = "", source: str = "<config>", cls=RunConfig):
    allowed = {f.name for f in fields(cls)}
    for key, value in data.items():
        if key not in allowed:
            raise ConfigError(f"{source}: unknown key {key!r} ({_position(text, key)})")
        if key == "loss_weights":
            if not isinstance(value, dict):
                raise ConfigError(f"{source}: loss_weights must be an object ({_position(text, key)})")
            for sub in value:
                if sub not in LOSS_KEYS:
                    raise ConfigError(f"{source}: unknown key loss_weights.{sub!r} ({_position(text, sub)})")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path: str | Path, cls=RunConfig):
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return parse_config(data, text, str(path), cls)


def with_overrides(cfg, overrides: dict[str, Any]):
    """Apply flat overrides; ``lambda_*`` keys address ``loss_weights``."""
    data = cfg.to_dict()
    for key, value in overrides.items():
        if value is None:
            continue
        if key in LOSS_KEYS:
            data["loss_weights"][key] = value
        else:
            data[key] = value
    return parse_config(data, source="flags", cls=type(cfg))


def save_config(cfg, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def flat_defaults(cls=RunConfig) -> dict[str, Any]:
    """Every key with its default, ``loss_weights`` flattened."""
    out = {}
    for f in dataclasses.fields(cls):
        if f.name == "loss_weights":
            out.update(asdict(LossWeights()))
        elif f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        else:
            out[f.name] = f.default_factory()
    return out
