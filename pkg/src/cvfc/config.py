"""Run configuration: one JSON-serializable document drives everything."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

from .errors import ConfigError

ARCHS = ("cvfc", "mini38", "mini50", "tiny38", "tiny50")
LOSS_NORMS = ("l1", "l2")
CROSS_VARIANTS = ("as_written", "one_two")
LR_SCHEDULES = ("constant", "poly")


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run depends on besides the dataset bytes.

    ``arch`` selects the full three-branch model or a single-branch
    classification-only baseline used by ablations.
    """

    seed: int = 0
    epochs: int = 100
    lr: float = 0.006
    weight_decay: float = 0.01
    momentum: float = 0.0
    lr_schedule: str = "constant"
    batch_size: int = 8
    image_size: int = 48
    class_names: tuple[str, ...] = ("tumor", "stroma", "normal")
    arch: str = "cvfc"
    branch1: str = "mini38"
    branch2: str = "mini50"
    branch3: str = "mini38"
    attention_dim: int | None = None
    attention_resolution: int | None = None
    loss_norm: str = "l1"
    cross_variant: str = "as_written"
    bg_threshold: float = 0.3
    score_gate: float = 0.5
    augment: bool = True
    normalize_mean: float = 0.5
    normalize_std: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.image_size < 8:
            raise ConfigError("image_size must be >= 8")
        if not self.class_names:
            raise ConfigError("class_names must be non-empty")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}")
        if self.loss_norm not in LOSS_NORMS:
            raise ConfigError(f"loss_norm must be one of {LOSS_NORMS}")
        if self.cross_variant not in CROSS_VARIANTS:
            raise ConfigError(f"cross_variant must be one of {CROSS_VARIANTS}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if not 0 <= self.bg_threshold < 1:
            raise ConfigError("bg_threshold must be in [0, 1)")
        if not 0 <= self.score_gate <= 1:
            raise ConfigError("score_gate must be in [0, 1]")
        if self.normalize_std <= 0:
            raise ConfigError("normalize_std must be > 0")

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_names"] = list(self.class_names)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(d)

    def with_overrides(self, **kwargs) -> "TrainConfig":
        kwargs = {k: v for k, v in kwargs.items() if v is not None}
        return replace(self, **kwargs) if kwargs else self

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).digest()
