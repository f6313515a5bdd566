"""Model and training configuration, with flat ``key=value`` text persistence."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError


@dataclass
class ModelConfig:
    image_size: int = 96
    frames: int = 8
    in_channels: int = 3
    channels: int = 32
    feat_dim: int = 32
    pc_channels: int = 32
    feature_stride: int = 8
    anchor_sizes: tuple[float, ...] = (8.0, 16.0, 32.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    num_proposals: int = 16
    ref_offset: int = 2
    roi_size: int = 7
    pre_nms_top: int = 200
    rpn_nms_iou: float = 0.7
    rpn_sample: int = 64
    head_bg_iou: float = 0.5
    num_poses: int = 3
    num_interactions: int = 3
    tam_enabled: bool = True
    transpc_enabled: bool = True
    transpc_blocks: int = 3
    person_person_only: bool = False
    coupled_mode: bool = False
    memory_window: int = 4
    attention_scale: bool = False
    shared_kv: bool = False
    precision: str = "float32"

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    @property
    def feature_size(self) -> int:
        return self.image_size // self.feature_stride

    @property
    def keyframe(self) -> int:
        return self.frames // 2

    def validate(self) -> None:
        if self.transpc_enabled and self.transpc_blocks < 1:
            raise ConfigError("transpc_blocks must be >= 1 when TransPC is enabled")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, not {self.precision!r}")
        if not (0 <= self.keyframe - self.ref_offset and self.keyframe + self.ref_offset < self.frames):
            raise ConfigError("reference frames fall outside the clip")
        if self.image_size % self.feature_stride:
            raise ConfigError("image_size must be a multiple of feature_stride")


@dataclass
class TrainConfig:
    seed: int = 0
    iterations: int = 2000
    base_lr: float = 0.001
    warmup_iters: int = 100
    decay_points: tuple[int, ...] = (1200, 1600)
    decay_factor: float = 0.1
    batch_size: int = 4
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    train_handoff_iou: float = 0.8
    infer_confidence: float = 0.8
    nms_iou: float = 0.5
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.iterations < 0:
            raise ConfigError("iterations must be nonnegative")
        if self.iterations and not self.warmup_iters < self.iterations:
            raise ConfigError("warmup_iters must be smaller than iterations")
        pts = list(self.decay_points)
        if pts != sorted(pts) or len(set(pts)) != len(pts):
            raise ConfigError("decay_points must be strictly ascending")
        if self.iterations and pts and pts[-1] >= self.iterations:
            raise ConfigError("decay_points must be smaller than iterations")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        self.model.validate()

    def replace(self, **changes) -> "TrainConfig":
        """Copy with changes; keys may name TrainConfig or ModelConfig fields."""
        top = {f.name for f in dataclasses.fields(TrainConfig)}
        mine = {k: v for k, v in changes.items() if k in top}
        model = {k: v for k, v in changes.items() if k not in top}
        bad = set(model) - {f.name for f in dataclasses.fields(ModelConfig)}
        if bad:
            raise ConfigError(f"unknown config keys: {sorted(bad)}")
        return dataclasses.replace(self, model=dataclasses.replace(self.model, **model), **mine)

    def to_flat(self) -> dict[str, object]:
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "model"}
        out.update(dataclasses.asdict(self.model))
        return out

    @classmethod
    def from_flat(cls, values: dict[str, object]) -> "TrainConfig":
        return cls().replace(**{k: coerce(k, v) for k, v in values.items()})


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig) + dataclasses.fields(ModelConfig)}


def coerce(key: str, value):
    """Parse a textual config value according to the field's declared type."""
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    if not isinstance(value, str):
        return tuple(value) if isinstance(value, list) else value
    kind = str(_FIELD_TYPES[key])
    text = value.strip()
    try:
        if kind == "bool":
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind.startswith("tuple[int"):
            return tuple(int(v) for v in text.split(",") if v.strip())
        if kind.startswith("tuple[float"):
            return tuple(float(v) for v in text.split(",") if v.strip())
        return text
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {value!r}") from e


def format_value(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def write_kv(values: dict[str, object], path) -> None:
    Path(path).write_text("".join(f"{k}={format_value(v)}\n" for k, v in values.items()))


def read_kv(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_train_config(path) -> TrainConfig:
    return TrainConfig.from_flat(read_kv(path))
