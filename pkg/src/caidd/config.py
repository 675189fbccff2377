"""Training configuration and its flat ``key = value`` text form.

Nested sections use dotted keys (``denoiser.base_channels = 32``); tuples
are comma separated (``denoiser.attention_placements = low,mid,high``);
``none`` stands for an unset optional value. Lines starting with ``#`` are
comments.
"""

from __future__ import annotations

import dataclasses
import hashlib
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .denoiser import DenoiserConfig
from .errors import ConfigError
from .experts import ExpertConfig
from .losses import GAZE_MODES, PARSE_MODES, LossWeights
from .schedule import ScheduleConfig


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"  # synthetic | folder
    path: str | None = None
    n: int = 8
    n_identities: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("synthetic", "folder"):
            raise ConfigError(f"data.kind must be 'synthetic' or 'folder', got {self.kind!r}")
        if self.kind == "folder" and not self.path:
            raise ConfigError("data.path is required when data.kind = folder")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_size: int = 16
    learning_rate: float = 1e-4
    warmup_steps: int | None = None  # None: 1% of steps
    eval_every: int = 500
    checkpoint_every: int = 1000
    seed: int = 0
    grad_clip: float = 1.0
    expert_t_max: int = 500
    parse_loss_mode: str = "dice"
    gaze_loss_mode: str = "angular"
    gaze_reference: str = "source"  # source | target
    weights: LossWeights = field(default_factory=LossWeights)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    experts: ExpertConfig = field(default_factory=ExpertConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        w = self.warmup
        if w < 0 or (self.steps > 0 and w >= self.steps) or w > self.steps:
            raise ConfigError(f"warmup_steps={w} must satisfy 0 <= warmup_steps < steps")
        if self.parse_loss_mode not in PARSE_MODES:
            raise ConfigError(f"parse_loss_mode must be one of {PARSE_MODES}")
        if self.gaze_loss_mode not in GAZE_MODES:
            raise ConfigError(f"gaze_loss_mode must be one of {GAZE_MODES}")
        if self.gaze_reference not in ("source", "target"):
            raise ConfigError("gaze_reference must be 'source' or 'target'")
        if not 1 <= self.expert_t_max <= self.schedule.T:
            raise ConfigError(f"expert_t_max must lie in 1..schedule.T={self.schedule.T}")
        if self.experts.image_size not in (None, self.denoiser.image_size):
            raise ConfigError("experts.image_size must match denoiser.image_size")
        if self.eval_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("eval_every and checkpoint_every must be >= 0")

    @property
    def warmup(self) -> int:
        return self.steps // 100 if self.warmup_steps is None else self.warmup_steps

    @property
    def expert_config(self) -> ExpertConfig:
        return dataclasses.replace(self.experts, image_size=self.denoiser.image_size)


# -- flat text form ---------------------------------------------------------


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_flat(cfg, prefix: str = "") -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(to_flat(v, key + "."))
        else:
            out[key] = _format(v)
    return out


def _parse_scalar(tp, text: str, key: str):
    try:
        if tp is bool:
            low = text.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {tp.__name__}") from None
    raise ConfigError(f"{key}: unsupported field type {tp!r}")


def _parse(tp, text: str, key: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if text.strip().lower() in ("none", ""):
            return None
        return _parse(args[0], text, key)
    if origin is tuple:
        (inner, *_) = typing.get_args(tp)
        parts = [p.strip() for p in text.replace("+", ",").split(",") if p.strip()]
        return tuple(_parse_scalar(inner, p, key) for p in parts)
    return _parse_scalar(tp, text, key)


def from_flat(cls, flat: dict[str, str], prefix: str = "", _seen: set | None = None):
    """Build ``cls`` from dotted keys; unknown keys raise ``ConfigError``."""
    top = _seen is None
    seen = set() if top else _seen
    kwargs = {}
    hints = _hints(cls)
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            sub = {k for k in flat if k.startswith(key + ".")}
            if sub:
                kwargs[f.name] = from_flat(tp, flat, key + ".", seen)
            continue
        if key in flat:
            kwargs[f.name] = _parse(tp, flat[key], key)
            seen.add(key)
    if top:
        unknown = sorted(set(flat) - seen)
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def parse_text(text: str) -> dict[str, str]:
    flat = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        flat[k.strip()] = v.strip()
    return flat


def dump_text(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in sorted(to_flat(cfg).items()))


def load_config(path, overrides=()) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc}") from exc
    return build_config(parse_text(text), overrides)


def build_config(flat: dict[str, str], overrides=()) -> TrainConfig:
    flat = dict(flat)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        flat[k.strip()] = v.strip()
    return from_flat(TrainConfig, flat)


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(dump_text(cfg).encode()).hexdigest()


def replace_path(cfg, dotted: str, value):
    """``dataclasses.replace`` for a dotted field path."""
    head, _, rest = dotted.partition(".")
    if not rest:
        return dataclasses.replace(cfg, **{head: value})
    return dataclasses.replace(cfg, **{head: replace_path(getattr(cfg, head), rest, value)})
