"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthConfig
from .losses import LossWeights
from .timeline import ValidationError
from .wsqg import WsqgConfig


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-3
    lr_after: float = 2e-4
    lr_drop_epoch: int = 10
    epochs: int = 15
    seed: int = 0
    d: int = 32
    softmax_similarity: bool = True
    max_span_frames: int = 0
    temporal_encoder: bool = True
    frame_similarity: str = "mean"
    scales: tuple[int, ...] = (2,)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.d < 1:
            raise ValidationError("batch_size and d must be >= 1, epochs >= 0")
        if not self.scales or any(s < 2 for s in self.scales):
            raise ValidationError(f"subtitle proposal scales must be >= 2, got {self.scales}")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    wsqg: WsqgConfig = field(default_factory=WsqgConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    # synth keys that collide with training keys are prefixed
    SYNTH_PREFIX: typing.ClassVar[str] = "synth_"

    def sections(self):
        return {"train": self.train, "loss": self.loss, "wsqg": self.wsqg, "synth": self.synth}


def _key_map() -> dict[str, tuple[str, str, type]]:
    """Config key -> (section, field name, type hint)."""
    out = {}
    for section, cls in (("train", TrainConfig), ("loss", LossWeights), ("wsqg", WsqgConfig),
                         ("synth", SynthConfig)):
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            key = f.name
            if section == "synth" and key in out:
                key = RunConfig.SYNTH_PREFIX + key
            out[key] = (section, f.name, hints[f.name])
    return out


def _convert(raw: str, hint, key: str):
    origin = typing.get_origin(hint)
    try:
        if hint is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if origin is tuple:
            return tuple(int(x) for x in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ValidationError(f"config key {key}: cannot parse {raw!r}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    keys = _key_map()
    values: dict[str, dict] = {"train": {}, "loss": {}, "wsqg": {}, "synth": {}}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ValidationError(f"{source}:{lineno}: expected 'key = value'")
        if key not in keys:
            raise ValidationError(f"{source}:{lineno}: unknown config key {key!r}")
        section, name, hint = keys[key]
        values[section][name] = _convert(raw, hint, key)
    return RunConfig(TrainConfig(**values["train"]), LossWeights(**values["loss"]),
                     WsqgConfig(**values["wsqg"]), SynthConfig(**values["synth"]))


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_config(text, str(path))


def format_config(cfg: RunConfig) -> str:
    """Inverse of :func:`parse_config`."""
    lines = []
    keys = _key_map()
    for key, (section, name, _) in keys.items():
        val = getattr(cfg.sections()[section], name)
        if isinstance(val, tuple):
            val = ",".join(map(str, val))
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"
