"""Run configuration: nested dataclasses serialized as flat ``section.key = value`` text."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .avct import AVCTConfig
from .errors import ConfigurationError
from .losses import LossWeights
from .renderer import RendererConfig


@dataclass
class AudioConfig:
    sample_rate: int = 16000
    fps: int = 25


@dataclass
class PretrainConfig:
    """Self-driving reconstruction pretraining of detector + renderer."""

    lr: float = 2e-4
    batch: int = 4
    iterations: int = 400
    lambda_perceptual: float = 1.0
    lambda_pixel: float = 10.0
    lambda_eq_k: float = 10.0
    lambda_eq_j: float = 10.0
    lambda_mouth: float = 0.0
    color_jitter: float = 0.0  # probability of recolouring a training pair


@dataclass
class SyncConfig:
    lr: float = 1e-4
    batch: int = 32
    iterations: int = 600
    min_offset: int = 5
    max_offset: int = 15
    margin: float = 0.8


@dataclass
class TrainConfig(LossWeights):
    lr: float = 2e-5
    weight_decay: float = 2e-7
    d_lr: float = 2e-4
    warmup: int = 0
    lr_decay: bool = False
    eq_scale: float = 1.0  # multiplies the random similarity transform of the equivariance terms
    iterations: int = 1000
    checkpoint_every: int = 0


@dataclass
class HeadConfig:
    hidden: int = 256
    layers: int = 2
    pose_features: int = 64
    lr: float = 1e-4
    iterations: int = 1500
    lambda_anchor: float = 1.0


@dataclass
class Config:
    seed: int = 0
    audio: AudioConfig = field(default_factory=AudioConfig)
    avct: AVCTConfig = field(default_factory=AVCTConfig)
    renderer: RendererConfig = field(default_factory=RendererConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    sync: SyncConfig = field(default_factory=SyncConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    head: HeadConfig = field(default_factory=HeadConfig)

    def to_flat(self) -> dict[str, object]:
        flat: dict[str, object] = {"seed": self.seed}
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            if dataclasses.is_dataclass(section):
                for sf in dataclasses.fields(section):
                    flat[f"{f.name}.{sf.name}"] = getattr(section, sf.name)
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "Config":
        cfg = cls()
        cfg.update(flat)
        return cfg

    def update(self, flat: dict) -> "Config":
        for key, raw in flat.items():
            self.set(key, raw)
        return self

    def set(self, key: str, raw) -> None:
        if key == "seed":
            self.seed = int(raw)
            return
        section_name, _, name = key.partition(".")
        section = getattr(self, section_name, None)
        if not name or section is None or not dataclasses.is_dataclass(section):
            raise ConfigurationError(f"unknown config key {key!r}")
        types = {f.name: f.type for f in dataclasses.fields(section)}
        if name not in types:
            raise ConfigurationError(f"unknown config key {key!r}")
        current = getattr(section, name)
        try:
            value = _coerce(raw, type(current))
        except ValueError:
            raise ConfigurationError(f"bad value {raw!r} for {key}") from None
        setattr(section, name, value)
        if section_name == "audio" and name == "sample_rate" and value != 16000:
            raise ConfigurationError("audio.sample_rate is fixed at 16000; resample inputs instead")

    def save(self, path) -> None:
        lines = [f"{k} = {v}" for k, v in self.to_flat().items()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, overrides=()) -> "Config":
        cfg = cls()
        if path is not None:
            cfg.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigurationError(f"override {item!r} is not key=value")
            cfg.set(key.strip(), value.strip())
        return cfg

    def loss_weights(self) -> LossWeights:
        t = self.train
        return LossWeights(t.lambda_sync, t.lambda_v, t.lambda_eq_p, t.lambda_eq_j, t.lambda_pixel,
                           t.pixel_loss, t.seq_len, t.window, t.lambda_adv)


# Reduced schedule that fits the synthetic-speaker run on one CPU core.
PRESETS: dict[str, dict[str, object]] = {
    "paper": {},
    "desk": {
        "pretrain.lambda_mouth": 20.0,
        "pretrain.lambda_eq_k": 25.0,
        "pretrain.lambda_eq_j": 25.0,
        "train.seq_len": 12,
        "train.lr": 2e-4,
        "train.warmup": 10,
        "train.lr_decay": True,
        "train.iterations": 200,
        "train.lambda_sync": 1e-3,
        "train.lambda_eq_p": 50.0,
        "train.lambda_eq_j": 50.0,
        "train.eq_scale": 0.25,
        "head.lr": 1e-3,
        "head.iterations": 400,
    },
}


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"config line {lineno}: expected key = value")
        out[key.strip()] = value.strip()
    return out


def _coerce(raw, kind):
    if not isinstance(raw, str):
        return kind(raw)
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if kind is int:
        return int(float(raw)) if "e" in raw.lower() else int(raw)
    return kind(raw)
