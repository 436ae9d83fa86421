"""Flat ``key = value`` run configuration with ``#`` comments."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from mfbfuse.data import SyntheticSpec
from mfbfuse.model import ModelConfig
from mfbfuse.training import TrainConfig


class ConfigError(ValueError):
    pass


# config key -> (section, field name, parser)
KEYS = {
    "fusion.kind": ("model", "fusion", str),
    "fusion.k": ("model", "k", int),
    "fusion.o": ("model", "o", int),
    "fusion.dropout": ("model", "dropout", float),
    "agg.kind": ("model", "aggregator", str),
    "agg.clusters": ("model", "clusters", int),
    "agg.dbof_dim": ("model", "dbof_dim", int),
    "agg.frames": ("model", "frames", int),
    "moe.mixtures": ("model", "mixtures", int),
    "moe.l2": ("model", "l2", float),
    "train.batch_size": ("train", "batch_size", int),
    "train.max_steps": ("train", "max_steps", int),
    "train.eval_every": ("train", "eval_every", int),
    "train.seed": ("train", "seed", int),
    "train.learning_rate": ("train", "learning_rate", float),
    "synth.videos": ("synth", "video_count", int),
    "synth.val_videos": ("split", "val_videos", int),
    "synth.classes": ("synth", "num_classes", int),
    "synth.visual_dim": ("synth", "visual_dim", int),
    "synth.audio_dim": ("synth", "audio_dim", int),
    "synth.rank": ("synth", "rank", int),
    "synth.noise": ("synth", "noise", float),
    "synth.min_frames": ("synth", "min_frames", int),
    "synth.max_frames": ("synth", "max_frames", int),
    "synth.threshold": ("synth", "threshold", float),
    "synth.seed": ("synth", "seed", int),
}


_SECTION_TYPES = {"model": ModelConfig, "train": TrainConfig, "synth": SyntheticSpec}


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)  # overrides; dims come from the data
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    val_videos: int = 500

    def model_config(self, visual_dim: int, audio_dim: int, num_classes: int, **overrides) -> ModelConfig:
        kw = {**self.model, **overrides}
        try:
            return ModelConfig(visual_dim=visual_dim, audio_dim=audio_dim, num_classes=num_classes, **kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    sections: dict[str, dict] = {"model": {}, "train": {}, "synth": {}, "split": {}}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        section, name, kind = KEYS[key]
        try:
            parsed = kind(value)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value {value!r} for {key}") from None
        if section in _SECTION_TYPES:
            try:
                _SECTION_TYPES[section](**{name: parsed})
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: {key}: {exc}") from None
        sections[section][name] = parsed
    try:
        # cross-field checks, with placeholder dims for the model
        ModelConfig(**sections["model"])
        cfg = RunConfig(
            model=sections["model"],
            train=TrainConfig(**sections["train"]),
            synth=SyntheticSpec(**sections["synth"]),
            **sections["split"],
        )
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if cfg.val_videos < 0:
        raise ConfigError(f"{source}: synth.val_videos must be >= 0")
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
