"""Experiment configuration: one flat dataclass, named presets, and a
line-oriented ``key = value`` config-file format with override support."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields, replace


class ConfigFileError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # architecture
    backbone: str = "toy"
    embed_dim: int = 32
    n_heads: int = 4                 # deformable-attention heads
    n_sample_points: int = 4
    n_pillar_heights: int = 4
    ffn_dim: int = 64
    n_encoder_layers: int = 3
    n_decoder_layers: int = 6
    n_queries: int = 20
    n_points: int = 10               # P, polyline points per lane
    bev_h: int = 25
    bev_w: int = 13
    bev_x_min: float = -24.0
    bev_x_max: float = 24.0
    bev_y_min: float = -12.0
    bev_y_max: float = 12.0
    image_channels: int = 1
    image_height: int = 64
    image_width: int = 96
    # loss
    lambda_cls: float = 2.0
    lambda_pts: float = 5.0
    lambda_bnd: float = 2.5
    background_weight: float = 0.1
    # optimization
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 35.0
    warmup_steps: int = 0
    epochs: int = 10
    seed: int = 0
    # io
    dataset_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    checkpoint_every: int = 2

    def __post_init__(self):
        if self.n_encoder_layers < 1 or self.n_decoder_layers < 1:
            raise ConfigFileError("encoder and decoder need at least one layer each")
        if self.embed_dim % self.n_heads != 0 or self.embed_dim % 8 != 0:
            raise ConfigFileError(
                f"embed_dim {self.embed_dim} must divide by n_heads {self.n_heads} and by 8")

    def config_hash(self) -> str:
        """Hash of every field that affects the numerical trajectory.

        Path-like fields and the epoch budget are excluded so a resumed run
        extending the epoch count is still the "same" experiment.
        """
        skip = {"epochs", "dataset_dir", "checkpoint_dir", "checkpoint_every"}
        text = "\n".join(f"{f.name}={getattr(self, f.name)!r}"
                         for f in fields(self) if f.name not in skip)
        return hashlib.sha256(text.encode()).hexdigest()

    def resolved_text(self) -> str:
        return "\n".join(f"{f.name} = {getattr(self, f.name)}" for f in fields(self))


# the four experiment presets studied in the stack-depth/backbone comparison
EXPERIMENT_PRESETS = {
    "baseline-3:6": {"n_encoder_layers": 3, "n_decoder_layers": 6, "backbone": "toy"},
    "shallow-backbone": {"n_encoder_layers": 3, "n_decoder_layers": 6, "backbone": "toy-shallow"},
    "2:4": {"n_encoder_layers": 2, "n_decoder_layers": 4, "backbone": "toy"},
    "4:8": {"n_encoder_layers": 4, "n_decoder_layers": 8, "backbone": "toy"},
}


def preset_config(name: str, **overrides) -> ExperimentConfig:
    if name not in EXPERIMENT_PRESETS:
        raise ConfigFileError(f"unknown preset {name!r}; valid: {sorted(EXPERIMENT_PRESETS)}")
    return ExperimentConfig(**{**EXPERIMENT_PRESETS[name], **overrides})


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _parse_value(name: str, raw: str):
    f = _FIELDS[name]
    try:
        if f.type in ("int", int):
            return int(raw)
        if f.type in ("float", float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigFileError(f"bad value for {name}: {raw!r}") from None


def parse_config_file(path: str) -> dict:
    """Line-oriented ``key = value`` file; '#' starts a comment."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigFileError(f"{path}:{lineno}: expected 'key = value', got {text!r}")
            key, _, raw = text.partition("=")
            key = key.strip()
            if key not in _FIELDS:
                raise ConfigFileError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = _parse_value(key, raw.strip())
    return out


def apply_overrides(cfg: ExperimentConfig, pairs) -> ExperimentConfig:
    """Apply ``key=value`` strings (CLI --set) on top of a config."""
    updates = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigFileError(f"override must be key=value, got {pair!r}")
        key, _, raw = pair.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigFileError(f"unknown config key {key!r}")
        updates[key] = _parse_value(key, raw.strip())
    return replace(cfg, **updates)


def load_config(path: str | None, overrides=(), base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    if path:
        cfg = replace(cfg, **parse_config_file(path))
    return apply_overrides(cfg, overrides)
