"""Residual convolutional feature extractor and analytic FLOPs accounting.

The network is a pre-activation residual net: each block computes
``x + f(x)`` with ``f`` ending in a convolution, so zero-initializing that
final convolution makes the block an exact identity.  A single layer plan
(built from the config) drives parameter initialization, the forward pass,
and the FLOPs counter, so the three can never drift apart.

FLOPs counting: convolutions and linear layers only, one multiply-accumulate
counted as ``flops_per_mac`` floating-point operations (default 2).  The
published magnitudes for the depth-50 / depth-18 shapes (3.8e9 / 1.8e9 at
224x224) were stated in multiply-accumulate units, i.e. ``flops_per_mac=1``;
``count_macs`` reproduces them directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    """Invalid architecture configuration."""


BOTTLENECK_EXPANSION = 4


@dataclass(frozen=True)
class BackboneConfig:
    block_kind: str  # "basic" | "bottleneck"
    stage_block_counts: tuple[int, int, int, int]
    stem_channels: int
    stage_channel_multipliers: tuple[int, int, int, int]
    input_shape: tuple[int, int, int]  # (C, H, W)
    stem_kind: str = "full"  # "full": 7x7/2 conv + 3x3/2 maxpool; "toy": 3x3/2 conv

    def __post_init__(self):
        if self.block_kind not in ("basic", "bottleneck"):
            raise ConfigError(f"unknown block kind {self.block_kind!r}")
        if self.stem_kind not in ("full", "toy"):
            raise ConfigError(f"unknown stem kind {self.stem_kind!r}")
        if len(self.stage_block_counts) != 4 or any(n < 1 for n in self.stage_block_counts):
            raise ConfigError(f"need 4 positive stage block counts, got {self.stage_block_counts}")

    @property
    def output_stride(self) -> int:
        return 32 if self.stem_kind == "full" else 16


BACKBONE_PRESETS = {
    # full-resolution shapes used for FLOPs accounting only
    "resnet50-shape": BackboneConfig("bottleneck", (3, 4, 6, 3), 64, (1, 2, 4, 8), (3, 224, 224)),
    "resnet18-shape": BackboneConfig("basic", (2, 2, 2, 2), 64, (1, 2, 4, 8), (3, 224, 224)),
    # desk-scale training backbones
    "toy": BackboneConfig("basic", (2, 2, 2, 2), 8, (1, 2, 2, 4), (1, 64, 96), stem_kind="toy"),
    "toy-shallow": BackboneConfig("basic", (1, 1, 1, 1), 8, (1, 2, 2, 4), (1, 64, 96), stem_kind="toy"),
}


@dataclass(frozen=True)
class ConvSpec:
    name: str
    c_in: int
    c_out: int
    kh: int
    kw: int
    stride: int
    pad: int
    h_out: int
    w_out: int

    @property
    def macs(self) -> int:
        return self.c_out * self.c_in * self.kh * self.kw * self.h_out * self.w_out


@dataclass(frozen=True)
class BlockSpec:
    convs: tuple[ConvSpec, ...]          # main path, in order
    downsample: ConvSpec | None          # 1x1 projection when shape changes


@dataclass(frozen=True)
class BackbonePlan:
    stem: tuple[ConvSpec, ...]
    stem_pool: bool
    stages: tuple[tuple[BlockSpec, ...], ...]

    def all_convs(self):
        yield from self.stem
        for stage in self.stages:
            for block in stage:
                yield from block.convs
                if block.downsample is not None:
                    yield block.downsample


def _out_dim(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def build_plan(cfg: BackboneConfig) -> BackbonePlan:
    c, h, w = cfg.input_shape
    if cfg.stem_kind == "full":
        h1, w1 = _out_dim(h, 7, 2, 3), _out_dim(w, 7, 2, 3)
        stem = (ConvSpec("stem/conv", c, cfg.stem_channels, 7, 7, 2, 3, h1, w1),)
        h, w = _out_dim(h1, 3, 2, 1), _out_dim(w1, 3, 2, 1)
        pool = True
    else:
        h, w = _out_dim(h, 3, 2, 1), _out_dim(w, 3, 2, 1)
        stem = (ConvSpec("stem/conv", c, cfg.stem_channels, 3, 3, 2, 1, h, w),)
        pool = False

    expansion = BOTTLENECK_EXPANSION if cfg.block_kind == "bottleneck" else 1
    c_prev = cfg.stem_channels
    stages = []
    for s, (count, mult) in enumerate(zip(cfg.stage_block_counts, cfg.stage_channel_multipliers)):
        width = cfg.stem_channels * mult
        c_out = width * expansion
        blocks = []
        for b in range(count):
            stride = 2 if (s > 0 and b == 0) else 1
            h, w = _out_dim(h, 1, stride, 0), _out_dim(w, 1, stride, 0)
            prefix = f"stage{s}/block{b}"
            if cfg.block_kind == "bottleneck":
                # stride taken by the first 1x1 (original downsampling placement)
                convs = (
                    ConvSpec(f"{prefix}/conv0", c_prev, width, 1, 1, stride, 0, h, w),
                    ConvSpec(f"{prefix}/conv1", width, width, 3, 3, 1, 1, h, w),
                    ConvSpec(f"{prefix}/conv2", width, c_out, 1, 1, 1, 0, h, w),
                )
            else:
                convs = (
                    ConvSpec(f"{prefix}/conv0", c_prev, width, 3, 3, stride, 1, h, w),
                    ConvSpec(f"{prefix}/conv1", width, c_out, 3, 3, 1, 1, h, w),
                )
            downsample = None
            if stride != 1 or c_prev != c_out:
                downsample = ConvSpec(f"{prefix}/down", c_prev, c_out, 1, 1, stride, 0, h, w)
            blocks.append(BlockSpec(convs, downsample))
            c_prev = c_out
        stages.append(tuple(blocks))
    return BackbonePlan(stem, pool, tuple(stages))


def feature_channels(cfg: BackboneConfig) -> int:
    expansion = BOTTLENECK_EXPANSION if cfg.block_kind == "bottleneck" else 1
    return cfg.stem_channels * cfg.stage_channel_multipliers[-1] * expansion


def feature_shape(cfg: BackboneConfig) -> tuple[int, int, int]:
    plan = build_plan(cfg)
    last = plan.stages[-1][-1].convs[-1]
    return (feature_channels(cfg), last.h_out, last.w_out)


def init_backbone_params(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Kaiming fan-in initialization for every conv in the plan."""
    params = {}
    for spec in build_plan(cfg).all_convs():
        fan_in = spec.c_in * spec.kh * spec.kw
        scale = np.sqrt(2.0 / fan_in)
        params[spec.name + "/w"] = rng.standard_normal(
            (spec.c_out, spec.c_in, spec.kh, spec.kw)) * scale
        params[spec.name + "/b"] = np.zeros(spec.c_out)
    return params


def _run_conv(x, spec: ConvSpec, params):
    w = T._as_tensor(params[spec.name + "/w"])
    b = T._as_tensor(params[spec.name + "/b"])
    y = T.conv2d(x, w, stride=spec.stride, padding=spec.pad)
    return T.add(y, T.reshape(b, (-1, 1, 1)))


def _run_block(x, block: BlockSpec, params):
    h = x
    for spec in block.convs:
        h = _run_conv(T.relu(h), spec, params)
    shortcut = x
    if block.downsample is not None:
        shortcut = _run_conv(T.relu(x), block.downsample, params)
    return T.add(shortcut, h)


def run_backbone(x: Tensor, cfg: BackboneConfig, params) -> Tensor:
    """Forward an image batch [N,C,H,W] (or one image [C,H,W]) to features."""
    plan = build_plan(cfg)
    h = x
    for spec in plan.stem:
        h = _run_conv(h, spec, params)
    if plan.stem_pool:
        h = T.max_pool2d(h, 3, 2, padding=1)
    for stage in plan.stages:
        for block in stage:
            h = _run_block(h, block, params)
    return T.relu(h)


def extract_features(frame, cfg: BackboneConfig, params) -> list[Tensor]:
    """Apply the shared backbone to the 7 camera images of one frame.

    frame: object with an ``images`` attribute, a list of 7 [C,H,W] arrays
    (or a stacked [7,C,H,W] array).  Returns 7 feature maps as a list.
    """
    images = frame.images if hasattr(frame, "images") else frame
    if isinstance(images, Tensor):
        batch = images
        n = batch.shape[0]
    else:
        arrs = [np.asarray(im) for im in images]
        n = len(arrs)
        for i, a in enumerate(arrs):
            if tuple(a.shape) != tuple(cfg.input_shape):
                raise T.DimensionError(
                    f"view {i}: image shape {a.shape} does not match configured {cfg.input_shape}")
        batch = Tensor(np.stack(arrs))
    feats = run_backbone(batch, cfg, params)
    return [feats[i] for i in range(n)]


def count_macs(cfg: BackboneConfig) -> int:
    """Total multiply-accumulates over all convolutions in the plan."""
    return sum(spec.macs for spec in build_plan(cfg).all_convs())


def count_flops(cfg: BackboneConfig, flops_per_mac: int = 2) -> int:
    """Analytic FLOPs: convs (and linears) only, pooling/activation excluded."""
    return flops_per_mac * count_macs(cfg)


def flops_table(cfg: BackboneConfig, flops_per_mac: int = 2) -> list[tuple[str, int]]:
    """Per-layer (name, flops) rows in plan order."""
    return [(spec.name, flops_per_mac * spec.macs) for spec in build_plan(cfg).all_convs()]
