"""Configurable residual convolutional feature extractors.

A backbone is a stem convolution followed by a list of residual stages.
Stage ``i`` (1-based) is named ``c{i+1}`` and each named stage can be
exported as a tap: a feature map handed to the multi-scale CAM head.
Depth, widths, strides and block kind are all configuration, so the same
code expresses the desk-scale presets used in the tests and much deeper
networks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

BLOCK_KINDS = ("basic", "bottleneck")


@dataclass(frozen=True)
class StageConfig:
    blocks: int
    out_channels: int
    stride: int
    block_kind: str = "basic"


@dataclass(frozen=True)
class BackboneConfig:
    """Topology of one residual feature extractor.

    ``tap_names`` selects which stage outputs the forward pass exports;
    they must be a subset of the generated stage names (``c2``, ``c3``,
    ... in depth order).
    """

    stem_channels: int
    stages: tuple[StageConfig, ...]
    tap_names: tuple[str, ...]

    def __post_init__(self):
        if self.stem_channels < 1:
            raise ConfigError("stem_channels must be >= 1")
        if len(self.stages) < 3:
            raise ConfigError("a backbone needs at least 3 stages")
        for st in self.stages:
            if st.blocks < 1 or st.out_channels < 1 or st.stride < 1:
                raise ConfigError(f"invalid stage config {st}")
            if st.block_kind not in BLOCK_KINDS:
                raise ConfigError(f"unknown block kind {st.block_kind!r}")
        names = self.stage_names()
        unknown = [t for t in self.tap_names if t not in names]
        if unknown:
            raise ConfigError(f"tap names {unknown} not among stages {names}")
        if not self.tap_names:
            raise ConfigError("at least one tap name is required")

    def stage_names(self) -> tuple[str, ...]:
        return tuple(f"c{i + 2}" for i in range(len(self.stages)))

    @property
    def stride_product(self) -> int:
        p = 1
        for st in self.stages:
            p *= st.stride
        return p


PRESETS: dict[str, BackboneConfig] = {
    "mini38": BackboneConfig(
        stem_channels=16,
        stages=(
            StageConfig(2, 32, 2, "basic"),
            StageConfig(2, 64, 2, "basic"),
            StageConfig(2, 128, 2, "basic"),
        ),
        tap_names=("c2", "c3", "c4"),
    ),
    "mini50": BackboneConfig(
        stem_channels=16,
        stages=(
            StageConfig(2, 32, 2, "bottleneck"),
            StageConfig(2, 64, 2, "bottleneck"),
            StageConfig(2, 128, 2, "bottleneck"),
        ),
        tap_names=("c2", "c3", "c4"),
    ),
    # Minimal variants for fast smoke and gradient checks.
    "tiny38": BackboneConfig(
        stem_channels=4,
        stages=(
            StageConfig(1, 8, 2, "basic"),
            StageConfig(1, 8, 2, "basic"),
            StageConfig(1, 16, 2, "basic"),
        ),
        tap_names=("c2", "c3", "c4"),
    ),
    "tiny50": BackboneConfig(
        stem_channels=4,
        stages=(
            StageConfig(1, 8, 2, "bottleneck"),
            StageConfig(1, 8, 2, "bottleneck"),
            StageConfig(1, 16, 2, "bottleneck"),
        ),
        tap_names=("c2", "c3", "c4"),
    ),
}


def resolve_config(preset_or_cfg) -> BackboneConfig:
    if isinstance(preset_or_cfg, BackboneConfig):
        return preset_or_cfg
    try:
        return PRESETS[preset_or_cfg]
    except KeyError:
        raise ConfigError(
            f"unknown backbone preset {preset_or_cfg!r}; known: {sorted(PRESETS)}"
        ) from None


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ConvLayer:
    """Conv2d with He-uniform weights and zero bias."""

    def __init__(self, rng, cin, cout, k, stride, padding, dtype):
        self.stride = stride
        self.padding = padding
        self.w = Tensor(he_uniform(rng, (cout, cin, k, k), cin * k * k, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class BatchNormLayer:
    """BatchNorm2d owning its affine parameters and running buffers."""

    def __init__(self, channels: int, dtype, momentum: float = 0.9):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ad.batchnorm2d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=training,
            momentum=self.momentum,
        )

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}

    def buffers(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.running_mean": self.running_mean,
            f"{prefix}.running_var": self.running_var,
        }


class _Block:
    """Residual unit: y = relu(f(x) + shortcut(x))."""

    def __init__(self, rng, cin, cout, stride, kind, dtype):
        self.kind = kind
        if kind == "basic":
            self.conv1 = ConvLayer(rng, cin, cout, 3, stride, 1, dtype)
            self.bn1 = BatchNormLayer(cout, dtype)
            self.conv2 = ConvLayer(rng, cout, cout, 3, 1, 1, dtype)
            self.bn2 = BatchNormLayer(cout, dtype)
            self._stack = [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2), ("bn2", self.bn2)]
        else:
            mid = max(cout // 4, 1)
            self.conv1 = ConvLayer(rng, cin, mid, 1, 1, 0, dtype)
            self.bn1 = BatchNormLayer(mid, dtype)
            self.conv2 = ConvLayer(rng, mid, mid, 3, stride, 1, dtype)
            self.bn2 = BatchNormLayer(mid, dtype)
            self.conv3 = ConvLayer(rng, mid, cout, 1, 1, 0, dtype)
            self.bn3 = BatchNormLayer(cout, dtype)
            self._stack = [
                ("conv1", self.conv1), ("bn1", self.bn1),
                ("conv2", self.conv2), ("bn2", self.bn2),
                ("conv3", self.conv3), ("bn3", self.bn3),
            ]
        if stride != 1 or cin != cout:
            self.sc_conv = ConvLayer(rng, cin, cout, 1, stride, 0, dtype)
            self.sc_bn = BatchNormLayer(cout, dtype)
            self._stack += [("shortcut.conv", self.sc_conv), ("shortcut.bn", self.sc_bn)]
        else:
            self.sc_conv = None
            self.sc_bn = None

    @property
    def final_bn(self) -> BatchNormLayer:
        return self.bn2 if self.kind == "basic" else self.bn3

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if self.kind == "basic":
            f = self.bn1(self.conv1(x), training)
            f = ad.relu(f)
            f = self.bn2(self.conv2(f), training)
        else:
            f = ad.relu(self.bn1(self.conv1(x), training))
            f = ad.relu(self.bn2(self.conv2(f), training))
            f = self.bn3(self.conv3(f), training)
        if self.sc_conv is not None:
            sc = self.sc_bn(self.sc_conv(x), training)
        else:
            sc = x
        return ad.relu(ad.add(f, sc))

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, layer in self._stack:
            out.update(layer.params(f"{prefix}.{name}"))
        return out

    def buffers(self, prefix: str) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, layer in self._stack:
            if isinstance(layer, BatchNormLayer):
                out.update(layer.buffers(f"{prefix}.{name}"))
        return out


class Backbone:
    """Stem + residual stages with named tap outputs."""

    def __init__(self, cfg: BackboneConfig, seed: int, dtype=np.float32):
        self.config = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.stem_conv = ConvLayer(rng, 3, cfg.stem_channels, 3, 1, 1, dtype)
        self.stem_bn = BatchNormLayer(cfg.stem_channels, dtype)
        self.stages: list[tuple[str, list[_Block]]] = []
        cin = cfg.stem_channels
        for name, st in zip(cfg.stage_names(), cfg.stages):
            blocks = []
            for bi in range(st.blocks):
                stride = st.stride if bi == 0 else 1
                blocks.append(_Block(rng, cin, st.out_channels, stride, st.block_kind, dtype))
                cin = st.out_channels
            self.stages.append((name, blocks))

    @property
    def stride_product(self) -> int:
        return self.config.stride_product

    def tap_channels(self) -> dict[str, int]:
        by_stage = dict(zip(self.config.stage_names(), (s.out_channels for s in self.config.stages)))
        return {t: by_stage[t] for t in self.config.tap_names}

    def forward(self, x: Tensor, training: bool = False) -> dict[str, Tensor]:
        """Run the extractor; returns taps keyed by name in config order."""
        if x.data.ndim != 4 or x.data.shape[1] != 3:
            raise ShapeError(f"backbone expects [N,3,H,W] input, got {x.shape}")
        h, w = x.data.shape[2], x.data.shape[3]
        sp = self.stride_product
        if h % sp or w % sp:
            raise ShapeError(f"input {h}x{w} not divisible by stride product {sp}")
        out = ad.relu(self.stem_bn(self.stem_conv(x), training))
        taps: dict[str, Tensor] = {}
        for name, blocks in self.stages:
            for block in blocks:
                out = block(out, training)
            if name in self.config.tap_names:
                taps[name] = out
        return {name: taps[name] for name in self.config.tap_names}

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        pre = f"{prefix}." if prefix else ""
        out = {}
        out.update(self.stem_conv.params(f"{pre}stem.conv"))
        out.update(self.stem_bn.params(f"{pre}stem.bn"))
        for name, blocks in self.stages:
            for bi, block in enumerate(blocks):
                out.update(block.params(f"{pre}{name}.block{bi}"))
        return out

    def buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        pre = f"{prefix}." if prefix else ""
        out = {}
        out.update(self.stem_bn.buffers(f"{pre}stem.bn"))
        for name, blocks in self.stages:
            for bi, block in enumerate(blocks):
                out.update(block.buffers(f"{pre}{name}.block{bi}"))
        return out


def build_backbone(cfg, seed: int, dtype=np.float32) -> Backbone:
    """Construct a backbone from a preset name or a BackboneConfig.

    Parameter initialization (He-uniform conv weights, zero biases,
    batchnorm scale 1 / shift 0) is fully determined by ``seed``.
    """
    return Backbone(resolve_config(cfg), seed=seed, dtype=dtype)
