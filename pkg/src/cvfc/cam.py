"""Multi-scale feature integration and one-step CAM generation.

Each branch resizes its backbone taps to a common grid, concatenates
them, and applies a 1x1 convolution whose output doubles as the class
activation maps and, after global pooling, the classification logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbones import he_uniform
from .errors import ShapeError, ValidationError


@dataclass
class CamStack:
    """Per-class activation maps [N, C, H, W] with class-name semantics."""

    maps: Tensor
    class_names: tuple[str, ...]

    def __post_init__(self):
        if self.maps.data.ndim != 4:
            raise ShapeError(f"CamStack maps must be 4-d, got {self.maps.shape}")
        if self.maps.data.shape[1] != len(self.class_names):
            raise ShapeError(
                f"CamStack has {self.maps.data.shape[1]} maps for "
                f"{len(self.class_names)} class names"
            )

    @property
    def shape(self):
        return self.maps.shape


@dataclass
class ClassScores:
    """Sigmoid classification scores [N, C]; logits kept for the loss."""

    scores: Tensor
    logits: Tensor


def integrate_taps(taps: dict[str, Tensor]) -> Tensor:
    """Resize every tap to the largest tap's grid and concatenate channels.

    Tap order (and therefore channel-block order) follows the dict order.
    """
    if not taps:
        raise ValidationError("integrate_taps requires at least one tap")
    tensors = list(taps.values())
    target_h = max(t.data.shape[2] for t in tensors)
    target_w = max(t.data.shape[3] for t in tensors)
    resized = [
        t if t.data.shape[2:] == (target_h, target_w) else ad.bilinear_resize(t, target_h, target_w)
        for t in tensors
    ]
    if len(resized) == 1:
        return resized[0]
    return ad.concat_channels(resized)


class CamHead:
    """1x1 convolution producing C class maps from integrated features."""

    def __init__(self, rng: np.random.Generator, in_channels: int, class_names, dtype=np.float32):
        self.class_names = tuple(class_names)
        c = len(self.class_names)
        self.w = Tensor(he_uniform(rng, (c, in_channels), in_channels, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)

    def __call__(self, feat: Tensor) -> tuple[CamStack, ClassScores]:
        return cam_forward(feat, self.w, self.b, self.class_names)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


def cam_forward(feat: Tensor, w: Tensor, b: Tensor, class_names) -> tuple[CamStack, ClassScores]:
    """One-step CAM: maps = conv1x1(feat); scores = sigmoid(mean(maps)).

    The pooled pre-sigmoid values are returned as logits so the
    classification loss can be computed in its numerically stable form.
    """
    maps = ad.conv1x1(feat, w, b)
    n, c = maps.data.shape[0], maps.data.shape[1]
    pooled = ad.adaptive_avg_pool(maps, 1, 1)
    logits = ad.reshape(pooled, (n, c))
    scores = ad.sigmoid(logits)
    return CamStack(maps, tuple(class_names)), ClassScores(scores=scores, logits=logits)


def normalize_cam(cs: CamStack) -> CamStack:
    """Min-max rescale each class map over its spatial positions."""
    return CamStack(ad.minmax_normalize(cs.maps), cs.class_names)
