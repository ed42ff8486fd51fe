"""Feature-space attention matrix and CAM refinement.

The middle branch's integrated features are projected to query and key
spaces; the softmaxed inner product over flattened spatial positions
yields a row-stochastic similarity matrix that re-mixes every branch's
class activation maps position by position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbones import he_uniform
from .cam import CamStack
from .errors import ShapeError


@dataclass
class QKProjection:
    """Linear maps to query and key space, shared input channels."""

    w_q: Tensor
    w_k: Tensor

    def __post_init__(self):
        if self.w_q.data.shape != self.w_k.data.shape:
            raise ShapeError("query and key projections must share their shape")

    @classmethod
    def create(cls, rng: np.random.Generator, in_channels: int, dim: int | None = None, dtype=np.float32):
        dim = in_channels if dim is None else dim
        return cls(
            w_q=Tensor(he_uniform(rng, (dim, in_channels), in_channels, dtype), requires_grad=True),
            w_k=Tensor(he_uniform(rng, (dim, in_channels), in_channels, dtype), requires_grad=True),
        )

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_q": self.w_q, f"{prefix}.w_k": self.w_k}


@dataclass
class AttentionMatrix:
    """Row-stochastic [N, P, P] similarity over flattened positions."""

    a: Tensor
    height: int
    width: int

    def __post_init__(self):
        p = self.height * self.width
        if self.a.data.ndim != 3 or self.a.data.shape[1] != p or self.a.data.shape[2] != p:
            raise ShapeError(
                f"attention matrix shape {self.a.shape} does not match "
                f"{self.height}x{self.width} positions"
            )


def project_qk(feat: Tensor, proj: QKProjection) -> tuple[Tensor, Tensor]:
    """Flatten [N,Cf,H',W'] spatially and map each position to Q/K space."""
    if feat.data.ndim != 4:
        raise ShapeError(f"project_qk expects 4-d features, got {feat.shape}")
    cf = feat.data.shape[1]
    if proj.w_q.data.shape[1] != cf:
        raise ShapeError(
            f"projection expects {proj.w_q.data.shape[1]} channels, features have {cf}"
        )
    flat = ad.flatten_spatial(feat)  # [N, Cf, P]
    q = ad.matmul(proj.w_q, flat)  # [N, Ck, P]
    k = ad.matmul(proj.w_k, flat)
    return q, k


def attention_matrix(q: Tensor, k: Tensor, height: int, width: int) -> AttentionMatrix:
    """Softmax of the query/key inner product, rows over key positions."""
    if q.data.shape != k.data.shape:
        raise ShapeError(f"Q {q.shape} and K {k.shape} must match")
    logits = ad.matmul(ad.transpose_last2(q), k)  # [N, P, P]
    return AttentionMatrix(ad.softmax(logits, axis=-1), height, width)


def refine_cam(cs: CamStack, attn: AttentionMatrix) -> CamStack:
    """Mix CAM positions through the attention matrix.

    The stack is average-pooled to the attention grid and flattened;
    refined position j becomes sum_i M(c, i) * A(j, i), the convex
    mixture of input positions under row j's distribution. Each output
    therefore stays inside the per-class [min, max] envelope and a
    constant map is a fixed point. Normalization and non-max suppression
    are separate steps applied by the pipeline.
    """
    n, c = cs.maps.data.shape[0], cs.maps.data.shape[1]
    pooled = ad.adaptive_avg_pool(cs.maps, attn.height, attn.width)
    flat = ad.flatten_spatial(pooled)  # [N, C, P]
    mixed = ad.matmul(flat, ad.transpose_last2(attn.a))
    return CamStack(ad.reshape(mixed, (n, c, attn.height, attn.width)), cs.class_names)


def suppress_non_max(cs: CamStack) -> CamStack:
    """Keep only the maximal class at each position, zero the rest.

    Ties keep the lowest class index. This is a hard gate used only at
    pseudo-mask generation; it does not propagate gradients.
    """
    arr = cs.maps.data
    winner = arr.argmax(axis=1, keepdims=True)
    mask = np.arange(arr.shape[1]).reshape(1, -1, 1, 1) == winner
    return CamStack(Tensor(np.where(mask, arr, 0).astype(arr.dtype)), cs.class_names)
