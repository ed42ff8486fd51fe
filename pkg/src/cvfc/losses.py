"""The four-term co-training objective.

Three multi-label classification terms (one per branch), a consistency
term tying the refined maps of the outer branches together, and a cross
term additionally pulling the middle branch toward them. The total is
their unweighted sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError, ValidationError


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar components of one objective evaluation, for logging."""

    l_cls_1: float
    l_cls_2: float
    l_cls_3: float
    l_cls_total: float
    l_cons: float
    l_cross: float
    total: float

    def to_dict(self) -> dict[str, float]:
        return {
            "l_cls_1": self.l_cls_1,
            "l_cls_2": self.l_cls_2,
            "l_cls_3": self.l_cls_3,
            "l_cls_total": self.l_cls_total,
            "l_cons": self.l_cons,
            "l_cross": self.l_cross,
            "total": self.total,
        }


def multilabel_soft_margin(logits: Tensor, y) -> Tensor:
    """Mean over samples and classes of the per-class binary loss.

    Computes -[y*log(sigmoid(x)) + (1-y)*log(1-sigmoid(x))] through the
    stable softplus form log(1 + exp(-|x|)) + max(...), so saturated
    logits neither overflow nor lose the gradient direction.
    """
    y_arr = y.data if isinstance(y, Tensor) else np.asarray(y)
    if y_arr.shape != logits.data.shape:
        raise ShapeError(f"labels {y_arr.shape} do not match logits {logits.shape}")
    if not np.isin(y_arr, (0, 1)).all():
        raise ValidationError("multilabel_soft_margin expects binary labels")
    y_t = Tensor(y_arr.astype(logits.data.dtype))
    pos = ad.mul(y_t, ad.softplus(ad.scale(logits, -1.0)))
    neg = ad.mul(ad.add(ad.scale(y_t, -1.0), 1.0), ad.softplus(logits))
    return ad.mean(ad.add(pos, neg))


def classification_loss(logits_1: Tensor, logits_2: Tensor, logits_3: Tensor, y) -> Tensor:
    """Sum of the three per-branch multi-label terms."""
    return ad.add(
        ad.add(multilabel_soft_margin(logits_1, y), multilabel_soft_margin(logits_2, y)),
        multilabel_soft_margin(logits_3, y),
    )


def consistency_loss(cam_a: Tensor, cam_b: Tensor, norm: str = "l1") -> Tensor:
    """Mean absolute (or squared) difference over every map entry."""
    if cam_a.data.shape != cam_b.data.shape:
        raise ShapeError(f"CAM shapes differ: {cam_a.shape} vs {cam_b.shape}")
    diff = ad.sub(cam_a, cam_b)
    if norm == "l1":
        return ad.mean(ad.tensor_abs(diff))
    if norm == "l2":
        return ad.mean(ad.mul(diff, diff))
    raise ValidationError(f"unknown consistency norm {norm!r}")


def cross_loss(
    cam_1: Tensor,
    cam_2: Tensor,
    cam_3: Tensor,
    norm: str = "l1",
    variant: str = "as_written",
) -> Tensor:
    """Two-pair consistency sum.

    ``as_written`` pairs (1,3) and (3,2); the ``one_two`` variant swaps
    the first pair for (1,2), available for ablation.
    """
    if variant == "as_written":
        first = consistency_loss(cam_1, cam_3, norm)
    elif variant == "one_two":
        first = consistency_loss(cam_1, cam_2, norm)
    else:
        raise ValidationError(f"unknown cross variant {variant!r}")
    return ad.add(first, consistency_loss(cam_3, cam_2, norm))


def total_loss(
    l_cls_parts: tuple[Tensor, Tensor, Tensor],
    l_cons: Tensor,
    l_cross: Tensor,
) -> tuple[Tensor, LossBreakdown]:
    """Unweighted sum of the components, plus a float breakdown.

    The breakdown's ``total`` is exactly the tensor value, so the
    reported components sum to it in the same accumulation order.
    """
    l1, l2, l3 = l_cls_parts
    l_cls = ad.add(ad.add(l1, l2), l3)
    total = ad.add(ad.add(l_cls, l_cons), l_cross)
    breakdown = LossBreakdown(
        l_cls_1=l1.item(),
        l_cls_2=l2.item(),
        l_cls_3=l3.item(),
        l_cls_total=l_cls.item(),
        l_cons=l_cons.item(),
        l_cross=l_cross.item(),
        total=total.item(),
    )
    return total, breakdown
