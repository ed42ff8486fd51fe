"""Pseudo-mask generation from CAMs and IoU-family scoring.

Metrics accumulate one global confusion matrix over a split: index 0 is
background, indices 1..C follow the class-name order. Mean and
frequency-weighted IoU average over the foreground classes only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from .autodiff import _resize_matrix
from .errors import EvalPairingError, ShapeError, ValidationError


@dataclass
class PseudoMask:
    """[H, W] class-index map; 0 is background, 1..C are foreground."""

    labels: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ShapeError(f"mask must be 2-d, got shape {self.labels.shape}")


def cam_to_mask(cam: np.ndarray, bg_threshold: float, out_hw: tuple[int, int]) -> np.ndarray:
    """Resize a [C, H, W] activation stack and assign per-pixel labels.

    A pixel is background when its best class activation falls below
    ``bg_threshold``; otherwise it takes the argmax class (ties resolve
    to the lowest index). Returns an int array of 0..C.
    """
    if not 0 <= bg_threshold < 1:
        raise ValidationError(f"bg_threshold must be in [0, 1), got {bg_threshold}")
    cam = np.asarray(cam)
    if cam.ndim != 3:
        raise ShapeError(f"cam_to_mask expects [C,H,W], got {cam.shape}")
    c, h, w = cam.shape
    out_h, out_w = out_hw
    if (h, w) != (out_h, out_w):
        my = _resize_matrix(h, out_h, cam.dtype)
        mx = _resize_matrix(w, out_w, cam.dtype)
        cam = np.einsum("oh,chw,pw->cop", my, cam, mx, optimize=True)
    best = cam.argmax(axis=0)
    mask = (best + 1).astype(np.int32)
    mask[cam.max(axis=0) < bg_threshold] = 0
    return mask


def pseudo_mask(cam_stack, bg_threshold: float, out_hw: tuple[int, int]) -> list[PseudoMask]:
    """Convert a refined+normalized CAM stack into per-sample masks.

    Accepts anything with a ``maps`` tensor of shape [N, C, H, W] (a
    CamStack); each sample is resized and labeled by ``cam_to_mask``.
    """
    arr = cam_stack.maps.data if hasattr(cam_stack, "maps") else np.asarray(cam_stack)
    if arr.ndim != 4:
        raise ShapeError(f"pseudo_mask expects [N,C,H,W] maps, got {arr.shape}")
    return [
        PseudoMask(cam_to_mask(arr[n], bg_threshold, out_hw), source_id=str(n))
        for n in range(arr.shape[0])
    ]


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, n_labels: int) -> np.ndarray:
    """Counts[i, j] = pixels with ground truth i predicted as j."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: pred {pred.shape} vs gt {gt.shape}")
    idx = gt.astype(np.int64).ravel() * n_labels + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=n_labels * n_labels).reshape(n_labels, n_labels)


def iou_per_class(pred, gt, class_index: int) -> float:
    """Intersection over union for one class; 1.0 when both sets are empty."""
    p = np.asarray(pred.labels if isinstance(pred, PseudoMask) else pred)
    g = np.asarray(gt.labels if isinstance(gt, PseudoMask) else gt)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    p_set = p == class_index
    g_set = g == class_index
    union = np.logical_or(p_set, g_set).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p_set, g_set).sum() / union)


def miou(per_class) -> float:
    """Arithmetic mean of per-class IoUs over the foreground classes."""
    values = list(per_class)
    if not values:
        raise ValidationError("miou requires at least one class IoU")
    return float(sum(values) / len(values))


def fwiou(per_class, gt_freq) -> float:
    """Frequency-weighted IoU: sum of freq_c * IoU_c over foreground."""
    values = list(per_class)
    freqs = list(gt_freq)
    if len(values) != len(freqs):
        raise ValidationError("fwiou needs one frequency per class IoU")
    if any(f < 0 for f in freqs):
        raise ValidationError("fwiou frequencies must be non-negative")
    if abs(sum(freqs) - 1.0) > 1e-9:
        raise ValidationError(f"fwiou frequencies must sum to 1, got {sum(freqs)}")
    return float(sum(f * v for f, v in zip(freqs, values)))


def round_half_up(x: float, places: int = 4) -> float:
    """Decimal rounding with ties away from zero, for reported tables."""
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_UP))


@dataclass
class EvalReport:
    """Aggregate metrics over a split, derived from one confusion matrix."""

    per_class_iou: dict[str, float]
    miou: float
    fwiou: float
    confusion: np.ndarray
    pixels: dict[str, int]

    def to_json_dict(self) -> dict:
        return {
            "per_class_iou": {k: v for k, v in self.per_class_iou.items()},
            "miou": self.miou,
            "fwiou": self.fwiou,
            "pixels": dict(self.pixels),
            "confusion": self.confusion.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        """Aligned plain-text table with 4-decimal half-up rounding."""
        rows = [("class", "iou", "gt_pixels")]
        for i, (name, value) in enumerate(self.per_class_iou.items(), start=1):
            rows.append((name, f"{round_half_up(value):.4f}", str(self.pixels.get(name, 0))))
        rows.append(("mIoU", f"{round_half_up(self.miou):.4f}", ""))
        rows.append(("fwIoU", f"{round_half_up(self.fwiou):.4f}", ""))
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
        lines.insert(1, "-" * max(len(line) for line in lines))
        return "\n".join(lines)


def report_from_confusion(confusion: np.ndarray, class_names) -> EvalReport:
    """Derive per-class IoU, mIoU and fwIoU from a global confusion matrix."""
    class_names = tuple(class_names)
    n = len(class_names) + 1
    if confusion.shape != (n, n):
        raise ShapeError(f"confusion shape {confusion.shape} != ({n}, {n})")
    per_class: dict[str, float] = {}
    gt_pixels: dict[str, int] = {}
    for ci, name in enumerate(class_names, start=1):
        inter = confusion[ci, ci]
        union = confusion[ci, :].sum() + confusion[:, ci].sum() - inter
        per_class[name] = 1.0 if union == 0 else float(inter / union)
        gt_pixels[name] = int(confusion[ci, :].sum())
    fg_total = sum(gt_pixels.values())
    if fg_total > 0:
        freqs = [gt_pixels[name] / fg_total for name in class_names]
    else:
        freqs = [1.0 / len(class_names)] * len(class_names)
    values = [per_class[name] for name in class_names]
    return EvalReport(
        per_class_iou=per_class,
        miou=miou(values),
        fwiou=fwiou(values, freqs),
        confusion=confusion,
        pixels=gt_pixels,
    )


def evaluate_masks(pairs, class_names) -> EvalReport:
    """Score (pred, gt) mask pairs with one accumulated confusion matrix."""
    class_names = tuple(class_names)
    n = len(class_names) + 1
    total = np.zeros((n, n), dtype=np.int64)
    count = 0
    for pred, gt in pairs:
        p = np.asarray(pred.labels if isinstance(pred, PseudoMask) else pred)
        g = np.asarray(gt.labels if isinstance(gt, PseudoMask) else gt)
        if p.max(initial=0) >= n or g.max(initial=0) >= n:
            raise ValidationError(f"mask contains labels outside 0..{n - 1}")
        total += confusion_matrix(p, g, n)
        count += 1
    if count == 0:
        raise ValidationError("evaluate_masks received no mask pairs")
    return report_from_confusion(total, class_names)


def evaluate_dirs(pred_dir, gt_dir, class_names) -> EvalReport:
    """Pair mask PNGs by filename across two directories and score them."""
    from .data import load_mask_png

    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds = {p.name: p for p in sorted(pred_dir.glob("*.png"))}
    gts = {p.name: p for p in sorted(gt_dir.glob("*.png"))}
    missing_gt = sorted(set(preds) - set(gts))
    missing_pred = sorted(set(gts) - set(preds))
    if not preds or not gts or not (set(preds) & set(gts)):
        raise EvalPairingError(
            f"no paired masks between {pred_dir} and {gt_dir}"
        )
    if missing_gt or missing_pred:
        raise EvalPairingError(
            f"unpaired masks; missing gt for {missing_gt}, missing pred for {missing_pred}"
        )
    names = sorted(preds)
    pairs = ((load_mask_png(preds[n]), load_mask_png(gts[n])) for n in names)
    return evaluate_masks(pairs, class_names)
