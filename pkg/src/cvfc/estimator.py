"""Scikit-learn style estimator facade.

``CvfcSegmenter`` wraps dataset assembly, co-training and pseudo-mask
inference behind fit/predict so the pipeline composes with the wider
ecosystem (clone, get_params, grid search over hyperparameters).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import TrainConfig
from .data import LabeledPatch
from .evaluation import evaluate_masks
from .train import train


def validate_images(X) -> np.ndarray:
    """Coerce input images to float32 [n, 3, H, W] in [0, 1].

    Accepts channel-first [n, 3, H, W] or channel-last [n, H, W, 3].
    """
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim != 4:
        raise ValueError(f"X must be a 4-d image batch, got shape {arr.shape}")
    if arr.shape[1] != 3 and arr.shape[-1] == 3:
        arr = np.ascontiguousarray(arr.transpose(0, 3, 1, 2))
    if arr.shape[1] != 3:
        raise ValueError(f"X must carry 3 channels, got shape {arr.shape}")
    if arr.min() < -1e-6 or arr.max() > 1 + 1e-6:
        raise ValueError("X values must lie in [0, 1]")
    if arr.shape[2] != arr.shape[3]:
        raise ValueError(f"images must be square, got {arr.shape[2]}x{arr.shape[3]}")
    return np.clip(arr, 0.0, 1.0)


def validate_multihot(y, n_samples: int, n_classes: int) -> np.ndarray:
    """Coerce labels to an int8 multi-hot matrix [n, C]."""
    arr = np.asarray(y)
    if arr.shape != (n_samples, n_classes):
        raise ValueError(f"y must have shape ({n_samples}, {n_classes}), got {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("y must be binary multi-hot")
    if (arr.sum(axis=1) < 1).any():
        raise ValueError("every sample needs at least one positive class")
    return arr.astype(np.int8)


class CvfcSegmenter(BaseEstimator):
    """Weakly supervised segmenter: image-level labels in, masks out.

    Parameters mirror the training configuration; ``fit`` expects images
    in [0, 1] with multi-hot labels, ``predict`` returns class-index
    masks (0 = background) at input resolution.
    """

    def __init__(
        self,
        epochs=40,
        lr=0.006,
        weight_decay=0.01,
        batch_size=8,
        seed=0,
        class_names=("tumor", "stroma", "normal"),
        arch="cvfc",
        bg_threshold=0.3,
        score_gate=0.5,
        augment=True,
    ):
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.seed = seed
        self.class_names = class_names
        self.arch = arch
        self.bg_threshold = bg_threshold
        self.score_gate = score_gate
        self.augment = augment

    def _config(self, image_size: int) -> TrainConfig:
        return TrainConfig(
            seed=self.seed,
            epochs=self.epochs,
            lr=self.lr,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            image_size=image_size,
            class_names=tuple(self.class_names),
            arch=self.arch,
            bg_threshold=self.bg_threshold,
            score_gate=self.score_gate,
            augment=self.augment,
        )

    def fit(self, X, y):
        images = validate_images(X)
        labels = validate_multihot(y, images.shape[0], len(self.class_names))
        patches = [
            LabeledPatch(image=images[i], label=labels[i], id=f"fit-{i:05d}")
            for i in range(images.shape[0])
        ]
        cfg = self._config(image_size=images.shape[2])
        result = train(cfg, patches)
        self.model_ = result.model
        self.config_ = cfg
        self.history_ = result.history
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("CvfcSegmenter must be fitted before prediction")

    def predict(self, X) -> np.ndarray:
        """Pseudo-masks [n, H, W] with 0 = background, 1..C = classes."""
        self._check_fitted()
        images = validate_images(X)
        masks = []
        for i in range(0, images.shape[0], max(self.batch_size, 1)):
            masks.extend(self.model_.infer_pseudo_labels(images[i : i + self.batch_size]))
        return np.stack(masks)

    def predict_proba(self, X) -> np.ndarray:
        """Per-class sigmoid scores [n, C] from the pseudo-label branch."""
        self._check_fitted()
        images = validate_images(X)
        out = []
        for i in range(0, images.shape[0], max(self.batch_size, 1)):
            out.append(self.model_.predict_scores(images[i : i + self.batch_size]))
        return np.concatenate(out, axis=0)

    def score(self, X, y) -> float:
        """Mean IoU of predicted masks against ground-truth index masks."""
        self._check_fitted()
        preds = self.predict(X)
        gts = np.asarray(y)
        if gts.shape != preds.shape:
            raise ValueError(f"ground-truth masks {gts.shape} != predictions {preds.shape}")
        report = evaluate_masks(zip(preds, gts), tuple(self.class_names))
        return report.miou
