"""Co-training loop: plain SGD over all branches jointly, deterministic
shuffling and augmentation streams, and checkpoint persistence.

Determinism contract: a fixed (seed, data, config) triple produces
identical loss traces and identical checkpoint bytes, and a resumed run
matches an uninterrupted one. All randomness is derived statelessly from
(seed, epoch, patch index), so the recoverable RNG state is just those
counters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig
from .data import LabeledPatch, augment, patch_rng
from .errors import DataError, ShapeError, TrainingAbort, ValidationError
from .losses import LossBreakdown
from .model import build_model

_SHUFFLE_TAG = 7001
_AUGMENT_TAG = 7002


def sgd_step(param: Tensor, grad: np.ndarray, lr: float, weight_decay: float, name: str = "param") -> None:
    """w <- w - lr * (g + weight_decay * w), in place on the parameter."""
    grad = np.asarray(grad)
    if grad.shape != param.data.shape:
        raise ShapeError(f"gradient shape {grad.shape} != parameter shape {param.data.shape}")
    if not np.all(np.isfinite(grad)):
        raise TrainingAbort(f"non-finite gradient for parameter {name!r}")
    param.data = param.data - lr * (grad + weight_decay * param.data)


class SGD:
    """SGD over a named parameter registry, optional classical momentum."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0, momentum: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self._velocity: dict[str, np.ndarray] = {}
        if momentum > 0:
            self._velocity = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise TrainingAbort(f"non-finite gradient for parameter {name!r}")
            g_eff = g + self.weight_decay * p.data
            if self.momentum > 0:
                v = self._velocity[name]
                v *= self.momentum
                v += g_eff
                g_eff = v
            p.data = p.data - lr * g_eff

    def state_arrays(self) -> dict[str, np.ndarray]:
        return dict(self._velocity)

    def restore_state(self, name: str, arr: np.ndarray) -> None:
        if self.momentum > 0 and name in self._velocity:
            self._velocity[name] = arr.copy()


def epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for a 0-based epoch under the configured schedule."""
    if cfg.lr_schedule == "poly":
        return cfg.lr * (1.0 - epoch / cfg.epochs) ** 0.9
    return cfg.lr


def co_train_step(model, images: np.ndarray, labels: np.ndarray, optimizer: SGD, lr: float | None = None) -> LossBreakdown:
    """One joint update: forward all branches, one backward, step everything."""
    if images.shape[0] == 0:
        raise ValidationError("co_train_step requires a non-empty batch")
    optimizer.zero_grad()
    total, breakdown = model.objective(images, labels, training=True)
    if not np.isfinite(breakdown.total):
        raise TrainingAbort(
            f"objective became non-finite: {breakdown.to_dict()}", breakdown=breakdown
        )
    total.backward()
    optimizer.step(lr)
    return breakdown


@dataclass
class TrainResult:
    model: object
    optimizer: SGD
    cfg: TrainConfig
    history: list[dict] = field(default_factory=list)
    final_epoch: int = 0


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def _epoch_record(epoch_1based: int, sums: dict[str, float], steps: int) -> dict:
    rec = {"epoch": epoch_1based}
    rec.update({k: v / steps for k, v in sums.items()})
    rec["steps"] = steps
    return rec


def train(
    cfg: TrainConfig,
    patches: list[LabeledPatch],
    *,
    resume_from=None,
    log_fn=None,
    dtype=np.float32,
) -> TrainResult:
    """Run the epoch loop; optionally continue from a checkpoint tuple.

    ``resume_from`` is (model, optimizer, completed_epochs) as returned
    by checkpoint loading; the embedded config must be used by the
    caller. ``log_fn`` receives one dict per epoch.
    """
    if len(patches) < cfg.batch_size:
        raise DataError(
            f"dataset has {len(patches)} items, fewer than batch_size {cfg.batch_size}"
        )
    for p in patches:
        if p.image.shape != (3, cfg.image_size, cfg.image_size):
            raise DataError(
                f"patch {p.id!r} has shape {p.image.shape}, expected "
                f"(3, {cfg.image_size}, {cfg.image_size})"
            )
        if p.label.shape != (len(cfg.class_names),):
            raise DataError(f"patch {p.id!r} label length != {len(cfg.class_names)}")
        if p.label.sum() < 1:
            raise DataError(f"patch {p.id!r} has no positive class")

    if resume_from is not None:
        model, optimizer, start_epoch = resume_from
        if start_epoch > cfg.epochs:
            raise ValidationError(
                f"checkpoint already at epoch {start_epoch} > configured {cfg.epochs}"
            )
    else:
        model = build_model(cfg, dtype)
        optimizer = SGD(model.params(), lr=cfg.lr, weight_decay=cfg.weight_decay, momentum=cfg.momentum)
        start_epoch = 0

    history: list[dict] = []
    n = len(patches)
    # Per-op NaN scans are redundant here: each step already aborts on a
    # non-finite loss and the optimizer rejects non-finite gradients.
    with ad.debug_checks(False):
        for epoch in range(start_epoch, cfg.epochs):
            shuffle_rng = patch_rng(cfg.seed, (_SHUFFLE_TAG, epoch))
            order = shuffle_rng.permutation(n)
            lr = epoch_lr(cfg, epoch)
            sums: dict[str, float] = {}
            steps = 0
            for batch_idx in _batches(order, cfg.batch_size):
                batch = []
                for idx in batch_idx:
                    p = patches[int(idx)]
                    if cfg.augment:
                        p = augment(p, patch_rng(cfg.seed, (_AUGMENT_TAG, epoch, int(idx))))
                    batch.append(p)
                images = np.stack([p.image for p in batch])
                labels = np.stack([p.label for p in batch])
                breakdown = co_train_step(model, images, labels, optimizer, lr)
                for k, v in breakdown.to_dict().items():
                    sums[k] = sums.get(k, 0.0) + v
                steps += 1
            record = _epoch_record(epoch + 1, sums, steps)
            history.append(record)
            if log_fn is not None:
                log_fn(record)

    return TrainResult(
        model=model,
        optimizer=optimizer,
        cfg=cfg,
        history=history,
        final_epoch=cfg.epochs,
    )
