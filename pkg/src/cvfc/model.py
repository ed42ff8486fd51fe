"""Wiring of backbones, CAM heads, attention and losses into one model.

``CvfcModel`` is the three-branch co-trained network: two "mini38"
outer branches, a "mini50" middle branch whose integrated features
drive the attention matrix, and per-branch CAM heads. All branch
parameters are disjoint. ``SingleBranchModel`` is the
classification-only ablation baseline sharing the same interfaces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import AttentionMatrix, QKProjection, attention_matrix, project_qk, refine_cam, suppress_non_max
from .autodiff import Tensor
from .backbones import Backbone, build_backbone
from .cam import CamHead, CamStack, ClassScores, integrate_taps, normalize_cam
from .config import TrainConfig
from .errors import ConfigError, ShapeError, ValidationError
from .evaluation import cam_to_mask
from .losses import LossBreakdown, consistency_loss, cross_loss, multilabel_soft_margin, total_loss


@dataclass
class ForwardPass:
    """All intermediate products of one three-branch forward pass."""

    scores: tuple[ClassScores, ClassScores, ClassScores]
    cams: tuple[CamStack, CamStack, CamStack]
    refined: tuple[CamStack, CamStack, CamStack]
    attention: AttentionMatrix


def _child_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, index])


def _branch_guard(name: str):
    class _Guard:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc_type is not None and issubclass(exc_type, ShapeError):
                raise ShapeError(f"{name}: {exc}") from exc
            return False

    return _Guard()


class CvfcModel:
    """Three co-trained branches coupled by a shared attention matrix."""

    def __init__(self, cfg: TrainConfig, dtype=np.float32):
        if cfg.arch != "cvfc":
            raise ConfigError(f"CvfcModel requires arch 'cvfc', got {cfg.arch!r}")
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.class_names = cfg.class_names

        self.backbone1 = build_backbone(cfg.branch1, _child_seed(cfg.seed, 1), dtype)
        self.backbone2 = build_backbone(cfg.branch2, _child_seed(cfg.seed, 2), dtype)
        self.backbone3 = build_backbone(cfg.branch3, _child_seed(cfg.seed, 3), dtype)

        def head_for(bb: Backbone, index: int) -> CamHead:
            channels = sum(bb.tap_channels().values())
            rng = np.random.default_rng(_child_seed(cfg.seed, 10 + index))
            return CamHead(rng, channels, cfg.class_names, dtype)

        self.head1 = head_for(self.backbone1, 1)
        self.head2 = head_for(self.backbone2, 2)
        self.head3 = head_for(self.backbone3, 3)

        sp = self.backbone2.stride_product
        if cfg.attention_resolution is not None:
            self.attention_res = int(cfg.attention_resolution)
        else:
            if cfg.image_size % sp:
                raise ConfigError(
                    f"image_size {cfg.image_size} not divisible by branch-2 stride product {sp}"
                )
            self.attention_res = cfg.image_size // sp
        if self.attention_res < 1:
            raise ConfigError("attention resolution must be >= 1")

        feat_channels = sum(self.backbone2.tap_channels().values())
        self.qk = QKProjection.create(
            np.random.default_rng(_child_seed(cfg.seed, 20)),
            feat_channels,
            cfg.attention_dim,
            dtype,
        )

    # -- parameter registry -------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.backbone1.params("branch1"))
        out.update(self.backbone2.params("branch2"))
        out.update(self.backbone3.params("branch3"))
        out.update(self.head1.params("head1"))
        out.update(self.head2.params("head2"))
        out.update(self.head3.params("head3"))
        out.update(self.qk.params("qk"))
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        out.update(self.backbone1.buffers("branch1"))
        out.update(self.backbone2.buffers("branch2"))
        out.update(self.backbone3.buffers("branch3"))
        return out

    # -- forward --------------------------------------------------------

    def normalize_images(self, images: np.ndarray) -> Tensor:
        """[N,3,H,W] in [0, 1] -> standardized input tensor."""
        arr = np.asarray(images, dtype=self.dtype)
        if arr.ndim != 4 or arr.shape[1] != 3:
            raise ShapeError(f"expected [N,3,H,W] images, got {arr.shape}")
        return Tensor((arr - self.cfg.normalize_mean) / self.cfg.normalize_std)

    def forward_all(self, images: np.ndarray, training: bool = False) -> ForwardPass:
        """Full pipeline: taps, integration, CAMs, attention, refinement."""
        x = self.normalize_images(images)

        branch_out = []
        for name, bb, head in (
            ("branch1", self.backbone1, self.head1),
            ("branch2", self.backbone2, self.head2),
            ("branch3", self.backbone3, self.head3),
        ):
            with _branch_guard(name):
                feat = integrate_taps(bb.forward(x, training))
                cam, scores = head(feat)
            branch_out.append((feat, cam, scores))

        feat2 = branch_out[1][0]
        with _branch_guard("branch2"):
            att_feat = ad.adaptive_avg_pool(feat2, self.attention_res, self.attention_res)
            q, k = project_qk(att_feat, self.qk)
            attn = attention_matrix(q, k, self.attention_res, self.attention_res)

        refined = tuple(
            normalize_cam(refine_cam(cam, attn)) for _, cam, _ in branch_out
        )
        return ForwardPass(
            scores=tuple(s for _, _, s in branch_out),
            cams=tuple(c for _, c, _ in branch_out),
            refined=refined,
            attention=attn,
        )

    def objective(self, images: np.ndarray, labels: np.ndarray, training: bool = True):
        """Forward pass plus the four-term loss; returns (tensor, breakdown)."""
        fwd = self.forward_all(images, training)
        cfg = self.cfg
        parts = tuple(
            multilabel_soft_margin(s.logits, labels) for s in fwd.scores
        )
        r1, r2, r3 = (r.maps for r in fwd.refined)
        l_cons = consistency_loss(r1, r3, cfg.loss_norm)
        l_cross = cross_loss(r1, r2, r3, cfg.loss_norm, cfg.cross_variant)
        total, breakdown = total_loss(parts, l_cons, l_cross)
        return total, breakdown

    # -- inference --------------------------------------------------------

    def _refined_branch2(self, images: np.ndarray):
        """Branch-2 refined CAM and scores, on a gradient-free graph."""
        x = self.normalize_images(images)
        feat = integrate_taps(self.backbone2.forward(x, training=False))
        cam, scores = self.head2(feat)
        att_feat = ad.adaptive_avg_pool(feat, self.attention_res, self.attention_res)
        q, k = project_qk(att_feat, self.qk)
        attn = attention_matrix(q, k, self.attention_res, self.attention_res)
        return refine_cam(cam, attn), scores

    def infer_pseudo_labels(
        self,
        images: np.ndarray,
        threshold: float | None = None,
        score_gate: float | None = None,
    ) -> list[np.ndarray]:
        """Pseudo-mask per image from the refined middle-branch CAM.

        Class maps whose sigmoid score falls below ``score_gate`` are
        zeroed before normalization; otherwise per-class min-max rescaling
        would manufacture a full-range map for absent classes.
        """
        threshold = self.cfg.bg_threshold if threshold is None else threshold
        score_gate = self.cfg.score_gate if score_gate is None else score_gate
        if not 0 <= threshold < 1:
            raise ValidationError(f"threshold must be in [0, 1), got {threshold}")
        out_h, out_w = int(images.shape[2]), int(images.shape[3])
        with ad.no_grad():
            refined, scores = self._refined_branch2(images)
            gated = refined.maps.data.copy()
            gated[scores.scores.data < score_gate] = 0.0
            stack = normalize_cam(CamStack(Tensor(gated), self.class_names))
            stack = suppress_non_max(stack)
            return [
                cam_to_mask(stack.maps.data[n], threshold, (out_h, out_w))
                for n in range(gated.shape[0])
            ]

    def predict_scores(self, images: np.ndarray) -> np.ndarray:
        """Branch-2 sigmoid class scores [N, C]."""
        with ad.no_grad():
            _, scores = self._refined_branch2(images)
            return scores.scores.data.copy()


class SingleBranchModel:
    """One backbone + CAM head trained with the classification loss only."""

    def __init__(self, cfg: TrainConfig, dtype=np.float32):
        if cfg.arch == "cvfc":
            raise ConfigError(f"SingleBranchModel requires a preset arch, got {cfg.arch!r}")
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.class_names = cfg.class_names
        self.backbone = build_backbone(cfg.arch, _child_seed(cfg.seed, 1), dtype)
        channels = sum(self.backbone.tap_channels().values())
        rng = np.random.default_rng(_child_seed(cfg.seed, 10))
        self.head = CamHead(rng, channels, cfg.class_names, dtype)

    def params(self) -> dict[str, Tensor]:
        out = self.backbone.params("branch")
        out.update(self.head.params("head"))
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return self.backbone.buffers("branch")

    def normalize_images(self, images: np.ndarray) -> Tensor:
        arr = np.asarray(images, dtype=self.dtype)
        if arr.ndim != 4 or arr.shape[1] != 3:
            raise ShapeError(f"expected [N,3,H,W] images, got {arr.shape}")
        return Tensor((arr - self.cfg.normalize_mean) / self.cfg.normalize_std)

    def _cam_scores(self, images: np.ndarray, training: bool):
        x = self.normalize_images(images)
        feat = integrate_taps(self.backbone.forward(x, training))
        return self.head(feat)

    def objective(self, images: np.ndarray, labels: np.ndarray, training: bool = True):
        _, scores = self._cam_scores(images, training)
        l_cls = multilabel_soft_margin(scores.logits, labels)
        value = l_cls.item()
        breakdown = LossBreakdown(
            l_cls_1=value, l_cls_2=0.0, l_cls_3=0.0,
            l_cls_total=value, l_cons=0.0, l_cross=0.0, total=value,
        )
        return l_cls, breakdown

    def infer_pseudo_labels(
        self,
        images: np.ndarray,
        threshold: float | None = None,
        score_gate: float | None = None,
    ) -> list[np.ndarray]:
        threshold = self.cfg.bg_threshold if threshold is None else threshold
        score_gate = self.cfg.score_gate if score_gate is None else score_gate
        if not 0 <= threshold < 1:
            raise ValidationError(f"threshold must be in [0, 1), got {threshold}")
        out_h, out_w = int(images.shape[2]), int(images.shape[3])
        with ad.no_grad():
            cam, scores = self._cam_scores(images, training=False)
            gated = cam.maps.data.copy()
            gated[scores.scores.data < score_gate] = 0.0
            stack = normalize_cam(CamStack(Tensor(gated), self.class_names))
            stack = suppress_non_max(stack)
            return [
                cam_to_mask(stack.maps.data[n], threshold, (out_h, out_w))
                for n in range(gated.shape[0])
            ]

    def predict_scores(self, images: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            _, scores = self._cam_scores(images, training=False)
            return scores.scores.data.copy()


def build_model(cfg: TrainConfig, dtype=np.float32):
    """Model factory keyed on ``cfg.arch``."""
    if cfg.arch == "cvfc":
        return CvfcModel(cfg, dtype)
    return SingleBranchModel(cfg, dtype)
