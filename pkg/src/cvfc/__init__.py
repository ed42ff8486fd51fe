"""Cross-view feature-consistency pseudo-mask generation.

Three co-trained convolutional branches produce class activation maps
from image-level labels; a feature-space attention matrix from the
middle branch refines all three; consistency losses couple them. The
refined middle-branch CAM becomes a pixel-level pseudo-mask.
"""

from .attention import AttentionMatrix, QKProjection, attention_matrix, project_qk, refine_cam, suppress_non_max
from .autodiff import Tensor, grad_check
from .backbones import Backbone, BackboneConfig, StageConfig, build_backbone
from .cam import CamHead, CamStack, ClassScores, cam_forward, integrate_taps, normalize_cam
from .config import TrainConfig
from .data import LabeledPatch, augment, load_dataset, load_patches, parse_bracket_label, synth_generate, write_dataset
from .estimator import CvfcSegmenter
from .evaluation import EvalReport, PseudoMask, evaluate_dirs, evaluate_masks, fwiou, iou_per_class, miou
from .losses import LossBreakdown, classification_loss, consistency_loss, cross_loss, multilabel_soft_margin, total_loss
from .model import CvfcModel, SingleBranchModel, build_model
from .train import SGD, TrainResult, co_train_step, sgd_step, train

__version__ = "0.1.0"

__all__ = [
    "AttentionMatrix",
    "Backbone",
    "BackboneConfig",
    "CamHead",
    "CamStack",
    "ClassScores",
    "CvfcModel",
    "CvfcSegmenter",
    "EvalReport",
    "LabeledPatch",
    "LossBreakdown",
    "PseudoMask",
    "QKProjection",
    "SGD",
    "SingleBranchModel",
    "StageConfig",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "attention_matrix",
    "augment",
    "build_backbone",
    "build_model",
    "cam_forward",
    "classification_loss",
    "co_train_step",
    "consistency_loss",
    "cross_loss",
    "evaluate_dirs",
    "evaluate_masks",
    "fwiou",
    "grad_check",
    "integrate_taps",
    "iou_per_class",
    "load_dataset",
    "load_patches",
    "miou",
    "multilabel_soft_margin",
    "normalize_cam",
    "parse_bracket_label",
    "project_qk",
    "refine_cam",
    "sgd_step",
    "suppress_non_max",
    "synth_generate",
    "total_loss",
    "train",
    "write_dataset",
]
