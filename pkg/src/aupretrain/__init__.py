"""Noisy-label pre-training and transfer of a VGG13 facial action-unit detector, in numpy."""

from .checkpoint import load_checkpoint, save_checkpoint
from .datapipe import AugmentConfig, Manifest, SampleRecord, load_manifest, preprocess, write_manifest
from .errors import ConfigError, ContractError, FormatError, ManifestError, ShapeError
from .estimator import AUDetector, FacePreprocessor
from .metrics import MetricsReport, build_report, confusion_counts, f1_score, pr_auc, roc_auc
from .network import VGG13, build_vgg13, replace_head
from .splits import FoldAssignment, sample_by_images, sample_by_subjects, subject_kfold
from .synthgen import SynthSpec, generate_dataset, render_image
from .tensor import Tensor
from .trainer import TrainConfig, TrainHistory, evaluate_model, finetune, pretrain

__version__ = "0.1.0"

__all__ = [
    "AUDetector", "AugmentConfig", "ConfigError", "ContractError", "FacePreprocessor", "FoldAssignment",
    "FormatError", "Manifest", "ManifestError", "MetricsReport", "SampleRecord", "ShapeError", "SynthSpec",
    "Tensor", "TrainConfig", "TrainHistory", "VGG13", "build_report", "build_vgg13", "confusion_counts",
    "evaluate_model", "f1_score", "finetune", "generate_dataset", "load_checkpoint", "load_manifest",
    "pr_auc", "preprocess", "pretrain", "render_image", "replace_head", "roc_auc", "sample_by_images",
    "sample_by_subjects", "save_checkpoint", "subject_kfold", "write_manifest",
]
