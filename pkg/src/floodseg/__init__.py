"""Flood-scene semantic segmentation with frozen patch-embedding fusion.

U-Net and DeepLabV3 baselines, optionally fused with a frozen ViT patch
grid, trained on a class-frequency weighted focal + dice loss.
"""

from .backbones import BackboneSpec, build_backbone, extract_patch_embeddings, parameter_digest
from .catalog import ClassCatalog, SemanticClass
from .config import TrainingConfig, load_config, save_config
from .data import AugmentationConfig, DatasetIndex, class_pixel_counts, preprocess, scan_dataset
from .errors import (
    BackboneLoadError,
    CheckpointError,
    ContractError,
    DataError,
    DivergenceError,
    FloodSegError,
    InvalidOffsetError,
)
from .evaluation import comparison_report, evaluate, predict_and_colorize, render_report
from .losses import AlphaDerivationConfig, LossConfig, compute_alpha, dice_loss, loss_gradient, total_loss, weighted_focal_loss
from .metrics import ConfusionMatrix, MetricsReport, accumulate, mean_iou, per_class_iou
from .models import ModelConfig, build_model, forward
from .synthetic import make_synthetic_dataset
from .training import fit, load_checkpoint, lr_on_plateau, replay_lr, run_ablation, save_checkpoint

__version__ = "0.1.0"
