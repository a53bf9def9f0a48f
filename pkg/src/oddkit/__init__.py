"""Masked-object anomaly detection with autoencoders trained from scratch on numpy."""

from .coco import AugmentationPolicy, ObjectPatch, augment, extract_patch, make_split
from .evaluation import compare_models, roc_auc
from .models import ArchitectureDescriptor, ModelBundle, build
from .scoring import detect, rank_extremes
from .trainer import TrainConfig, train

__version__ = "0.1.0"
