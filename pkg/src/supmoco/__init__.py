"""Supervised momentum contrast on synthetic multi-domain data."""

from .analysis import CollapseReport, RetrievalSpec, analyze
from .data import AugmentationSpec, Dataset, SyntheticSpec, generate_synthetic, mask_labels
from .encoder import EncoderConfig, EncoderPair, embed, init_pair
from .fewshot import EpisodeConfig, FinetuneConfig, average_rank, evaluate
from .losses import moco_loss, simclr_loss, supcon_loss, supmoco_loss
from .queue import UNLABELED, FeatureQueue
from .trainer import TrainConfig, Trainer, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AugmentationSpec",
    "CollapseReport",
    "Dataset",
    "EncoderConfig",
    "EncoderPair",
    "EpisodeConfig",
    "FeatureQueue",
    "FinetuneConfig",
    "RetrievalSpec",
    "SyntheticSpec",
    "TrainConfig",
    "Trainer",
    "UNLABELED",
    "analyze",
    "average_rank",
    "embed",
    "evaluate",
    "generate_synthetic",
    "init_pair",
    "load_checkpoint",
    "mask_labels",
    "moco_loss",
    "save_checkpoint",
    "simclr_loss",
    "supcon_loss",
    "supmoco_loss",
    "train",
]
