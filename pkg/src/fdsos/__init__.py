"""Toy open-set detection of fenestration and dehiscence on intraoral scenes.

Submodules: ``geometry`` (box types, IoU/GIoU, jitter), ``labelspace``
(tooth labels and conditional label flipping for denoising queries),
``matching`` (Hungarian matching with posterior-region no-care
assignment), ``losses`` (focal and box losses with analytic gradients),
``evaluation`` (COCO-style AP), ``synthdata`` (scene generator and COCO
I/O), ``model`` and ``training`` (toy detector and its training loop),
``plotting`` and ``cli``.
"""

from .evaluation import EvalReport, coco_ap
from .geometry import BoxCXCYWH, BoxXYXY, giou, iou
from .labelspace import (
    VOCABULARY,
    ToothLabel,
    sample_denoising_queries,
    transition_distribution,
    uniform_transition_distribution,
)
from .losses import LossConfig, focal_contrastive_loss, localization_loss, total_loss
from .matching import Assignment, CostWeights, Outcome, anterior_extremities, hungarian, match, posterior_mask
from .model import ToyDetector
from .synthdata import DatasetSpec, Scene, generate, generate_multitask, load_coco, save_coco
from .training import TrainConfig, ablate, evaluate, train, train_model

__version__ = "0.1.0"

__all__ = [
    "Assignment",
    "BoxCXCYWH",
    "BoxXYXY",
    "CostWeights",
    "DatasetSpec",
    "EvalReport",
    "LossConfig",
    "Outcome",
    "Scene",
    "ToothLabel",
    "ToyDetector",
    "TrainConfig",
    "VOCABULARY",
    "ablate",
    "anterior_extremities",
    "coco_ap",
    "evaluate",
    "focal_contrastive_loss",
    "generate",
    "generate_multitask",
    "giou",
    "hungarian",
    "iou",
    "load_coco",
    "localization_loss",
    "match",
    "posterior_mask",
    "sample_denoising_queries",
    "save_coco",
    "total_loss",
    "train",
    "train_model",
    "transition_distribution",
    "uniform_transition_distribution",
]
