"""Unsupervised domain adaptation for segmentation with a target-only discrepancy objective."""
from __future__ import annotations

__version__ = "0.1.0"

from .adapt import AdaptConfig, TrainHistory, adapt, finetune_fewshot, pretrain_source  # noqa: E402
from .metrics import MetricReport, evaluate, f1_score  # noqa: E402
from .model import DESK_SCALE, FULL_SCALE, ModelBundle, UNetConfig, build_unet, duplicate_head  # noqa: E402
from .phantom import PhantomSpec, ShiftParams, generate_dataset  # noqa: E402

__all__ = [
    "AdaptConfig", "TrainHistory", "adapt", "finetune_fewshot", "pretrain_source",
    "MetricReport", "evaluate", "f1_score",
    "DESK_SCALE", "FULL_SCALE", "ModelBundle", "UNetConfig", "build_unet", "duplicate_head",
    "PhantomSpec", "ShiftParams", "generate_dataset",
]
