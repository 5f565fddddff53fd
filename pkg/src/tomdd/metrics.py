"""Dice/F1 metrics and volume-level evaluation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import LabeledSet, to_tensor


def f1_score(pred_mask: np.ndarray, gt_mask: np.ndarray, class_id: int = 1) -> float:
    """2|P&G| / (|P|+|G|); 1.0 if both sets are empty."""
    pred_mask, gt_mask = np.asarray(pred_mask), np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch: {pred_mask.shape} vs {gt_mask.shape}")
    return f1_from_counts(*overlap_counts(pred_mask, gt_mask, class_id))


def overlap_counts(pred_mask: np.ndarray, gt_mask: np.ndarray, class_id: int = 1) -> tuple[int, int, int]:
    p = pred_mask == class_id
    g = gt_mask == class_id
    return int(np.count_nonzero(p & g)), int(np.count_nonzero(p)), int(np.count_nonzero(g))


def f1_from_counts(inter: int, n_pred: int, n_gt: int) -> float:
    if n_pred + n_gt == 0:
        return 1.0
    return 2.0 * inter / (n_pred + n_gt)


@dataclass
class MetricReport:
    per_volume_f1: list[tuple[int, float]]
    mean_f1: float
    std_f1: float
    method: str = ""
    config_hash: str = ""
    per_slice_f1: list[float] = field(default_factory=list)
    mean_slice_f1: float = float("nan")

    @classmethod
    def from_volumes(cls, per_volume: list[tuple[int, float]], **kw) -> "MetricReport":
        vals = np.array([v for _, v in per_volume], dtype=np.float64)
        return cls(per_volume_f1=[(int(i), float(v)) for i, v in per_volume],
                   mean_f1=float(vals.mean()), std_f1=float(vals.std()), **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        d["per_volume_f1"] = [tuple(x) for x in d["per_volume_f1"]]
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


@torch.no_grad()
def predict(model, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        out.append(model(to_tensor(images[i:i + batch_size])).argmax(1).numpy().astype(np.uint8))
    model.train(was_training)
    return np.concatenate(out)


def evaluate(model, data: LabeledSet, class_id: int = 1, method: str = "", config_hash: str = "",
             predictions: np.ndarray | None = None) -> MetricReport:
    """Volume-pooled F1 per volume, then mean/std across volumes. No augmentation."""
    if len(data) == 0:
        raise ValueError("empty test set")
    pred = predict(model, data.images) if predictions is None else predictions
    per_volume = []
    for vid in data.volumes:
        sel = data.volume_ids == vid
        counts = overlap_counts(pred[sel], data.masks[sel], class_id)
        per_volume.append((vid, f1_from_counts(*counts)))
    per_slice = [f1_score(p, g, class_id) for p, g in zip(pred, data.masks)]
    report = MetricReport.from_volumes(per_volume, method=method, config_hash=config_hash)
    report.per_slice_f1 = per_slice
    report.mean_slice_f1 = float(np.mean(per_slice))
    return report
