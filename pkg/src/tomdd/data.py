"""In-memory dataset views and seeded batch streams."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch

from .phantom import AugmentConfig, Domain, PhantomSpec, Sample, augment, generate_volume, load_manifest, read_sample


@dataclass(frozen=True)
class LabeledSet:
    images: np.ndarray  # (N, H, W) float32
    masks: np.ndarray  # (N, H, W) uint8
    volume_ids: np.ndarray  # (N,)
    slice_index: np.ndarray  # (N,)
    num_classes: int
    domain: Domain = Domain.SOURCE

    def __post_init__(self):
        if len(self.images) == 0:
            raise ValueError("empty dataset")
        if self.images.shape != self.masks.shape:
            raise ValueError("images and masks must be co-shaped")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def volumes(self) -> list[int]:
        return sorted(set(int(v) for v in self.volume_ids))

    def select_volumes(self, ids) -> "LabeledSet":
        keep = np.isin(self.volume_ids, list(ids))
        return LabeledSet(self.images[keep], self.masks[keep], self.volume_ids[keep], self.slice_index[keep],
                          self.num_classes, self.domain)

    def strip_labels(self) -> "UnlabeledSet":
        return UnlabeledSet(self.images, self.volume_ids, self.slice_index, self.domain)

    def sample(self, i: int) -> Sample:
        return Sample(self.images[i], self.masks[i], self.domain, int(self.volume_ids[i]), int(self.slice_index[i]))


@dataclass(frozen=True)
class UnlabeledSet:
    """Target images with no mask field at all; adaptation code only ever sees this."""

    images: np.ndarray
    volume_ids: np.ndarray
    slice_index: np.ndarray
    domain: Domain = Domain.TARGET

    def __post_init__(self):
        if len(self.images) == 0:
            raise ValueError("empty dataset")

    def __len__(self) -> int:
        return len(self.images)

    def sample(self, i: int) -> Sample:
        dummy = np.zeros(self.images[i].shape, dtype=np.uint8)
        return Sample(self.images[i], dummy, self.domain, int(self.volume_ids[i]), int(self.slice_index[i]))


def from_samples(samples: list[Sample], num_classes: int) -> LabeledSet:
    return LabeledSet(
        images=np.stack([s.image for s in samples]).astype(np.float32),
        masks=np.stack([s.mask for s in samples]).astype(np.uint8),
        volume_ids=np.array([s.volume_id for s in samples]),
        slice_index=np.array([s.slice_index for s in samples]),
        num_classes=num_classes,
        domain=samples[0].domain,
    )


def generate_in_memory(spec: PhantomSpec, domain: Domain | str) -> LabeledSet:
    spec.validate()
    samples = [s for v in range(spec.volumes) for s in generate_volume(spec, domain, v)]
    return from_samples(samples, spec.num_classes)


def load_dataset(data_dir: str | Path) -> tuple[LabeledSet, dict]:
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    samples = []
    for vid, files in sorted(manifest["volumes"].items(), key=lambda kv: int(kv[0])):
        for s, rel in enumerate(files):
            image, mask, _ = read_sample(data_dir / rel)
            samples.append(Sample(image, mask, Domain(manifest["domain"]), int(vid), s))
    return from_samples(samples, manifest["num_classes"]), manifest


def split(data: LabeledSet, splits: dict[str, list[int]]) -> dict[str, LabeledSet]:
    return {name: data.select_volumes(ids) for name, ids in splits.items() if ids}


class BatchStream:
    """Endless seeded stream of augmented batches, reshuffled every pass."""

    def __init__(self, data: LabeledSet | UnlabeledSet, batch_size: int, seed: int,
                 aug: Optional[AugmentConfig] = None):
        self.data = data
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.aug = aug
        self.labeled = isinstance(data, LabeledSet)
        self._order: list[int] = []

    def _next_index(self) -> int:
        if not self._order:
            self._order = list(self.rng.permutation(len(self.data)))
        return int(self._order.pop())

    def __iter__(self) -> Iterator:
        return self

    def __next__(self):
        images, masks = [], []
        for _ in range(self.batch_size):
            s = self.data.sample(self._next_index())
            if self.aug is not None:
                s = augment(s, self.rng, self.aug)
            images.append(s.image)
            masks.append(s.mask)
        x = torch.from_numpy(np.stack(images)[:, None].astype(np.float32))
        if not self.labeled:
            return x
        return x, torch.from_numpy(np.stack(masks).astype(np.int64))


def to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)[:, None])
