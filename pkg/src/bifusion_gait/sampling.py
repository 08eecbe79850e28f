"""P x K x T batch assembly for triplet training."""

from __future__ import annotations

from dataclasses import dataclass
import logging
from typing import Protocol, Sequence

import numpy as np

from bifusion_gait.dataset import DatasetEntry, normalize_keypoints
from bifusion_gait.errors import ConfigurationError, SamplingError
from bifusion_gait.models import SequenceRecord
from bifusion_gait.rng import Rng

LOGGER = logging.getLogger("bifusion_gait.sampling")


class SequenceSource(Protocol):
    def identities(self) -> tuple[int, ...]: ...

    def entries_for(self, identity: int) -> tuple[DatasetEntry, ...]: ...

    def load(self, entry: DatasetEntry) -> SequenceRecord: ...


@dataclass(frozen=True)
class BatchSpec:
    identities: int = 4
    samples: int = 4
    frames: int = 30

    def __post_init__(self) -> None:
        if self.identities < 2 or self.samples < 2:
            raise ConfigurationError(
                f"batch needs P >= 2 identities and K >= 2 samples, got P={self.identities} K={self.samples}."
            )
        if self.frames < 1:
            raise ConfigurationError(f"batch frames must be >= 1, got {self.frames}.")

    @property
    def size(self) -> int:
        return self.identities * self.samples


@dataclass(frozen=True)
class Batch:
    keypoints: np.ndarray
    silhouettes: np.ndarray
    labels: np.ndarray
    entries: tuple[DatasetEntry, ...]


def window_indices(length: int, frames: int, rng: Rng) -> np.ndarray:
    """A random contiguous window of ``frames`` indices, wrapped modulo ``length`` when too short."""
    if length < 1:
        raise SamplingError("cannot crop an empty sequence.")
    if length >= frames:
        start = int(rng.integers(0, length - frames + 1))
        return np.arange(start, start + frames)
    start = int(rng.integers(0, length))
    return (start + np.arange(frames)) % length


def sample_batch(
    source: SequenceSource,
    spec: BatchSpec,
    rng: Rng,
    *,
    identities: Sequence[int] | None = None,
    normalize: bool = True,
) -> Batch:
    """Draw P identities without replacement and K sequences each (with replacement if fewer exist).

    Labels are positions of the identity within the sorted candidate list, so
    they index classifier logits directly.
    """
    candidates = tuple(sorted(identities)) if identities is not None else source.identities()
    candidates = tuple(identity for identity in candidates if source.entries_for(identity))
    if len(candidates) < spec.identities:
        raise SamplingError(f"batch needs {spec.identities} identities, only {len(candidates)} have sequences.")
    picked = rng.choice(len(candidates), spec.identities, replace=False)
    keypoints, silhouettes, labels, entries = [], [], [], []
    for class_index in picked:
        available = source.entries_for(candidates[int(class_index)])
        chosen = rng.choice(len(available), spec.samples, replace=len(available) < spec.samples)
        for position in chosen:
            entry = available[int(position)]
            record = source.load(entry)
            frames = window_indices(record.length, spec.frames, rng)
            keypoints.append(normalize_keypoints(record.keypoints, normalize).data[frames])
            silhouettes.append(record.silhouettes.frames[frames])
            labels.append(int(class_index))
            entries.append(entry)
    LOGGER.debug("batch_sampled identities=%s size=%d", [candidates[int(i)] for i in picked], len(labels))
    return Batch(
        keypoints=np.stack(keypoints),
        silhouettes=np.stack(silhouettes),
        labels=np.asarray(labels, dtype=np.int64),
        entries=tuple(entries),
    )
