"""Canonical sequence models shared by the generator, the loaders and evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from bifusion_gait.errors import DimensionError

Condition = Literal["NM", "BG", "CL"]

CONDITION_NORMAL: Condition = "NM"
CONDITION_BAG: Condition = "BG"
CONDITION_CLOTHES: Condition = "CL"
CONDITIONS: tuple[Condition, ...] = (CONDITION_NORMAL, CONDITION_BAG, CONDITION_CLOTHES)

JOINT_COUNT = 12
KEYPOINT_CHANNELS = 3
SILHOUETTE_SIZE = 64


@dataclass(frozen=True, order=True)
class SequenceKey:
    """Identity, condition, sequence number and view of one walking sequence."""

    identity: int
    condition: Condition
    sequence: int
    view: int

    def relative_dir(self) -> str:
        return f"{self.identity:03d}/{self.condition}-{self.sequence:02d}/{self.view:03d}"

    def label(self) -> str:
        return f"id={self.identity} cond={self.condition} seq={self.sequence} view={self.view}"


@dataclass(frozen=True)
class KeypointsMatrix:
    """``T x 12 x 3`` frames of (x, y, confidence), joint order of ``skeleton_graph.JOINT_NAMES``."""

    data: np.ndarray

    def __post_init__(self) -> None:
        if self.data.ndim != 3 or self.data.shape[1:] != (JOINT_COUNT, KEYPOINT_CHANNELS) or self.data.shape[0] < 1:
            raise DimensionError(f"keypoints must be T x {JOINT_COUNT} x {KEYPOINT_CHANNELS}, got {self.data.shape}.")

    @property
    def frames(self) -> int:
        return int(self.data.shape[0])

    @property
    def coordinates(self) -> np.ndarray:
        return self.data[..., :2]

    @property
    def confidence(self) -> np.ndarray:
        return self.data[..., 2]


@dataclass(frozen=True)
class SilhouetteSequence:
    """``T x H x W`` binary masks stored as uint8."""

    frames: np.ndarray
    view: int = 0
    condition: Condition = CONDITION_NORMAL
    identity: int = 0

    def __post_init__(self) -> None:
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise DimensionError(f"silhouettes must be T x H x W, got {self.frames.shape}.")

    @property
    def length(self) -> int:
        return int(self.frames.shape[0])

    def as_float(self) -> np.ndarray:
        return self.frames.astype(np.float64)


@dataclass(frozen=True)
class SequenceRecord:
    """One loaded sequence: key plus both modalities."""

    key: SequenceKey
    keypoints: KeypointsMatrix
    silhouettes: SilhouetteSequence

    @property
    def length(self) -> int:
        return min(self.keypoints.frames, self.silhouettes.length)
