"""Structural validators for keypoint and silhouette arrays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bifusion_gait.errors import FormatError
from bifusion_gait.models import JOINT_COUNT, KEYPOINT_CHANNELS, SILHOUETTE_SIZE


@dataclass(frozen=True)
class ValidationResult:
    """Normalized validator response for one loaded array."""

    ok: bool
    message: str
    kind: str

    def raise_for_failure(self, source: str = "") -> None:
        if not self.ok:
            where = f" in {source}" if source else ""
            raise FormatError(f"Invalid {self.kind}{where}: {self.message}")


def validate_keypoints(data: np.ndarray) -> ValidationResult:
    """T x 12 x 3, finite, confidence within [0, 1]."""
    kind = "keypoints"
    if data.ndim != 3 or data.shape[1:] != (JOINT_COUNT, KEYPOINT_CHANNELS):
        return ValidationResult(False, f"expected T x {JOINT_COUNT} x {KEYPOINT_CHANNELS}, got {data.shape}.", kind)
    if data.shape[0] < 1:
        return ValidationResult(False, "sequence has no frames.", kind)
    if not np.all(np.isfinite(data)):
        return ValidationResult(False, "non-finite coordinate or confidence value.", kind)
    confidence = data[..., 2]
    if confidence.min() < 0.0 or confidence.max() > 1.0:
        return ValidationResult(False, "confidence values must lie in [0, 1].", kind)
    return ValidationResult(True, f"{data.shape[0]} frames.", kind)


def validate_silhouettes(frames: np.ndarray, size: int = SILHOUETTE_SIZE) -> ValidationResult:
    """T x size x size, values in {0, 1}, at least one foreground pixel per frame."""
    kind = "silhouettes"
    if frames.ndim != 3 or frames.shape[1:] != (size, size):
        return ValidationResult(False, f"expected T x {size} x {size}, got {frames.shape}.", kind)
    if frames.shape[0] < 1:
        return ValidationResult(False, "sequence has no frames.", kind)
    if not np.isin(frames, (0, 1)).all():
        return ValidationResult(False, "mask values must be 0 or 1.", kind)
    empty = np.flatnonzero(frames.reshape(frames.shape[0], -1).sum(axis=1) == 0)
    if empty.size:
        return ValidationResult(False, f"frame {int(empty[0])} has no foreground pixel.", kind)
    return ValidationResult(True, f"{frames.shape[0]} frames.", kind)
