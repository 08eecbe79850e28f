"""Procedural gait data: identity parameters, a 3D stick-figure walker, silhouette rendering.

Identity lives in limb proportions and gait dynamics. The walker stays in
place (treadmill style); the camera turns about the vertical axis by the view
angle and projects orthographically, so view 0 and view 180 mirror each
other about the body axis.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import astuple, dataclass, field
import logging
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from bifusion_gait.dataset import DatasetEntry, write_manifest, write_record
from bifusion_gait.errors import ConfigurationError, InputLengthError, RenderError
from bifusion_gait.models import (
    CONDITION_BAG,
    CONDITION_CLOTHES,
    CONDITIONS,
    JOINT_COUNT,
    SILHOUETTE_SIZE,
    Condition,
    KeypointsMatrix,
    SequenceKey,
    SequenceRecord,
    SilhouetteSequence,
)
from bifusion_gait.rng import Rng, derive_seed
from bifusion_gait.skeleton_graph import JOINT_INDEX, build_pyramid_graph

LOGGER = logging.getLogger("bifusion_gait.synthetic")

MIN_FRAMES = 12
COORDINATE_NOISE = 0.5
CLOTHES_LENGTH_RANGE = (0.95, 1.05)
CLOTHES_THICKNESS = 1.5
SUBJECT_HEIGHT = 60.0
TOP_MARGIN = 2.0
IMAGE_CENTER = (64.0, 100.0)
RENDER_CHUNK = 8

DEFAULT_VIEWS: tuple[int, ...] = tuple(range(0, 181, 18))
DEFAULT_SEQUENCES: Mapping[Condition, tuple[int, ...]] = {
    "NM": (1, 2, 3, 4, 5, 6),
    "BG": (1, 2),
    "CL": (1, 2),
}

# (low, high) per IdentityParams field, lengths in pixel units
PARAMETER_RANGES: Mapping[str, tuple[float, float]] = {
    "torso": (18.0, 24.0),
    "shoulder_width": (8.0, 12.0),
    "hip_width": (6.0, 9.0),
    "upper_arm": (10.0, 14.0),
    "lower_arm": (9.0, 13.0),
    "upper_leg": (15.0, 20.0),
    "lower_leg": (14.0, 19.0),
    "frequency": (0.02, 0.08),
    "hip_swing": (0.35, 0.55),
    "knee_bend": (0.3, 0.7),
    "knee_phase": (0.5, 1.2),
    "arm_swing": (0.25, 0.5),
    "arm_phase": (-0.3, 0.3),
    "elbow_bend": (0.1, 0.4),
    "hip_sway": (0.8, 1.5),
    "ankle_sway": (3.0, 4.0),
    "thickness": (2.5, 4.0),
}


@dataclass(frozen=True)
class IdentityParams:
    """Body proportions (pixel units), gait frequency (cycles/frame), angles in radians."""

    torso: float
    shoulder_width: float
    hip_width: float
    upper_arm: float
    lower_arm: float
    upper_leg: float
    lower_leg: float
    frequency: float
    hip_swing: float
    knee_bend: float
    knee_phase: float
    arm_swing: float
    arm_phase: float
    elbow_bend: float
    hip_sway: float
    ankle_sway: float
    thickness: float

    def as_vector(self) -> np.ndarray:
        return np.asarray(astuple(self), dtype=np.float64)


def generate_identity(seed: int) -> IdentityParams:
    """Uniform draw from ``PARAMETER_RANGES``; deterministic in ``seed``."""
    rng = Rng(seed)
    values = {name: float(rng.uniform(low, high)) for name, (low, high) in PARAMETER_RANGES.items()}
    return IdentityParams(**values)


def _segment(origin: np.ndarray, length: np.ndarray | float, angle: np.ndarray) -> np.ndarray:
    """Endpoint of a segment hanging from ``origin`` rotated by ``angle`` in the sagittal (y, z) plane."""
    return origin + np.stack([np.zeros_like(angle), -np.cos(angle), np.sin(angle)], axis=-1) * np.asarray(length)[..., None]


def walker_pose(identity: IdentityParams, phase: np.ndarray, limb_scale: float = 1.0) -> np.ndarray:
    """``T x 12 x 3`` world coordinates (x lateral, y up, z forward) for each gait phase."""
    frames = phase.shape[0]
    upper_leg = identity.upper_leg * limb_scale
    lower_leg = identity.lower_leg * limb_scale
    upper_arm = identity.upper_arm * limb_scale
    lower_arm = identity.lower_arm * limb_scale
    hip_height = upper_leg + lower_leg
    sway = identity.hip_sway * np.sin(phase)
    bob = 0.5 * np.sin(2.0 * phase)
    pose = np.zeros((frames, JOINT_COUNT, 3))

    for side, sign, offset in (("left", -1.0, 0.0), ("right", 1.0, np.pi)):
        hip = np.stack([sign * identity.hip_width / 2 + sway, hip_height + bob, np.zeros(frames)], axis=-1)
        shoulder = np.stack(
            [sign * identity.shoulder_width / 2 + sway, hip_height + bob + identity.torso, np.zeros(frames)], axis=-1
        )
        thigh = identity.hip_swing * np.sin(phase + offset)
        bend = identity.knee_bend * 0.5 * (1.0 + np.sin(phase + offset + identity.knee_phase))
        knee = _segment(hip, upper_leg, thigh)
        ankle = _segment(knee, lower_leg, thigh - bend)
        # distal lateral swing in quadrature with the sway keeps ankles ahead of hips at every view
        ankle[:, 0] += identity.ankle_sway * np.cos(phase + offset)
        arm = identity.arm_swing * np.sin(phase + offset + np.pi + identity.arm_phase)
        elbow = _segment(shoulder, upper_arm, arm)
        wrist = _segment(elbow, lower_arm, arm + identity.elbow_bend)
        for name, point in (
            ("shoulder", shoulder),
            ("elbow", elbow),
            ("wrist", wrist),
            ("hip", hip),
            ("knee", knee),
            ("ankle", ankle),
        ):
            pose[:, JOINT_INDEX[f"{side}_{name}"]] = point
    return pose


def project(pose: np.ndarray, view: float) -> np.ndarray:
    """Orthographic camera turned by ``view`` degrees about the vertical axis; image y grows downward."""
    angle = np.deg2rad(view)
    x2d = pose[..., 2] * np.cos(angle) + pose[..., 0] * np.sin(angle)
    return np.stack([IMAGE_CENTER[0] + x2d, IMAGE_CENTER[1] - pose[..., 1]], axis=-1)


def generate_skeleton_sequence(
    identity: IdentityParams,
    view: float,
    condition: Condition,
    frames: int,
    rng: Rng,
    *,
    noise: float = COORDINATE_NOISE,
) -> KeypointsMatrix:
    """Project ``frames`` walker poses to (x, y, confidence=1) keypoints with Gaussian coordinate noise."""
    if frames < MIN_FRAMES:
        raise InputLengthError(f"synthetic sequences need at least {MIN_FRAMES} frames, got {frames}.")
    if condition not in CONDITIONS:
        raise ConfigurationError(f"unknown condition {condition!r}.")
    start = float(rng.uniform(0.0, 2.0 * np.pi))
    limb_scale = float(rng.uniform(*CLOTHES_LENGTH_RANGE)) if condition == CONDITION_CLOTHES else 1.0
    phase = start + 2.0 * np.pi * identity.frequency * np.arange(frames)
    coords = project(walker_pose(identity, phase, limb_scale), view)
    if noise:
        coords = coords + rng.normal(0.0, noise, coords.shape)
    data = np.concatenate([coords, np.ones((frames, JOINT_COUNT, 1))], axis=-1)
    # values must survive the float32 file format unchanged
    return KeypointsMatrix(data=data.astype(np.float32).astype(np.float64))


_LIMB_SEGMENTS: tuple[tuple[int, int], ...] = tuple(
    sorted(edge for edge in build_pyramid_graph().joints.spatial_edges)
)
_SHOULDERS = (JOINT_INDEX["left_shoulder"], JOINT_INDEX["right_shoulder"])
_HIPS = (JOINT_INDEX["left_hip"], JOINT_INDEX["right_hip"])
_ANKLES = (JOINT_INDEX["left_ankle"], JOINT_INDEX["right_ankle"])
_PIXEL_CENTERS = np.stack(
    np.meshgrid(np.arange(SILHOUETTE_SIZE) + 0.5, np.arange(SILHOUETTE_SIZE) + 0.5, indexing="xy"), axis=-1
).reshape(-1, 2)


def _capsule_chunk(starts: np.ndarray, ends: np.ndarray, radii: np.ndarray) -> np.ndarray:
    direction = ends - starts
    length2 = np.maximum((direction**2).sum(-1), 1e-12)
    rel = _PIXEL_CENTERS[None, None, :, :] - starts[:, :, None, :]
    along = np.clip((rel * direction[:, :, None, :]).sum(-1) / length2[:, :, None], 0.0, 1.0)
    nearest = starts[:, :, None, :] + along[..., None] * direction[:, :, None, :]
    dist2 = ((_PIXEL_CENTERS[None, None] - nearest) ** 2).sum(-1)
    return (dist2 <= radii[:, :, None] ** 2).any(axis=1)


def _capsule_masks(starts: np.ndarray, ends: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Union over segments of pixels within the radius of each segment; inputs are ``T x S x 2`` and ``T x S``."""
    chunks = [
        _capsule_chunk(starts[i : i + RENDER_CHUNK], ends[i : i + RENDER_CHUNK], radii[i : i + RENDER_CHUNK])
        for i in range(0, starts.shape[0], RENDER_CHUNK)
    ]
    return np.concatenate(chunks, axis=0)


def _body_segments(points: np.ndarray, identity: IdentityParams, scale: np.ndarray, thickness: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mid_shoulder = points[:, _SHOULDERS].mean(axis=1)
    mid_hip = points[:, _HIPS].mean(axis=1)
    neck_to_head = 0.35 * identity.torso * scale[:, None] * np.array([0.0, -1.0])
    head = mid_shoulder + neck_to_head
    starts = [points[:, a] for a, _ in _LIMB_SEGMENTS] + [mid_shoulder, head]
    ends = [points[:, b] for _, b in _LIMB_SEGMENTS] + [mid_hip, head]
    limb_radius = identity.thickness * thickness * scale
    torso_radius = 0.5 * max(identity.shoulder_width, identity.hip_width) * thickness * scale
    head_radius = 0.22 * identity.torso * scale
    radii = [limb_radius] * len(_LIMB_SEGMENTS) + [torso_radius, head_radius]
    return np.stack(starts, axis=1), np.stack(ends, axis=1), np.stack(radii, axis=1)


def render_silhouettes(keypoints: KeypointsMatrix, identity: IdentityParams, condition: Condition) -> SilhouetteSequence:
    """Rasterize capsules into 64x64 masks fitted to 60 px subject height and centred by foreground centroid."""
    coords = keypoints.coordinates
    spread = np.ptp(coords, axis=1).max(axis=1)
    if np.any(spread <= 1e-9):
        raise RenderError(f"frame {int(np.argmin(spread))} has all joints coincident.")
    thickness = CLOTHES_THICKNESS if condition == CONDITION_CLOTHES else 1.0
    head_top = coords[:, _SHOULDERS, 1].mean(axis=1) - 0.57 * identity.torso
    feet = coords[:, _ANKLES, 1].max(axis=1) + identity.thickness * thickness
    height = feet - head_top
    if np.any(height <= 1e-9):
        raise RenderError("subject has no vertical extent.")
    scale = SUBJECT_HEIGHT / height
    fitted = np.empty_like(coords)
    fitted[..., 1] = TOP_MARGIN + (coords[..., 1] - head_top[:, None]) * scale[:, None]
    fitted[..., 0] = SILHOUETTE_SIZE / 2 + (coords[..., 0] - coords[..., 0].mean(axis=1, keepdims=True)) * scale[:, None]

    starts, ends, radii = _body_segments(fitted, identity, scale, thickness)
    body = _capsule_masks(starts, ends, radii).reshape(-1, SILHOUETTE_SIZE, SILHOUETTE_SIZE)
    columns = np.arange(SILHOUETTE_SIZE) + 0.5
    counts = np.maximum(body.sum(axis=(1, 2)), 1)
    centroid = (body.sum(axis=1) * columns).sum(axis=1) / counts
    shift = np.where(body.any(axis=(1, 2)), SILHOUETTE_SIZE / 2 - centroid, 0.0)
    fitted[..., 0] += shift[:, None]
    starts, ends, radii = _body_segments(fitted, identity, scale, thickness)
    masks = _capsule_masks(starts, ends, radii)

    if condition == CONDITION_BAG:
        mid_torso = 0.5 * (fitted[:, _SHOULDERS].mean(axis=1) + fitted[:, _HIPS].mean(axis=1))
        torso_radius = 0.5 * max(identity.shoulder_width, identity.hip_width) * scale
        rx, ry = 4.0 * scale, 6.0 * scale
        cx = mid_torso[:, 0] + torso_radius + 0.6 * rx
        cy = mid_torso[:, 1]
        offsets = (_PIXEL_CENTERS[None, :, 0] - cx[:, None]) ** 2 / rx[:, None] ** 2
        offsets = offsets + (_PIXEL_CENTERS[None, :, 1] - cy[:, None]) ** 2 / ry[:, None] ** 2
        masks = masks | (offsets <= 1.0)

    frames = masks.reshape(-1, SILHOUETTE_SIZE, SILHOUETTE_SIZE).astype(np.uint8)
    empty = np.flatnonzero(frames.reshape(frames.shape[0], -1).sum(axis=1) == 0)
    if empty.size:
        raise RenderError(f"frame {int(empty[0])} rendered without foreground; joints fall outside the canvas.")
    return SilhouetteSequence(frames=frames, condition=condition)


@dataclass(frozen=True)
class GenerationPlan:
    """What ``generate_dataset`` writes: identities x conditions/sequences x views."""

    identities: int
    seed: int
    frames: int = 40
    views: tuple[int, ...] = DEFAULT_VIEWS
    sequences: Mapping[Condition, tuple[int, ...]] = field(default_factory=lambda: dict(DEFAULT_SEQUENCES))
    noise: float = COORDINATE_NOISE

    def __post_init__(self) -> None:
        if self.identities < 1:
            raise ConfigurationError(f"identities must be >= 1, got {self.identities}.")
        if self.frames < MIN_FRAMES:
            raise InputLengthError(f"synthetic sequences need at least {MIN_FRAMES} frames, got {self.frames}.")

    def keys(self) -> list[SequenceKey]:
        return [
            SequenceKey(identity, condition, sequence, view)
            for identity in range(self.identities)
            for condition in CONDITIONS
            for sequence in self.sequences.get(condition, ())
            for view in self.views
        ]


def sequence_seed(plan_seed: int, key: SequenceKey) -> int:
    return derive_seed(plan_seed, key.identity, CONDITIONS.index(key.condition), key.sequence, key.view)


def synthesize_sequence(plan: GenerationPlan, key: SequenceKey, identity: IdentityParams) -> SequenceRecord:
    rng = Rng(sequence_seed(plan.seed, key))
    keypoints = generate_skeleton_sequence(identity, key.view, key.condition, plan.frames, rng, noise=plan.noise)
    masks = render_silhouettes(keypoints, identity, key.condition)
    silhouettes = SilhouetteSequence(frames=masks.frames, view=key.view, condition=key.condition, identity=key.identity)
    return SequenceRecord(key=key, keypoints=keypoints, silhouettes=silhouettes)


def generate_dataset(root: str | Path, plan: GenerationPlan, *, threads: int = 1) -> list[DatasetEntry]:
    """Write every sequence of ``plan`` under ``root`` plus the manifest.

    Each sequence draws from its own seed, so output bytes do not depend on ``threads``.
    """
    target = Path(root).expanduser()
    identities = {index: generate_identity(derive_seed(plan.seed, index)) for index in range(plan.identities)}
    keys = plan.keys()

    def _write(key: SequenceKey) -> DatasetEntry:
        return write_record(target, synthesize_sequence(plan, key, identities[key.identity]))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            entries = list(pool.map(_write, keys))
    else:
        entries = [_write(key) for key in keys]
    write_manifest(target, entries)
    LOGGER.info(
        "dataset_generated root=%s identities=%d sequences=%d frames=%d threads=%d",
        target,
        plan.identities,
        len(entries),
        plan.frames,
        threads,
    )
    return entries


def x_trace_amplitude(keypoints: KeypointsMatrix, joints: Iterable[str]) -> float:
    """Largest standard deviation over time of the image x coordinate among ``joints``."""
    indices = [JOINT_INDEX[name] for name in joints]
    return float(keypoints.coordinates[:, indices, 0].std(axis=0).max())
