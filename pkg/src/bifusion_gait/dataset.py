"""On-disk dataset layout, sequence file formats and keypoint normalization.

Layout::

    <root>/manifest.csv                       id,cond,seq,view,T
    <root>/<id:03>/<cond>-<seq:02>/<view:03>/data.kpm
    <root>/<id:03>/<cond>-<seq:02>/<view:03>/data.sil
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
import logging
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from bifusion_gait.errors import FormatError, LoadError, NormalizationError
from bifusion_gait.models import (
    CONDITIONS,
    JOINT_COUNT,
    KEYPOINT_CHANNELS,
    Condition,
    KeypointsMatrix,
    SequenceKey,
    SequenceRecord,
    SilhouetteSequence,
)
from bifusion_gait.skeleton_graph import JOINT_INDEX
from bifusion_gait.validators import validate_keypoints, validate_silhouettes

LOGGER = logging.getLogger("bifusion_gait.dataset")

KEYPOINTS_MAGIC = b"KPM1"
SILHOUETTE_MAGIC = b"SIL1"
KEYPOINTS_FILE = "data.kpm"
SILHOUETTE_FILE = "data.sil"
MANIFEST_FILE = "manifest.csv"
MANIFEST_COLUMNS = ("id", "cond", "seq", "view", "T")
HEADER_BYTES = 16
TORSO_GUARD = 1e-12

_SHOULDERS = (JOINT_INDEX["left_shoulder"], JOINT_INDEX["right_shoulder"])
_HIPS = (JOINT_INDEX["left_hip"], JOINT_INDEX["right_hip"])


def _header(magic: bytes, extents: Sequence[int]) -> bytes:
    return magic + np.asarray(extents, dtype="<u4").tobytes()


def _read_header(blob: bytes, magic: bytes, path: Path) -> tuple[int, int, int]:
    if len(blob) < HEADER_BYTES or blob[:4] != magic:
        raise FormatError(f"{path} does not start with magic {magic.decode()!r}.")
    t, a, b = (int(v) for v in np.frombuffer(blob, dtype="<u4", count=3, offset=4))
    return t, a, b


def write_keypoints(path: str | Path, keypoints: KeypointsMatrix) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    frames = keypoints.data.astype("<f4")
    target.write_bytes(_header(KEYPOINTS_MAGIC, frames.shape) + frames.tobytes(order="C"))


def read_keypoints(path: str | Path) -> KeypointsMatrix:
    source = Path(path)
    blob = source.read_bytes()
    frames, joints, channels = _read_header(blob, KEYPOINTS_MAGIC, source)
    if (joints, channels) != (JOINT_COUNT, KEYPOINT_CHANNELS):
        raise FormatError(f"{source} declares {joints} joints x {channels} channels.")
    expected = frames * joints * channels * 4
    if len(blob) - HEADER_BYTES != expected:
        raise FormatError(f"{source} holds {len(blob) - HEADER_BYTES} payload bytes, expected {expected}.")
    data = np.frombuffer(blob, dtype="<f4", offset=HEADER_BYTES).reshape(frames, joints, channels)
    validate_keypoints(data).raise_for_failure(str(source))
    return KeypointsMatrix(data=data.astype(np.float64))


def write_silhouettes(path: str | Path, silhouettes: SilhouetteSequence) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    frames = silhouettes.frames.astype(np.uint8)
    target.write_bytes(_header(SILHOUETTE_MAGIC, frames.shape) + frames.tobytes(order="C"))


def read_silhouettes(path: str | Path, key: SequenceKey | None = None) -> SilhouetteSequence:
    source = Path(path)
    blob = source.read_bytes()
    frames, height, width = _read_header(blob, SILHOUETTE_MAGIC, source)
    expected = frames * height * width
    if len(blob) - HEADER_BYTES != expected:
        raise FormatError(f"{source} holds {len(blob) - HEADER_BYTES} payload bytes, expected {expected}.")
    masks = np.frombuffer(blob, dtype=np.uint8, offset=HEADER_BYTES).reshape(frames, height, width).copy()
    validate_silhouettes(masks, size=height).raise_for_failure(str(source))
    if key is None:
        return SilhouetteSequence(frames=masks)
    return SilhouetteSequence(frames=masks, view=key.view, condition=key.condition, identity=key.identity)


def normalize_keypoints(keypoints: KeypointsMatrix, enabled: bool = True) -> KeypointsMatrix:
    """Per frame: move the mid-hip to the origin and divide by the mean shoulder-to-hip length."""
    if not enabled:
        return keypoints
    coords = keypoints.coordinates
    mid_hip = coords[:, _HIPS, :].mean(axis=1, keepdims=True)
    torso = np.linalg.norm(coords[:, _SHOULDERS, :] - coords[:, _HIPS, :], axis=-1).mean(axis=1)
    flat = np.flatnonzero(torso <= TORSO_GUARD)
    if flat.size:
        raise NormalizationError(f"frame {int(flat[0])} has zero torso length.")
    out = keypoints.data.copy()
    out[..., :2] = (coords - mid_hip) / torso[:, None, None]
    return KeypointsMatrix(data=out)


@dataclass(frozen=True)
class DatasetEntry:
    key: SequenceKey
    frames: int


def write_manifest(root: str | Path, entries: Iterable[DatasetEntry]) -> Path:
    target = Path(root) / MANIFEST_FILE
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for entry in sorted(entries, key=lambda item: item.key):
            key = entry.key
            writer.writerow((key.identity, key.condition, key.sequence, key.view, entry.frames))
    return target


def write_record(root: str | Path, record: SequenceRecord) -> DatasetEntry:
    directory = Path(root) / record.key.relative_dir()
    write_keypoints(directory / KEYPOINTS_FILE, record.keypoints)
    write_silhouettes(directory / SILHOUETTE_FILE, record.silhouettes)
    return DatasetEntry(key=record.key, frames=record.length)


def _parse_row(row: dict[str, str], line: int) -> DatasetEntry:
    try:
        condition = row["cond"].strip()
        if condition not in CONDITIONS:
            raise ValueError(f"unknown condition {condition!r}")
        key = SequenceKey(int(row["id"]), condition, int(row["seq"]), int(row["view"]))  # type: ignore[arg-type]
        return DatasetEntry(key=key, frames=int(row["T"]))
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"manifest line {line}: {exc}") from exc


class DatasetIndex:
    """Manifest-backed view of a dataset directory; sequences load on demand."""

    def __init__(self, root: str | Path, entries: Sequence[DatasetEntry]) -> None:
        self.root = Path(root)
        self.entries = tuple(sorted(entries, key=lambda item: item.key))
        self._by_identity: dict[int, list[DatasetEntry]] = {}
        for entry in self.entries:
            self._by_identity.setdefault(entry.key.identity, []).append(entry)

    @classmethod
    def open(cls, root: str | Path) -> "DatasetIndex":
        base = Path(root).expanduser()
        manifest = base / MANIFEST_FILE
        if not manifest.is_file():
            raise LoadError(f"dataset manifest not found: {manifest}")
        with manifest.open(newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(handle)
            if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
                raise FormatError(f"manifest columns must be {','.join(MANIFEST_COLUMNS)}.")
            entries = [_parse_row(row, line) for line, row in enumerate(reader, start=2)]
        index = cls(base, entries)
        index.check()
        LOGGER.info("dataset_opened root=%s sequences=%d identities=%d", base, len(entries), len(index.identities()))
        return index

    def check(self) -> None:
        identities = self.identities()
        if identities != tuple(range(len(identities))):
            raise FormatError("dataset identities must be dense integers starting at 0.")
        for entry in self.entries:
            for path in (self.keypoints_path(entry.key), self.silhouettes_path(entry.key)):
                if not path.is_file():
                    raise LoadError(f"missing sequence file {path}")

    def __len__(self) -> int:
        return len(self.entries)

    def identities(self) -> tuple[int, ...]:
        return tuple(sorted(self._by_identity))

    def entries_for(self, identity: int) -> tuple[DatasetEntry, ...]:
        return tuple(self._by_identity.get(identity, ()))

    def select(
        self,
        *,
        identities: Iterable[int] | None = None,
        conditions: Iterable[Condition] | None = None,
        sequences: Iterable[int] | None = None,
    ) -> list[DatasetEntry]:
        wanted_ids = set(identities) if identities is not None else None
        wanted_conditions = set(conditions) if conditions is not None else None
        wanted_sequences = set(sequences) if sequences is not None else None
        return [
            entry
            for entry in self.entries
            if (wanted_ids is None or entry.key.identity in wanted_ids)
            and (wanted_conditions is None or entry.key.condition in wanted_conditions)
            and (wanted_sequences is None or entry.key.sequence in wanted_sequences)
        ]

    def keypoints_path(self, key: SequenceKey) -> Path:
        return self.root / key.relative_dir() / KEYPOINTS_FILE

    def silhouettes_path(self, key: SequenceKey) -> Path:
        return self.root / key.relative_dir() / SILHOUETTE_FILE

    def load(self, entry: DatasetEntry) -> SequenceRecord:
        keypoints = read_keypoints(self.keypoints_path(entry.key))
        silhouettes = read_silhouettes(self.silhouettes_path(entry.key), entry.key)
        if keypoints.frames != silhouettes.length:
            raise FormatError(f"{entry.key.label()}: {keypoints.frames} keypoint frames vs {silhouettes.length} masks.")
        return SequenceRecord(key=entry.key, keypoints=keypoints, silhouettes=silhouettes)


class InMemoryDataset:
    """Same lookup surface as ``DatasetIndex`` over already-built records."""

    def __init__(self, records: Sequence[SequenceRecord]) -> None:
        self._records = {record.key: record for record in records}
        self.entries = tuple(sorted((DatasetEntry(key, record.length) for key, record in self._records.items()), key=lambda e: e.key))
        self._by_identity: dict[int, list[DatasetEntry]] = {}
        for entry in self.entries:
            self._by_identity.setdefault(entry.key.identity, []).append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def identities(self) -> tuple[int, ...]:
        return tuple(sorted(self._by_identity))

    def entries_for(self, identity: int) -> tuple[DatasetEntry, ...]:
        return tuple(self._by_identity.get(identity, ()))

    def load(self, entry: DatasetEntry) -> SequenceRecord:
        return self._records[entry.key]
