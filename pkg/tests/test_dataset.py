"""Sequence file formats, manifest index and keypoint normalization."""

from __future__ import annotations

import numpy as np
import pytest

from bifusion_gait.dataset import (
    DatasetEntry,
    DatasetIndex,
    normalize_keypoints,
    read_keypoints,
    read_silhouettes,
    write_keypoints,
    write_manifest,
    write_record,
    write_silhouettes,
)
from bifusion_gait.errors import FormatError, LoadError, NormalizationError
from bifusion_gait.models import KeypointsMatrix, SequenceKey, SilhouetteSequence
from bifusion_gait.rng import Rng
from helpers import tiny_dataset


def _keypoints(frames: int = 5, seed: int = 0) -> KeypointsMatrix:
    data = Rng(seed).normal(0.0, 10.0, (frames, 12, 3)).astype(np.float32).astype(np.float64)
    data[..., 2] = 1.0
    return KeypointsMatrix(data=data)


def test_keypoints_round_trip_bit_exactly(tmp_path) -> None:
    original = _keypoints()
    write_keypoints(tmp_path / "data.kpm", original)

    loaded = read_keypoints(tmp_path / "data.kpm")

    np.testing.assert_array_equal(loaded.data, original.data)


def test_keypoints_file_layout(tmp_path) -> None:
    write_keypoints(tmp_path / "data.kpm", _keypoints(frames=4))

    blob = (tmp_path / "data.kpm").read_bytes()

    assert blob[:4] == b"KPM1"
    assert np.frombuffer(blob, dtype="<u4", count=3, offset=4).tolist() == [4, 12, 3]
    assert len(blob) == 16 + 4 * 12 * 3 * 4


def test_silhouettes_round_trip_bit_exactly(tmp_path) -> None:
    masks = (Rng(1).uniform(size=(3, 64, 64)) > 0.5).astype(np.uint8)
    write_silhouettes(tmp_path / "data.sil", SilhouetteSequence(frames=masks))

    loaded = read_silhouettes(tmp_path / "data.sil")

    assert (tmp_path / "data.sil").read_bytes()[:4] == b"SIL1"
    np.testing.assert_array_equal(loaded.frames, masks)


def test_truncated_keypoints_file_is_rejected(tmp_path) -> None:
    path = tmp_path / "data.kpm"
    write_keypoints(path, _keypoints())
    path.write_bytes(path.read_bytes()[:-4])

    with pytest.raises(FormatError, match="payload bytes"):
        read_keypoints(path)


def test_wrong_magic_is_rejected(tmp_path) -> None:
    path = tmp_path / "data.kpm"
    write_silhouettes(path, SilhouetteSequence(frames=np.ones((1, 64, 64), dtype=np.uint8)))

    with pytest.raises(FormatError, match="KPM1"):
        read_keypoints(path)


def test_written_dataset_reopens_with_identical_tensors(tmp_path) -> None:
    source = tiny_dataset(identities=2, views=(0,))
    entries = [write_record(tmp_path, source.load(entry)) for entry in source.entries]
    write_manifest(tmp_path, entries)

    index = DatasetIndex.open(tmp_path)

    assert index.identities() == (0, 1)
    assert len(index) == len(source)
    for entry in index.entries:
        original = source.load(entry)
        loaded = index.load(entry)
        np.testing.assert_array_equal(loaded.keypoints.data, original.keypoints.data)
        np.testing.assert_array_equal(loaded.silhouettes.frames, original.silhouettes.frames)


def test_manifest_rows_are_sorted_by_key(tmp_path) -> None:
    entries = [
        DatasetEntry(SequenceKey(1, "NM", 1, 0), 12),
        DatasetEntry(SequenceKey(0, "CL", 2, 90), 14),
    ]

    path = write_manifest(tmp_path, entries)

    assert path.read_text(encoding="utf-8").splitlines() == ["id,cond,seq,view,T", "0,CL,2,90,14", "1,NM,1,0,12"]


def test_select_filters_by_condition_and_sequence(tmp_path) -> None:
    source = tiny_dataset(identities=2, views=(0,))
    write_manifest(tmp_path, [write_record(tmp_path, source.load(entry)) for entry in source.entries])
    index = DatasetIndex.open(tmp_path)

    gallery = index.select(conditions=("NM",), sequences=(1, 2))

    assert {(e.key.identity, e.key.sequence) for e in gallery} == {(0, 1), (0, 2), (1, 1), (1, 2)}


def test_missing_manifest_is_a_load_error(tmp_path) -> None:
    with pytest.raises(LoadError, match="manifest not found"):
        DatasetIndex.open(tmp_path)


def test_missing_sequence_file_is_a_load_error(tmp_path) -> None:
    write_manifest(tmp_path, [DatasetEntry(SequenceKey(0, "NM", 1, 0), 12)])

    with pytest.raises(LoadError, match="missing sequence file"):
        DatasetIndex.open(tmp_path)


def test_sparse_identities_are_rejected(tmp_path) -> None:
    write_manifest(tmp_path, [DatasetEntry(SequenceKey(1, "NM", 1, 0), 12)])

    with pytest.raises(FormatError, match="dense"):
        DatasetIndex.open(tmp_path)


def test_unknown_condition_in_manifest(tmp_path) -> None:
    (tmp_path / "manifest.csv").write_text("id,cond,seq,view,T\n0,XX,1,0,12\n", encoding="utf-8")

    with pytest.raises(FormatError, match="line 2"):
        DatasetIndex.open(tmp_path)


def test_normalization_disabled_is_identity() -> None:
    keypoints = _keypoints()

    assert normalize_keypoints(keypoints, enabled=False) is keypoints


def test_normalization_is_translation_invariant() -> None:
    keypoints = _keypoints()
    shifted = keypoints.data.copy()
    shifted[..., :2] += np.array([37.0, -12.5])

    first = normalize_keypoints(keypoints).data
    second = normalize_keypoints(KeypointsMatrix(data=shifted)).data

    np.testing.assert_allclose(first, second, atol=1e-9)
    np.testing.assert_array_equal(first[..., 2], keypoints.data[..., 2])


def test_zero_torso_length_is_a_normalization_error() -> None:
    data = np.zeros((2, 12, 3))
    data[..., 2] = 1.0

    with pytest.raises(NormalizationError, match="frame 0"):
        normalize_keypoints(KeypointsMatrix(data=data))
