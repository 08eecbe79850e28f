"""P x K x T batch sampling."""

from __future__ import annotations

import numpy as np
import pytest

from bifusion_gait.errors import ConfigurationError, SamplingError
from bifusion_gait.rng import Rng
from bifusion_gait.sampling import BatchSpec, sample_batch, window_indices
from helpers import tiny_dataset


@pytest.mark.parametrize(("p", "k"), [(1, 2), (2, 1)])
def test_batch_spec_needs_two_identities_and_two_samples(p: int, k: int) -> None:
    with pytest.raises(ConfigurationError, match="P >= 2"):
        BatchSpec(identities=p, samples=k, frames=4)


def test_window_is_contiguous_when_the_sequence_is_long_enough() -> None:
    indices = window_indices(20, 6, Rng(3))

    assert len(indices) == 6
    assert np.all(np.diff(indices) == 1)
    assert indices[0] >= 0 and indices[-1] < 20


def test_short_sequences_wrap_around() -> None:
    indices = window_indices(4, 10, Rng(3))

    assert len(indices) == 10
    assert set(indices.tolist()) == {0, 1, 2, 3}
    assert np.all((indices[1:] - indices[:-1]) % 4 == 1)


def test_empty_sequences_cannot_be_cropped() -> None:
    with pytest.raises(SamplingError):
        window_indices(0, 3, Rng(0))


def test_batch_shapes_and_labels() -> None:
    source = tiny_dataset(identities=3)
    spec = BatchSpec(identities=2, samples=3, frames=8)

    batch = sample_batch(source, spec, Rng(1))

    assert batch.keypoints.shape == (6, 8, 12, 3)
    assert batch.silhouettes.shape == (6, 8, 64, 64)
    assert batch.labels.shape == (6,)
    counts = np.bincount(batch.labels, minlength=3)
    assert sorted(counts[counts > 0].tolist()) == [3, 3]
    for label, entry in zip(batch.labels, batch.entries):
        assert entry.key.identity == source.identities()[int(label)]


def test_labels_index_the_restricted_identity_list() -> None:
    source = tiny_dataset(identities=3)

    batch = sample_batch(source, BatchSpec(2, 2, 4), Rng(2), identities=(2, 1))

    assert set(batch.labels.tolist()) == {0, 1}
    for label, entry in zip(batch.labels, batch.entries):
        assert entry.key.identity == (1, 2)[int(label)]


def test_too_few_identities_is_a_sampling_error() -> None:
    source = tiny_dataset(identities=3)

    with pytest.raises(SamplingError, match="identities"):
        sample_batch(source, BatchSpec(3, 2, 4), Rng(0), identities=(0, 1))


def test_sampling_is_reproducible_for_a_seed() -> None:
    source = tiny_dataset(identities=3)
    spec = BatchSpec(2, 2, 6)

    first = sample_batch(source, spec, Rng(11))
    second = sample_batch(source, spec, Rng(11))

    np.testing.assert_array_equal(first.keypoints, second.keypoints)
    assert first.entries == second.entries


def test_normalized_keypoints_center_the_mid_hip() -> None:
    source = tiny_dataset(identities=2)

    batch = sample_batch(source, BatchSpec(2, 2, 5), Rng(4))

    hips = batch.keypoints[:, :, [6, 7], :2].mean(axis=2)
    np.testing.assert_allclose(hips, 0.0, atol=1e-9)
