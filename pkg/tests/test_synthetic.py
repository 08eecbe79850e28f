"""Procedural walker, silhouette renderer and dataset generation."""

from __future__ import annotations

import numpy as np
import pytest

from bifusion_gait.dataset import DatasetIndex
from bifusion_gait.errors import InputLengthError, RenderError
from bifusion_gait.models import KeypointsMatrix
from bifusion_gait.rng import Rng
from bifusion_gait.synthetic import (
    PARAMETER_RANGES,
    GenerationPlan,
    generate_dataset,
    generate_identity,
    generate_skeleton_sequence,
    render_silhouettes,
    x_trace_amplitude,
)
from helpers import tiny_plan


def test_identity_is_deterministic_in_the_seed() -> None:
    assert generate_identity(4) == generate_identity(4)


def test_identities_are_distinct_and_within_ranges() -> None:
    people = [generate_identity(seed) for seed in range(100)]

    vectors = {tuple(person.as_vector()) for person in people}

    assert len(vectors) == 100
    for person in people:
        for name, (low, high) in PARAMETER_RANGES.items():
            assert low <= getattr(person, name) <= high


def test_sequences_shorter_than_twelve_frames_are_rejected() -> None:
    with pytest.raises(InputLengthError, match="12 frames"):
        generate_skeleton_sequence(generate_identity(0), 0, "NM", 11, Rng(0))


def test_confidence_channel_is_one() -> None:
    keypoints = generate_skeleton_sequence(generate_identity(1), 36, "NM", 20, Rng(0))

    assert np.all(keypoints.confidence == 1.0)


def test_opposite_views_mirror_about_the_body_axis() -> None:
    person = generate_identity(2)
    front = generate_skeleton_sequence(person, 0, "NM", 20, Rng(5), noise=0.0)
    back = generate_skeleton_sequence(person, 180, "NM", 20, Rng(5), noise=0.0)

    axis_front = front.coordinates[..., 0].mean(axis=1, keepdims=True)
    axis_back = back.coordinates[..., 0].mean(axis=1, keepdims=True)

    np.testing.assert_allclose(front.coordinates[..., 0] - axis_front, -(back.coordinates[..., 0] - axis_back), atol=1e-4)
    np.testing.assert_allclose(front.coordinates[..., 1], back.coordinates[..., 1], atol=1e-4)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("view", [0, 54, 90, 144, 180])
def test_ankles_swing_wider_than_hips(seed: int, view: int) -> None:
    keypoints = generate_skeleton_sequence(generate_identity(seed), view, "NM", 40, Rng(seed))

    ankles = x_trace_amplitude(keypoints, ("left_ankle", "right_ankle"))
    hips = x_trace_amplitude(keypoints, ("left_hip", "right_hip"))

    assert ankles > hips


def test_bag_adds_foreground_to_the_same_skeleton() -> None:
    person = generate_identity(3)
    keypoints = generate_skeleton_sequence(person, 90, "BG", 12, Rng(1))

    normal = render_silhouettes(keypoints, person, "NM")
    bag = render_silhouettes(keypoints, person, "BG")

    assert bag.frames.shape == (12, 64, 64)
    assert np.all(bag.frames >= normal.frames)
    assert bag.frames.sum() > normal.frames.sum()


def test_clothes_thicken_the_silhouette() -> None:
    person = generate_identity(6)
    keypoints = generate_skeleton_sequence(person, 90, "NM", 12, Rng(1))

    normal = render_silhouettes(keypoints, person, "NM")
    clothes = render_silhouettes(keypoints, person, "CL")

    assert clothes.frames.sum() > normal.frames.sum()


def test_every_rendered_frame_has_foreground() -> None:
    person = generate_identity(7)
    masks = render_silhouettes(generate_skeleton_sequence(person, 18, "CL", 16, Rng(2)), person, "CL")

    assert np.all(masks.frames.reshape(16, -1).sum(axis=1) > 0)


def test_coincident_joints_cannot_be_rendered() -> None:
    data = np.zeros((12, 12, 3))
    data[..., 2] = 1.0

    with pytest.raises(RenderError, match="coincident"):
        render_silhouettes(KeypointsMatrix(data=data), generate_identity(0), "NM")


def test_default_layout_counts() -> None:
    plan = GenerationPlan(identities=2, seed=7)

    keys = plan.keys()

    assert len(keys) == 2 * (6 + 2 + 2) * 11
    assert len(set(keys)) == len(keys)


def test_generated_bytes_do_not_depend_on_threads(tmp_path) -> None:
    plan = tiny_plan(identities=2)
    generate_dataset(tmp_path / "one", plan, threads=1)
    generate_dataset(tmp_path / "four", plan, threads=4)

    files = sorted(path.relative_to(tmp_path / "one") for path in (tmp_path / "one").rglob("*") if path.is_file())

    assert len(files) == 1 + 2 * 5 * 2 * 2
    for relative in files:
        assert (tmp_path / "one" / relative).read_bytes() == (tmp_path / "four" / relative).read_bytes()


def test_generated_dataset_opens_as_an_index(tmp_path) -> None:
    entries = generate_dataset(tmp_path, tiny_plan(identities=2, views=(36,)))

    index = DatasetIndex.open(tmp_path)

    assert len(index) == len(entries) == 10
    assert all(entry.frames == 12 for entry in index.entries)
