"""Triplet and combined training losses."""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from bifusion_gait.autodiff import DiffTensor
from bifusion_gait.errors import SamplingError
from bifusion_gait.losses import (
    batch_all_triplet,
    branch_weights,
    global_loss,
    msgg_pretrain_loss,
    part_averaged_triplet,
)
from bifusion_gait.rng import Rng


def _brute_force_triplet(embeddings: np.ndarray, labels: list[int], margin: float) -> float:
    hinges = []
    for a, p, n in itertools.product(range(len(labels)), repeat=3):
        if a == p or labels[a] != labels[p] or labels[a] == labels[n]:
            continue
        d_ap = np.linalg.norm(embeddings[a] - embeddings[p])
        d_an = np.linalg.norm(embeddings[a] - embeddings[n])
        hinges.append(max(0.0, d_ap - d_an + margin))
    positive = [value for value in hinges if value > 0.0]
    return float(np.mean(positive)) if positive else 0.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_batch_all_triplet_matches_brute_force(seed: int) -> None:
    embeddings = Rng(seed).normal(size=(6, 3))
    labels = [0, 0, 1, 1, 2, 2]

    value = batch_all_triplet(DiffTensor(embeddings), labels, 0.2).item()

    assert value == pytest.approx(_brute_force_triplet(embeddings, labels, 0.2), rel=1e-9)


def test_well_separated_clusters_give_zero_loss() -> None:
    embeddings = np.array([[0.0, 0.0], [0.0, 0.01], [10.0, 0.0], [10.0, 0.01]])

    assert batch_all_triplet(DiffTensor(embeddings), [0, 0, 1, 1]).item() == 0.0


def test_collapsed_embeddings_give_the_margin() -> None:
    assert batch_all_triplet(DiffTensor(np.zeros((4, 2))), [0, 0, 1, 1], 0.2).item() == pytest.approx(0.2)


def test_single_identity_batch_is_a_sampling_error() -> None:
    with pytest.raises(SamplingError, match="two identities"):
        batch_all_triplet(DiffTensor(np.zeros((3, 2))), [1, 1, 1])


def test_batch_without_positive_pairs_is_a_sampling_error() -> None:
    with pytest.raises(SamplingError, match="no triplet"):
        batch_all_triplet(DiffTensor(np.zeros((3, 2))), [0, 1, 2])


def test_part_averaged_triplet_is_mean_over_parts() -> None:
    parts = Rng(3).normal(size=(4, 3, 2))
    labels = [0, 0, 1, 1]

    value = part_averaged_triplet(DiffTensor(parts), labels, 0.2).item()

    expected = np.mean([_brute_force_triplet(parts[:, n], labels, 0.2) for n in range(3)])
    assert value == pytest.approx(expected, rel=1e-9)


def test_branch_weights_come_from_the_deepest_branch_upward() -> None:
    assert branch_weights(3) == (3.0, 2.0, 1.0)
    assert branch_weights(2) == (2.0, 1.0)
    assert branch_weights(1) == (1.0,)


def test_msgg_pretrain_loss_weights_branches_and_adds_cross_entropy() -> None:
    rng = Rng(4)
    labels = [0, 0, 1, 1]
    embeddings = [DiffTensor(rng.normal(size=(4, 3))) for _ in range(3)]
    logits = DiffTensor(rng.normal(size=(4, 2)))

    loss = msgg_pretrain_loss(embeddings, logits, labels, margin=0.2)

    parts = loss.components
    expected = 3 * parts["tp_branch0"] + 2 * parts["tp_branch1"] + parts["tp_branch2"] + parts["ce"]
    assert loss.value() == pytest.approx(expected, rel=1e-12)


def test_global_loss_is_unweighted_sum() -> None:
    rng = Rng(5)
    labels = [0, 0, 1, 1]

    loss = global_loss(
        DiffTensor(rng.normal(size=(4, 2, 3))),
        DiffTensor(rng.normal(size=(4, 3))),
        DiffTensor(rng.normal(size=(4, 2))),
        labels,
    )

    assert loss.value() == pytest.approx(sum(loss.components.values()), rel=1e-12)
    assert set(loss.components) == {"sil_tp", "ske_tp", "ske_ce"}
