"""Batch-all triplet loss and the weighted objectives built from it."""

from __future__ import annotations

from dataclasses import dataclass
import logging
from typing import Mapping, Sequence

import numpy as np

from bifusion_gait.autodiff import DiffTensor
from bifusion_gait.errors import DimensionError, SamplingError
from bifusion_gait.kernels import (
    add,
    broadcast_to,
    mul,
    power,
    relu,
    reshape,
    scale,
    select,
    softmax_cross_entropy,
    sub,
    total,
)

LOGGER = logging.getLogger("bifusion_gait.losses")

MARGIN = 0.2
# joints, limbs, bodyparts
BRANCH_WEIGHTS = (3.0, 2.0, 1.0)
# keeps d(sqrt)/dx finite for coincident embeddings
DISTANCE_GUARD = 1e-12


@dataclass(frozen=True)
class LossBreakdown:
    """Differentiable total plus plain-float components for telemetry."""

    total: DiffTensor
    components: Mapping[str, float]

    def value(self) -> float:
        return self.total.item()


def triplet_hinge(d_ap: float, d_an: float, margin: float = MARGIN) -> float:
    return max(0.0, d_ap - d_an + margin)


def pairwise_distances(embeddings: DiffTensor) -> DiffTensor:
    """Euclidean distance matrix ``B x B``."""
    if len(embeddings.shape) != 2:
        raise DimensionError(f"embeddings must be B x D, got {embeddings.shape}.")
    batch, dim = embeddings.shape
    rows = broadcast_to(reshape(embeddings, (batch, 1, dim)), (batch, batch, dim))
    cols = broadcast_to(reshape(embeddings, (1, batch, dim)), (batch, batch, dim))
    diff = sub(rows, cols)
    return power(add(total(mul(diff, diff), axis=2), DISTANCE_GUARD), 0.5)


def valid_triplets(labels: np.ndarray) -> np.ndarray:
    """Mask ``[a, p, n]``: a != p, label(a) == label(p), label(a) != label(n)."""
    same = labels[:, None] == labels[None, :]
    positive = same & ~np.eye(labels.shape[0], dtype=bool)
    return positive[:, :, None] & ~same[:, None, :]


def batch_all_triplet(embeddings: DiffTensor, labels: Sequence[int] | np.ndarray, margin: float = MARGIN) -> DiffTensor:
    """Mean hinge over valid triples whose hinge is strictly positive; 0 when none are."""
    targets = np.asarray(labels).reshape(-1)
    if targets.shape[0] != embeddings.shape[0]:
        raise DimensionError(f"{targets.shape[0]} labels for {embeddings.shape[0]} embeddings.")
    if np.unique(targets).size < 2:
        raise SamplingError("batch-all triplet loss needs at least two identities in the batch.")
    mask = valid_triplets(targets)
    if not mask.any():
        raise SamplingError("batch has no identity with two or more samples, so no triplet is valid.")
    batch = targets.shape[0]
    distances = pairwise_distances(embeddings)
    d_ap = broadcast_to(reshape(distances, (batch, batch, 1)), (batch, batch, batch))
    d_an = broadcast_to(reshape(distances, (batch, 1, batch)), (batch, batch, batch))
    hinge = relu(add(sub(d_ap, d_an), float(margin)))
    masked = mul(hinge, DiffTensor.from_array(mask.astype(np.float64)))
    active = int(np.count_nonzero(masked.data > 0.0))
    return scale(total(masked), 1.0 / max(active, 1))


def part_averaged_triplet(parts: DiffTensor, labels: Sequence[int] | np.ndarray, margin: float = MARGIN) -> DiffTensor:
    """Mean over parts of the batch-all loss on each ``B x D`` part slice."""
    if len(parts.shape) != 3:
        raise DimensionError(f"part features must be B x N x D, got {parts.shape}.")
    num_parts = parts.shape[1]
    loss: DiffTensor | None = None
    for part in range(num_parts):
        term = batch_all_triplet(select(parts, 1, part), labels, margin)
        loss = term if loss is None else add(loss, term)
    assert loss is not None
    return scale(loss, 1.0 / num_parts)


def combine_weighted(terms: Sequence[DiffTensor], weights: Sequence[float]) -> DiffTensor:
    if len(terms) != len(weights):
        raise DimensionError(f"{len(terms)} loss terms for {len(weights)} weights.")
    combined = scale(terms[0], weights[0])
    for term, weight in zip(terms[1:], weights[1:]):
        combined = add(combined, scale(term, weight))
    return combined


def branch_weights(branches: int) -> tuple[float, ...]:
    """Weights for ``branches`` pyramid branches, assigned from the deepest branch upward."""
    if not 1 <= branches <= len(BRANCH_WEIGHTS):
        raise DimensionError(f"unsupported branch count {branches}.")
    return BRANCH_WEIGHTS[len(BRANCH_WEIGHTS) - branches :]


def msgg_pretrain_loss(
    embeddings: Sequence[DiffTensor],
    logits: DiffTensor,
    labels: Sequence[int] | np.ndarray,
    *,
    margin: float = MARGIN,
    weights: Sequence[float] | None = None,
) -> LossBreakdown:
    """Weighted per-branch triplet losses plus cross entropy on the deepest-branch logits."""
    resolved = tuple(weights) if weights is not None else branch_weights(len(embeddings))
    triplets = [batch_all_triplet(embedding, labels, margin) for embedding in embeddings]
    cross_entropy = softmax_cross_entropy(logits, labels)
    loss = add(combine_weighted(triplets, resolved), cross_entropy)
    components = {f"tp_branch{index}": term.item() for index, term in enumerate(triplets)}
    components["ce"] = cross_entropy.item()
    return LossBreakdown(total=loss, components=components)


def global_loss(
    part_features: DiffTensor,
    body_embedding: DiffTensor,
    logits: DiffTensor,
    labels: Sequence[int] | np.ndarray,
    *,
    margin: float = MARGIN,
) -> LossBreakdown:
    """Silhouette-part triplet + skeleton triplet + skeleton cross entropy, unweighted."""
    sil_tp = part_averaged_triplet(part_features, labels, margin)
    ske_tp = batch_all_triplet(body_embedding, labels, margin)
    ske_ce = softmax_cross_entropy(logits, labels)
    return LossBreakdown(
        total=add(add(sil_tp, ske_tp), ske_ce),
        components={"sil_tp": sil_tp.item(), "ske_tp": ske_tp.item(), "ske_ce": ske_ce.item()},
    )
