"""Finite-difference verification of every differentiable kernel and of miniature network blocks."""

from __future__ import annotations

from dataclasses import dataclass
import logging
from typing import Callable, Sequence

import numpy as np

from bifusion_gait import kernels as K
from bifusion_gait.autodiff import DiffTensor, Tape, backward
from bifusion_gait.errors import ContractError
from bifusion_gait.losses import batch_all_triplet, part_averaged_triplet
from bifusion_gait.msgg import (
    MsggConfig,
    MsggNetwork,
    normalize_importance,
    semantic_pool,
    spatial_aggregate,
    temporal_aggregate,
)
from bifusion_gait.params import ParameterStore
from bifusion_gait.rng import Rng
from bifusion_gait.silhouette import (
    SilhouetteEncoder,
    SilhouetteEncoderConfig,
    horizontal_split,
    max_pool_2x2,
    micro_motion,
)
from bifusion_gait.skeleton_graph import adjacency_for, build_pyramid_graph, frame_subset_masks, self_loop_masks

LOGGER = logging.getLogger("bifusion_gait.gradcheck")

STEP = 1e-5
TOLERANCE = 1e-4
ERROR_FLOOR = 1e-8
BLOCK_ELEMENT_CAP = 16

Closure = Callable[[], DiffTensor]


@dataclass(frozen=True)
class GradCheckRow:
    name: str
    elements: int
    error: float

    @property
    def passed(self) -> bool:
        return self.error <= TOLERANCE


@dataclass(frozen=True)
class GradCheckReport:
    rows: tuple[GradCheckRow, ...]

    @property
    def max_error(self) -> float:
        return max((row.error for row in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        return all(row.passed for row in self.rows)

    def lines(self) -> list[str]:
        out = [f"{'case':<28} {'elements':>8} {'max_rel_error':>14} status"]
        for row in self.rows:
            out.append(f"{row.name:<28} {row.elements:>8} {row.error:>14.3e} {'ok' if row.passed else 'FAIL'}")
        out.append(f"max_error={self.max_error:.6e}")
        return out


def grad_check(
    fn: Closure,
    inputs: Sequence[DiffTensor],
    h: float = STEP,
    *,
    max_elements: int | None = None,
    rng: Rng | None = None,
) -> float:
    """Max over checked elements of ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.

    ``fn`` must rebuild its scalar output from ``inputs`` on every call. With
    ``max_elements`` only a random subset of each input's elements is probed.
    """
    for tensor in inputs:
        tensor.requires_grad = True
        tensor.zero_grad()
    with Tape() as tape:
        loss = fn()
    if loss.data.size != 1:
        raise ContractError(f"grad_check needs a scalar closure, got shape {loss.shape}.")
    backward(loss, tape)
    analytic = [np.array(tensor.grad, copy=True) for tensor in inputs]

    worst = 0.0
    for tensor, grad in zip(inputs, analytic):
        flat = tensor.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            picker = rng or Rng(0)
            indices = np.sort(picker.choice(flat.size, max_elements, replace=False))
        for index in indices:
            original = flat[index]
            flat[index] = original + h
            plus = fn().item()
            flat[index] = original - h
            minus = fn().item()
            flat[index] = original
            numeric = (plus - minus) / (2.0 * h)
            exact = grad.reshape(-1)[index]
            error = abs(exact - numeric) / max(ERROR_FLOOR, abs(exact) + abs(numeric))
            worst = max(worst, float(error))
    return worst


def _leaf(rng: Rng, shape: Sequence[int], low: float = -1.0, high: float = 1.0) -> DiffTensor:
    return DiffTensor(rng.uniform(low, high, size=tuple(shape)), requires_grad=True)


def _away_from_zero(rng: Rng, shape: Sequence[int]) -> DiffTensor:
    magnitude = rng.uniform(0.2, 1.0, size=tuple(shape))
    sign = np.where(rng.uniform(size=tuple(shape)) < 0.5, -1.0, 1.0)
    return DiffTensor(magnitude * sign, requires_grad=True)


def _projected(out: DiffTensor, weights: np.ndarray) -> DiffTensor:
    """Scalar ``sum(out * weights)`` so every output element carries a distinct gradient."""
    return K.total(K.mul(out, DiffTensor.from_array(weights)))


def _case(rng: Rng, name: str, build: Callable[[Sequence[DiffTensor]], DiffTensor], inputs: Sequence[DiffTensor]) -> tuple[str, Closure, Sequence[DiffTensor]]:
    probe = build(inputs)
    weights = rng.normal(size=probe.shape)
    return name, (lambda: _projected(build(inputs), weights)), inputs


def kernel_cases(seed: int = 0) -> list[tuple[str, Closure, Sequence[DiffTensor]]]:
    """Every differentiable kernel on random shapes no larger than 4 x 4 x 4."""
    rng = Rng(seed, stream=11)
    graph = build_pyramid_graph()
    masks = adjacency_for(graph, "limbs", "gait_temporal", self_loops_all_subsets=True).masks
    limbs = masks.shape[1]
    frame_masks = self_loop_masks(frame_subset_masks(graph.limbs, rng.normal(size=(1, 2, limbs, 2))))
    labels = np.array([0, 0, 1, 1])
    stats = K.BatchNormStats(running_mean=rng.normal(size=3), running_var=rng.uniform(0.5, 2.0, size=3))

    cases = [
        _case(rng, "add", lambda x: K.add(x[0], x[1]), [_leaf(rng, (3, 4)), _leaf(rng, (4,))]),
        _case(rng, "sub", lambda x: K.sub(x[0], x[1]), [_leaf(rng, (2, 3, 4)), _leaf(rng, (3, 1))]),
        _case(rng, "mul", lambda x: K.mul(x[0], x[1]), [_leaf(rng, (4, 3)), _leaf(rng, (4, 3))]),
        _case(rng, "scale", lambda x: K.scale(x[0], -1.7), [_leaf(rng, (2, 4))]),
        _case(rng, "power", lambda x: K.power(x[0], -0.5), [_leaf(rng, (3, 3), 0.5, 2.0)]),
        _case(rng, "total", lambda x: K.total(x[0], axis=1, keepdims=True), [_leaf(rng, (2, 3, 4))]),
        _case(rng, "reshape", lambda x: K.reshape(x[0], (4, 6)), [_leaf(rng, (2, 3, 4))]),
        _case(rng, "transpose", lambda x: K.transpose(x[0], (2, 0, 1)), [_leaf(rng, (2, 3, 4))]),
        _case(rng, "broadcast_to", lambda x: K.broadcast_to(x[0], (4, 3, 2)), [_leaf(rng, (3, 1))]),
        _case(rng, "select", lambda x: K.select(x[0], 1, 2), [_leaf(rng, (2, 3, 4))]),
        _case(rng, "concat", lambda x: K.concat(x[0], x[1]), [_leaf(rng, (2, 3)), _leaf(rng, (2, 4))]),
        _case(rng, "matmul", lambda x: K.matmul(x[0], x[1]), [_leaf(rng, (3, 4)), _leaf(rng, (4, 2))]),
        _case(rng, "batched_matmul", lambda x: K.batched_matmul(x[0], x[1]), [_leaf(rng, (2, 3, 4)), _leaf(rng, (2, 4, 3))]),
        _case(rng, "conv2d", lambda x: K.conv2d(x[0], x[1], stride=1, pad=1), [_leaf(rng, (2, 4, 4)), _leaf(rng, (3, 2, 3, 3))]),
        _case(rng, "conv2d_stride2", lambda x: K.conv2d(x[0], x[1], stride=2, pad=1), [_leaf(rng, (2, 1, 3, 3)), _leaf(rng, (2, 1, 3, 3))]),
        _case(rng, "conv1d_time", lambda x: K.conv1d_time(x[0], x[1]), [_leaf(rng, (4, 3)), _leaf(rng, (3, 3))]),
        _case(rng, "conv1d_time_shared", lambda x: K.conv1d_time(x[0], x[1]), [_leaf(rng, (4, 3)), _leaf(rng, (3, 1))]),
        _case(rng, "batch_norm_train", lambda x: K.batch_norm(x[0], x[1], x[2], "train"), [_leaf(rng, (4, 3)), _leaf(rng, (3,)), _leaf(rng, (3,))]),
        _case(rng, "batch_norm_eval", lambda x: K.batch_norm(x[0], x[1], x[2], "eval", stats=stats), [_leaf(rng, (4, 3)), _leaf(rng, (3,)), _leaf(rng, (3,))]),
        _case(rng, "relu", lambda x: K.relu(x[0]), [_away_from_zero(rng, (3, 4))]),
        _case(rng, "dropout_eval", lambda x: K.dropout(x[0], 0.3, "eval"), [_leaf(rng, (3, 4))]),
        _case(rng, "dropout_fixed_mask", lambda x: K.dropout(x[0], 0.3, "train", Rng(seed, stream=12)), [_leaf(rng, (3, 4))]),
        _case(rng, "pool_max", lambda x: K.pool(x[0], 1, "max"), [_leaf(rng, (2, 4, 3))]),
        _case(rng, "pool_mean", lambda x: K.pool(x[0], 0, "mean"), [_leaf(rng, (4, 3))]),
        _case(rng, "linear", lambda x: K.linear(x[0], x[1], x[2]), [_leaf(rng, (3, 4)), _leaf(rng, (4, 2)), _leaf(rng, (2,))]),
        _case(rng, "square_sum", lambda x: K.square_sum(x[0]), [_leaf(rng, (3, 4))]),
        _case(rng, "absolute", lambda x: K.absolute(x[0]), [_away_from_zero(rng, (3, 4))]),
        _case(rng, "normalize_importance", lambda x: normalize_importance(masks[0], x[0]), [_leaf(rng, (limbs, limbs), 0.5, 1.5)]),
        _case(rng, "normalize_importance_signed", lambda x: normalize_importance(masks[1], x[0]), [_away_from_zero(rng, (limbs, limbs))]),
        _case(
            rng,
            "spatial_aggregate_per_frame",
            lambda x: spatial_aggregate(x[0], frame_masks, x[1:4], x[4:7]),
            [_leaf(rng, (1, 2, limbs, 2))]
            + [_leaf(rng, (2, 3)) for _ in range(3)]
            + [_leaf(rng, (limbs, limbs), 0.5, 1.5) for _ in range(3)],
        ),
        _case(
            rng,
            "spatial_aggregate",
            lambda x: spatial_aggregate(x[0], masks, x[1:4], x[4:7]),
            [_leaf(rng, (1, 2, limbs, 2))]
            + [_leaf(rng, (2, 3)) for _ in range(3)]
            + [_leaf(rng, (limbs, limbs), 0.5, 1.5) for _ in range(3)],
        ),
        _case(rng, "temporal_aggregate", lambda x: temporal_aggregate(x[0], x[1]), [_leaf(rng, (2, 4, 3, 2)), _leaf(rng, (3, 3))]),
        _case(
            rng,
            "semantic_pool",
            lambda x: semantic_pool(x[0], x[1], graph.limbs_to_bodyparts),
            [_leaf(rng, (1, 2, graph.limbs.node_count, 2)), _leaf(rng, (1, 2, graph.bodyparts.node_count, 2))],
        ),
        _case(rng, "max_pool_2x2", lambda x: max_pool_2x2(x[0]), [_leaf(rng, (1, 2, 4, 4))]),
        _case(rng, "horizontal_split", lambda x: horizontal_split(x[0], 2), [_leaf(rng, (2, 2, 4, 3))]),
        _case(
            rng,
            "micro_motion",
            lambda x: micro_motion(x[0], x[1], x[2]),
            [_leaf(rng, (2, 4, 2, 3)), _leaf(rng, (3, 2, 3)), _leaf(rng, (2, 3))],
        ),
    ]
    logits = _leaf(rng, (4, 3))
    cases.append(("softmax_cross_entropy", lambda: K.softmax_cross_entropy(logits, labels), [logits]))
    embeddings = _leaf(rng, (4, 3))
    cases.append(("batch_all_triplet", lambda: batch_all_triplet(embeddings, labels, 0.5), [embeddings]))
    parts = _leaf(rng, (4, 2, 3))
    cases.append(("part_averaged_triplet", lambda: part_averaged_triplet(parts, labels, 0.5), [parts]))
    return cases


def miniature_msgg_case(seed: int = 0, blocks: int = 2) -> tuple[str, Closure, Sequence[DiffTensor]]:
    """The first ``blocks`` cross-scale blocks of a tiny MSGG in eval mode, checked on their parameters."""
    store = ParameterStore(seed)
    network = MsggNetwork(MsggConfig(num_classes=2, channels=(2, 3, 3), temporal_kernel=3), store)
    rng = Rng(seed, stream=13)
    keypoints = rng.normal(size=(2, 4, 12, 3))
    # the center one-hot init leaves most temporal taps at exactly zero
    for name, tensor in store.named_parameters():
        if name.endswith("temporal.kernel"):
            tensor.data[...] = rng.uniform(-1.0, 1.0, size=tensor.shape)
    state = network.branch_inputs(keypoints)
    for block_index in range(1, blocks + 1):
        state = network.cross_scale_block(state, block_index, "eval")
    weights = [rng.normal(size=features.shape) for features in state.features]

    def closure() -> DiffTensor:
        current = network.branch_inputs(keypoints)
        for block_index in range(1, blocks + 1):
            current = network.cross_scale_block(current, block_index, "eval")
        loss: DiffTensor | None = None
        for features, projection in zip(current.features, weights):
            term = _projected(features, projection)
            loss = term if loss is None else K.add(loss, term)
        assert loss is not None
        return loss

    prefixes = tuple(f"msgg.block{index}." for index in range(1, blocks + 1))
    inputs = [tensor for name, tensor in store.named_parameters() if name.startswith(prefixes)]
    return f"msgg_{blocks}_blocks", closure, inputs


def miniature_silhouette_case(seed: int = 0) -> tuple[str, Closure, Sequence[DiffTensor]]:
    store = ParameterStore(seed)
    encoder = SilhouetteEncoder(SilhouetteEncoderConfig(stage_channels=(2, 2, 2), num_parts=2, window=3, frame_size=8), store)
    rng = Rng(seed, stream=14)
    frames = rng.uniform(0.1, 1.0, size=(2, 3, 8, 8))
    weights = rng.normal(size=encoder.forward(frames).shape)
    inputs = [tensor for _, tensor in store.named_parameters()]
    return "silhouette_encoder", (lambda: _projected(encoder.forward(frames), weights)), inputs


def run_gradient_suite(seed: int = 0, *, include_blocks: bool = True) -> GradCheckReport:
    """Check every kernel and, optionally, the miniature MSGG and silhouette encoder."""
    cases = kernel_cases(seed)
    if include_blocks:
        cases.append(miniature_msgg_case(seed))
        cases.append(miniature_silhouette_case(seed))
    sampler = Rng(seed, stream=15)
    rows = []
    for name, closure, inputs in cases:
        elements = sum(tensor.size for tensor in inputs)
        cap = BLOCK_ELEMENT_CAP if name.startswith("msgg_") else None
        error = grad_check(closure, inputs, max_elements=cap, rng=sampler)
        rows.append(GradCheckRow(name=name, elements=elements, error=error))
        LOGGER.debug("grad_check case=%s elements=%d error=%.3e", name, elements, error)
    report = GradCheckReport(rows=tuple(rows))
    LOGGER.info("gradient_suite cases=%d max_error=%.3e passed=%s", len(rows), report.max_error, report.passed)
    return report
