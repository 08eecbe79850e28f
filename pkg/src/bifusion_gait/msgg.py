"""Multi-scale gait graph network over the joints, limbs and bodyparts graphs.

Features flow as ``B x T x N x C`` tensors. Each of the six cross-scale
blocks runs spatial aggregation, batch norm, relu, temporal aggregation,
batch norm and relu on every branch, adds a residual (blocks 2..6), then
passes messages upward with semantic pooling.
"""

from __future__ import annotations

from dataclasses import dataclass
import logging
from typing import Literal, Sequence

import numpy as np

from bifusion_gait.autodiff import DiffTensor
from bifusion_gait.errors import ConfigurationError, DimensionError, InputLengthError
from bifusion_gait.kernels import (
    BatchNormStats,
    Mode,
    absolute,
    add,
    batch_norm,
    batched_matmul,
    broadcast_to,
    conv1d_time,
    linear,
    matmul,
    mul,
    pool,
    power,
    relu,
    reshape,
    total,
    transpose,
)
from bifusion_gait.params import ParameterStore
from bifusion_gait.skeleton_graph import (
    DEGREE_GUARD,
    SUBSET_COUNTS,
    PoolMap,
    PyramidGraph,
    Scale,
    Strategy,
    adjacency_for,
    build_pyramid_graph,
    frame_subset_masks,
    identity_pool_map,
    self_loop_masks,
)

LOGGER = logging.getLogger("bifusion_gait.msgg")

Pyramid = Literal["full", "joints", "joints_limbs", "three_joints"]
PYRAMIDS: tuple[Pyramid, ...] = ("full", "joints", "joints_limbs", "three_joints")
BLOCK_COUNT = 6
INPUT_CHANNELS = 3


@dataclass(frozen=True)
class MsggConfig:
    """Architecture settings; channel triple applies to blocks (1,2), (3,4), (5,6)."""

    num_classes: int
    channels: tuple[int, int, int] = (16, 32, 64)
    temporal_kernel: int = 9
    blocks: int = BLOCK_COUNT
    strategy: Strategy = "gait_temporal"
    semp_enabled: bool = True
    pyramid: Pyramid = "full"
    self_loops_all_subsets: bool = True

    def __post_init__(self) -> None:
        if self.blocks != BLOCK_COUNT:
            raise ConfigurationError(f"blocks must be {BLOCK_COUNT}, got {self.blocks}.")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ConfigurationError(f"temporal_kernel must be a positive odd integer, got {self.temporal_kernel}.")
        if len(self.channels) != 3 or any(c < 1 for c in self.channels):
            raise ConfigurationError(f"channels must be three positive integers, got {self.channels}.")
        if self.strategy not in SUBSET_COUNTS:
            raise ConfigurationError(f"unknown partition strategy {self.strategy!r}.")
        if self.pyramid not in PYRAMIDS:
            raise ConfigurationError(f"pyramid must be one of {PYRAMIDS}, got {self.pyramid!r}.")
        if self.num_classes < 1:
            raise ConfigurationError(f"num_classes must be >= 1, got {self.num_classes}.")

    def block_channels(self, block_index: int) -> int:
        if not 1 <= block_index <= self.blocks:
            raise ConfigurationError(f"block index must lie in 1..{self.blocks}, got {block_index}.")
        return self.channels[(block_index - 1) // 2]

    @property
    def embedding_dim(self) -> int:
        return self.channels[-1]


@dataclass(frozen=True)
class BranchState:
    """Per-branch feature tensors, shallowest scale first.

    ``frame_masks`` holds one ``B x T x K x N x N`` mask stack per branch when
    the spatial strategy relabels neighbours on every input frame.
    """

    features: tuple[DiffTensor, ...]
    frame_masks: tuple[np.ndarray, ...] | None = None


@dataclass(frozen=True)
class MsggOutput:
    """Pooled per-branch embeddings (``B x c3``) and head logits from the deepest branch."""

    embeddings: tuple[DiffTensor, ...]
    logits: DiffTensor
    scales: tuple[Scale, ...]

    @property
    def e_body(self) -> DiffTensor:
        return self.embeddings[-1]

    @property
    def e_joints(self) -> DiffTensor:
        return self.embeddings[0]

    @property
    def e_limbs(self) -> DiffTensor:
        if len(self.embeddings) < 3:
            raise ConfigurationError("this pyramid has no limbs branch.")
        return self.embeddings[1]


def mix_nodes(matrix: DiffTensor, features: DiffTensor) -> DiffTensor:
    """Apply a node-mixing matrix to every frame: ``out[b, t] = M @ f[b, t]``."""
    batch, frames, nodes, channels = features.shape
    if matrix.shape[1] != nodes:
        raise DimensionError(f"node matrix {matrix.shape} does not match {nodes} nodes.")
    rows = matrix.shape[0]
    flat = reshape(transpose(features, (2, 0, 1, 3)), (nodes, batch * frames * channels))
    mixed = reshape(matmul(matrix, flat), (rows, batch, frames, channels))
    return transpose(mixed, (1, 2, 0, 3))


def mix_nodes_per_frame(matrices: DiffTensor, features: DiffTensor) -> DiffTensor:
    """``out[b, t] = M[b, t] @ f[b, t]`` for a ``B x T x N x N`` stack of matrices."""
    batch, frames, nodes, channels = features.shape
    if matrices.shape != (batch, frames, nodes, nodes):
        raise DimensionError(f"per-frame matrices {matrices.shape} do not match features {features.shape}.")
    stacked = batched_matmul(
        reshape(matrices, (batch * frames, nodes, nodes)),
        reshape(features, (batch * frames, nodes, channels)),
    )
    return reshape(stacked, (batch, frames, nodes, channels))


def normalize_importance(mask: np.ndarray, importance: DiffTensor) -> DiffTensor:
    """Differentiable ``D^-1/2 ((A_k+I) * W_E) D^-1/2`` over the last two axes of ``mask``.

    The degree is the row sum of ``|(A_k+I) * W_E|``, so it stays positive
    whatever sign the trained importance weights take.
    """
    weighted = mul(DiffTensor.from_array(mask), importance)
    nodes = mask.shape[-1]
    leading = weighted.shape[:-2]
    inv_sqrt = power(add(total(absolute(weighted), axis=-1), DEGREE_GUARD), -0.5)
    return mul(mul(reshape(inv_sqrt, (*leading, nodes, 1)), weighted), reshape(inv_sqrt, (*leading, 1, nodes)))


def spatial_aggregate(
    features: DiffTensor,
    masks: np.ndarray,
    weights: Sequence[DiffTensor],
    importance: Sequence[DiffTensor],
) -> DiffTensor:
    """Sum over subsets of ``norm((A_k+I) * W_E_k) . f . W_k`` per frame.

    ``masks`` is either ``K x N x N`` (shared by every frame) or
    ``B x T x K x N x N`` (one labelling per frame).
    """
    batch, frames, nodes, _ = features.shape
    per_frame = masks.ndim == 5
    if masks.ndim not in (3, 5) or masks.shape[-1] != nodes:
        raise DimensionError(f"adjacency {masks.shape} does not fit features with {nodes} nodes.")
    if per_frame and masks.shape[:2] != (batch, frames):
        raise DimensionError(f"per-frame masks {masks.shape} do not match {batch} x {frames} frames.")
    subsets = masks.shape[-3]
    if not (len(weights) == len(importance) == subsets):
        raise DimensionError("one weight and one importance matrix are needed per subset.")
    out: DiffTensor | None = None
    for k, (weight, edge_weight) in enumerate(zip(weights, importance)):
        matrices = normalize_importance(masks[..., k, :, :], edge_weight)
        mixed = mix_nodes_per_frame(matrices, features) if per_frame else mix_nodes(matrices, features)
        flat = reshape(mixed, (batch * frames * nodes, weight.shape[0]))
        term = matmul(flat, weight)
        out = term if out is None else add(out, term)
    assert out is not None
    return reshape(out, (batch, frames, nodes, weights[0].shape[1]))


def temporal_aggregate(features: DiffTensor, kernels: DiffTensor) -> DiffTensor:
    """Per-node temporal correlation; ``kernels`` is ``G x N``, shared across a node's channels."""
    batch, frames, nodes, channels = features.shape
    window = kernels.shape[0]
    if kernels.shape[1] != nodes:
        raise DimensionError(f"temporal kernels {kernels.shape} do not match {nodes} nodes.")
    series = reshape(transpose(features, (1, 0, 2, 3)), (frames, batch * nodes * channels))
    expanded = broadcast_to(reshape(kernels, (window, 1, nodes, 1)), (window, batch, nodes, channels))
    mixed = conv1d_time(series, reshape(expanded, (window, batch * nodes * channels)))
    return transpose(reshape(mixed, (frames, batch, nodes, channels)), (1, 0, 2, 3))


def semantic_pool(lower: DiffTensor, current: DiffTensor, pool_map: PoolMap) -> DiffTensor:
    """``f_out[i] = f_in[i] + (f_lower[a] + f_lower[b]) / 2`` for each ``((a, b) -> i)``."""
    if lower.shape[-1] != current.shape[-1]:
        raise DimensionError(f"semantic pooling channel mismatch: {lower.shape[-1]} vs {current.shape[-1]}.")
    if lower.shape[2] != pool_map.from_count or current.shape[2] != pool_map.to_count:
        raise DimensionError("pool map does not match the two scales.")
    return add(current, mix_nodes(DiffTensor.from_array(pool_map.matrix()), lower))


def batch_norm_channels(
    features: DiffTensor, gamma: DiffTensor, beta: DiffTensor, stats: BatchNormStats, mode: Mode
) -> DiffTensor:
    """Batch norm over every (sample, frame, node) row of a ``B x T x N x C`` tensor."""
    shape = features.shape
    flat = reshape(features, (int(np.prod(shape[:-1])), shape[-1]))
    return reshape(batch_norm(flat, gamma, beta, mode, stats=stats), shape)


class GraphUnit:
    """Spatial-temporal aggregation on one branch within one block."""

    def __init__(
        self,
        store: ParameterStore,
        prefix: str,
        masks: np.ndarray,
        in_channels: int,
        out_channels: int,
        temporal_kernel: int,
        residual: bool,
    ) -> None:
        subsets, nodes, _ = masks.shape
        self.masks = masks
        self.weights = [
            store.create(f"{prefix}.spatial.w{k}", (in_channels, out_channels), fan_in=in_channels)
            for k in range(subsets)
        ]
        self.importance = [
            store.create(f"{prefix}.edge_importance{k}", (nodes, nodes), init="ones", decay=False)
            for k in range(subsets)
        ]
        self.bn_spatial = store.batch_norm(f"{prefix}.bn_spatial", out_channels)
        self.temporal = store.create(f"{prefix}.temporal.kernel", (temporal_kernel, nodes), init="center_one_hot")
        self.bn_temporal = store.batch_norm(f"{prefix}.bn_temporal", out_channels)
        self.residual = residual
        self.projection = (
            store.create(f"{prefix}.residual.w", (in_channels, out_channels), fan_in=in_channels)
            if residual and in_channels != out_channels
            else None
        )

    def forward(self, features: DiffTensor, mode: Mode, frame_masks: np.ndarray | None = None) -> DiffTensor:
        masks = self.masks if frame_masks is None else frame_masks
        h = spatial_aggregate(features, masks, self.weights, self.importance)
        h = relu(batch_norm_channels(h, *self.bn_spatial, mode))
        h = temporal_aggregate(h, self.temporal)
        h = relu(batch_norm_channels(h, *self.bn_temporal, mode))
        if not self.residual:
            return h
        if self.projection is None:
            return add(h, features)
        batch, frames, nodes, channels = features.shape
        flat = reshape(features, (batch * frames * nodes, channels))
        shortcut = reshape(matmul(flat, self.projection), h.shape)
        return add(h, shortcut)


def branch_scales(pyramid: Pyramid) -> tuple[Scale, ...]:
    return {
        "full": ("joints", "limbs", "bodyparts"),
        "joints": ("joints",),
        "joints_limbs": ("joints", "limbs"),
        "three_joints": ("joints", "joints", "joints"),
    }[pyramid]


class MsggNetwork:
    """Six cross-scale blocks, global average pooling and a BN+FC head on the deepest branch."""

    def __init__(
        self,
        config: MsggConfig,
        store: ParameterStore,
        prefix: str = "msgg",
        graph: PyramidGraph | None = None,
    ) -> None:
        self.config = config
        self.store = store
        self.prefix = prefix
        self.graph = graph or build_pyramid_graph()
        self.scales = branch_scales(config.pyramid)
        self.pool_maps = self._pool_maps()
        self.input_maps = self._input_maps()
        adjacency = {
            scale: adjacency_for(
                self.graph, scale, config.strategy, self_loops_all_subsets=config.self_loops_all_subsets
            )
            for scale in dict.fromkeys(self.scales)
        }
        self.units: list[list[GraphUnit]] = []
        in_channels = INPUT_CHANNELS
        for block_index in range(1, config.blocks + 1):
            out_channels = config.block_channels(block_index)
            self.units.append(
                [
                    GraphUnit(
                        store,
                        f"{prefix}.block{block_index}.branch{branch}_{scale}",
                        adjacency[scale].masks,
                        in_channels,
                        out_channels,
                        config.temporal_kernel,
                        residual=block_index > 1,
                    )
                    for branch, scale in enumerate(self.scales)
                ]
            )
            in_channels = out_channels
        self.head_bn = store.batch_norm(f"{prefix}.head.bn", config.embedding_dim)
        self.head_weight = store.create(
            f"{prefix}.head.fc.weight", (config.embedding_dim, config.num_classes), fan_in=config.embedding_dim
        )
        self.head_bias = store.create(f"{prefix}.head.fc.bias", (config.num_classes,), init="zeros")
        LOGGER.debug(
            "msgg_built prefix=%s pyramid=%s strategy=%s parameters=%d",
            prefix,
            config.pyramid,
            config.strategy,
            len(store),
        )

    def _pool_maps(self) -> tuple[PoolMap, ...]:
        if self.config.pyramid == "three_joints":
            return (identity_pool_map(self.graph.joints),) * 2
        return (self.graph.joints_to_limbs, self.graph.limbs_to_bodyparts)[: len(self.scales) - 1]

    def _input_maps(self) -> tuple[np.ndarray, ...]:
        maps = [np.eye(self.graph.joints.node_count)]
        for pool_map in self.pool_maps:
            maps.append(pool_map.matrix() @ maps[-1])
        return tuple(maps)

    def branch_inputs(self, keypoints: np.ndarray) -> BranchState:
        """Joint coordinates per branch; coarser scales start from pooled pair means."""
        base = DiffTensor.from_array(np.asarray(keypoints, dtype=np.float64))
        features = [base]
        for matrix in self.input_maps[1:]:
            features.append(DiffTensor.from_array(np.einsum("ij,btjc->btic", matrix, base.data)))
        frame_masks = None
        if self.config.strategy == "spatial":
            frame_masks = tuple(
                self_loop_masks(
                    frame_subset_masks(self.graph.scale(scale), branch.data[..., :2]),
                    self.config.self_loops_all_subsets,
                )
                for scale, branch in zip(self.scales, features)
            )
        return BranchState(features=tuple(features), frame_masks=frame_masks)

    def cross_scale_block(self, state: BranchState, block_index: int, mode: Mode) -> BranchState:
        units = self.units[block_index - 1]
        masks = state.frame_masks or (None,) * len(units)
        updated = [unit.forward(features, mode, mask) for unit, features, mask in zip(units, state.features, masks)]
        if self.config.semp_enabled:
            for level, pool_map in enumerate(self.pool_maps, start=1):
                updated[level] = semantic_pool(updated[level - 1], updated[level], pool_map)
        return BranchState(features=tuple(updated), frame_masks=state.frame_masks)

    def forward(self, keypoints: np.ndarray, mode: Mode = "eval") -> MsggOutput:
        """Embed a ``B x T x 12 x 3`` batch (a single ``T x 12 x 3`` sequence is promoted)."""
        data = np.asarray(keypoints, dtype=np.float64)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or data.shape[2:] != (self.graph.joints.node_count, INPUT_CHANNELS):
            raise DimensionError(f"keypoints must be B x T x 12 x 3, got {data.shape}.")
        if data.shape[1] < self.config.temporal_kernel:
            raise InputLengthError(
                f"sequence has {data.shape[1]} frames, fewer than the temporal kernel {self.config.temporal_kernel}."
            )
        state = self.branch_inputs(data)
        for block_index in range(1, self.config.blocks + 1):
            state = self.cross_scale_block(state, block_index, mode)
        embeddings = tuple(pool(pool(features, 2, "mean"), 1, "mean") for features in state.features)
        gamma, beta, stats = self.head_bn
        logits = linear(batch_norm(embeddings[-1], gamma, beta, mode, stats=stats), self.head_weight, self.head_bias)
        return MsggOutput(embeddings=embeddings, logits=logits, scales=self.scales)


def msgg_forward(keypoints: np.ndarray, network: MsggNetwork, mode: Mode = "eval") -> MsggOutput:
    return network.forward(keypoints, mode)
