"""Compact block, part-wise fusion and the assembled two-branch network."""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
from typing import Literal

import numpy as np

from bifusion_gait.autodiff import DiffTensor
from bifusion_gait.errors import ConfigurationError, DimensionError
from bifusion_gait.kernels import (
    Mode,
    add,
    batch_norm,
    batched_matmul,
    broadcast_to,
    concat,
    dropout,
    matmul,
    reshape,
    transpose,
)
from bifusion_gait.msgg import MsggConfig, MsggNetwork, MsggOutput, branch_scales
from bifusion_gait.params import ParameterStore
from bifusion_gait.rng import Rng
from bifusion_gait.silhouette import SilhouetteEncoder, SilhouetteEncoderConfig

LOGGER = logging.getLogger("bifusion_gait.fusion")

CompactSource = Literal["body", "concat"]


@dataclass(frozen=True)
class BiFusionConfig:
    msgg: MsggConfig
    silhouette: SilhouetteEncoderConfig = field(default_factory=SilhouetteEncoderConfig)
    compact_dim: int = 32
    compact_dropout: float = 0.3
    fused_dim: int = 128
    compact_source: CompactSource = "body"

    def __post_init__(self) -> None:
        if self.compact_dim < 1 or self.fused_dim < 1:
            raise ConfigurationError("compact_dim and fused_dim must be positive.")
        if not 0.0 <= self.compact_dropout < 1.0:
            raise ConfigurationError(f"compact_dropout must lie in [0, 1), got {self.compact_dropout}.")
        if self.compact_source not in ("body", "concat"):
            raise ConfigurationError(f"compact_source must be 'body' or 'concat', got {self.compact_source!r}.")

    @property
    def compact_input_dim(self) -> int:
        branches = 1 if self.compact_source == "body" else branch_count(self.msgg)
        return branches * self.msgg.embedding_dim


def branch_count(config: MsggConfig) -> int:
    return len(branch_scales(config.pyramid))


class CompactBlock:
    """Batch norm, dropout, then a bias-free linear map to ``out_dim``."""

    def __init__(self, store: ParameterStore, prefix: str, in_dim: int, out_dim: int = 32, rate: float = 0.3) -> None:
        self.rate = rate
        self.bn = store.batch_norm(f"{prefix}.bn", in_dim)
        self.weight = store.create(f"{prefix}.fc.weight", (in_dim, out_dim), fan_in=in_dim)

    def forward(self, embedding: DiffTensor, mode: Mode, rng: Rng | None = None) -> DiffTensor:
        gamma, beta, stats = self.bn
        normalized = batch_norm(embedding, gamma, beta, mode, stats=stats)
        return matmul(dropout(normalized, self.rate, mode, rng), self.weight)


def compact_block(embedding: DiffTensor, block: CompactBlock, mode: Mode, rng: Rng | None = None) -> DiffTensor:
    return block.forward(embedding, mode, rng)


class PartFusion:
    """One fully connected layer per part over ``concat(s_n, k)``; layers are not shared."""

    def __init__(
        self, store: ParameterStore, prefix: str, num_parts: int, part_dim: int, compact_dim: int, fused_dim: int
    ) -> None:
        in_dim = part_dim + compact_dim
        self.num_parts = num_parts
        self.weight = store.create(f"{prefix}.weight", (num_parts, in_dim, fused_dim), fan_in=in_dim)
        self.bias = store.create(f"{prefix}.bias", (num_parts, fused_dim), init="zeros")

    def forward(self, parts: DiffTensor, compact: DiffTensor) -> DiffTensor:
        """``B x N x d_s`` parts and ``B x c`` compact features to ``B x N x fused``."""
        batch, num_parts, part_dim = parts.shape
        if num_parts != self.num_parts:
            raise DimensionError(f"fusion expects {self.num_parts} parts, got {num_parts}.")
        if compact.shape[0] != batch or part_dim + compact.shape[1] != self.weight.shape[1]:
            raise DimensionError(
                f"fusion input {parts.shape} + {compact.shape} does not match layers of width {self.weight.shape[1]}."
            )
        shared = broadcast_to(reshape(compact, (batch, 1, compact.shape[1])), (batch, num_parts, compact.shape[1]))
        joined = transpose(concat(parts, shared), (1, 0, 2))
        fused = add(batched_matmul(joined, self.weight), reshape(self.bias, (num_parts, 1, self.bias.shape[1])))
        return transpose(fused, (1, 0, 2))


def fuse_parts(parts: DiffTensor, compact: DiffTensor, fusion: PartFusion) -> DiffTensor:
    return fusion.forward(parts, compact)


@dataclass(frozen=True)
class BiFusionOutput:
    fused: DiffTensor
    parts: DiffTensor
    compact: DiffTensor
    skeleton: MsggOutput


class BiFusionNetwork:
    """Skeleton graph network and silhouette encoder joined by the compact block and part fusion."""

    def __init__(self, config: BiFusionConfig, store: ParameterStore) -> None:
        self.config = config
        self.store = store
        self.msgg = MsggNetwork(config.msgg, store, prefix="msgg")
        self.silhouette = SilhouetteEncoder(config.silhouette, store, prefix="sil")
        self.compact = CompactBlock(
            store, "compact", config.compact_input_dim, config.compact_dim, config.compact_dropout
        )
        self.fusion = PartFusion(
            store,
            "fusion",
            config.silhouette.num_parts,
            config.silhouette.part_dim,
            config.compact_dim,
            config.fused_dim,
        )

    def compact_input(self, skeleton: MsggOutput) -> DiffTensor:
        if self.config.compact_source == "body":
            return skeleton.e_body
        joined = skeleton.embeddings[0]
        for embedding in skeleton.embeddings[1:]:
            joined = concat(joined, embedding)
        return joined

    def skeleton_features(self, keypoints: np.ndarray, mode: Mode, rng: Rng | None = None) -> tuple[MsggOutput, DiffTensor]:
        skeleton = self.msgg.forward(keypoints, mode)
        return skeleton, self.compact.forward(self.compact_input(skeleton), mode, rng)

    def forward(
        self, keypoints: np.ndarray, silhouettes: np.ndarray, mode: Mode = "eval", rng: Rng | None = None
    ) -> BiFusionOutput:
        skeleton, compact = self.skeleton_features(keypoints, mode, rng)
        parts = self.silhouette.forward(silhouettes, mode)
        fused = self.fusion.forward(parts, compact)
        return BiFusionOutput(fused=fused, parts=parts, compact=compact, skeleton=skeleton)
