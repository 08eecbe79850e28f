"""Part-based silhouette encoder.

Frames go through three conv+relu stages (2x2 max pooling after the first
two), each feature map is split into horizontal strips reduced by max, a
per-part micro-motion convolution runs over time, and a temporal max gives
one feature vector per part.
"""

from __future__ import annotations

from dataclasses import dataclass
import logging

import numpy as np

from bifusion_gait.autodiff import DiffTensor
from bifusion_gait.errors import ConfigurationError, DimensionError, InputLengthError
from bifusion_gait.kernels import (
    Mode,
    add,
    broadcast_to,
    conv1d_time,
    conv2d,
    pool,
    relu,
    reshape,
    transpose,
)
from bifusion_gait.params import ParameterStore

LOGGER = logging.getLogger("bifusion_gait.silhouette")

FRAME_SIZE = 64
CONV_KERNEL = 3


@dataclass(frozen=True)
class SilhouetteEncoderConfig:
    stage_channels: tuple[int, int, int] = (32, 64, 128)
    num_parts: int = 16
    window: int = 3
    frame_size: int = FRAME_SIZE

    def __post_init__(self) -> None:
        if len(self.stage_channels) != 3 or any(c < 1 for c in self.stage_channels):
            raise ConfigurationError(f"silhouette stage channels must be three positive integers, got {self.stage_channels}.")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigurationError(f"micro-motion window must be a positive odd integer, got {self.window}.")
        if self.frame_size < 4 or self.frame_size % 4:
            raise ConfigurationError(f"frame size must be a positive multiple of 4, got {self.frame_size}.")
        check_split(self.frame_size // 4, self.num_parts)

    @property
    def part_dim(self) -> int:
        return self.stage_channels[-1]


def check_split(rows: int, num_parts: int) -> int:
    """Rows per part; the strip height must divide the feature map height."""
    if num_parts < 1 or num_parts > rows or rows % num_parts:
        raise ConfigurationError(f"cannot split {rows} feature rows into {num_parts} equal parts.")
    return rows // num_parts


def max_pool_2x2(maps: DiffTensor) -> DiffTensor:
    frames, channels, height, width = maps.shape
    blocks = reshape(maps, (frames, channels, height // 2, 2, width // 2, 2))
    blocks = transpose(blocks, (0, 1, 2, 4, 3, 5))
    return pool(reshape(blocks, (frames, channels, height // 2, width // 2, 4)), -1, "max")


def horizontal_split(fmap: DiffTensor, num_parts: int = 16) -> DiffTensor:
    """Reduce ``... x C x R x W`` maps to ``... x N x C`` by max over each strip of rows."""
    single = len(fmap.shape) == 3
    maps = reshape(fmap, (1, *fmap.shape)) if single else fmap
    frames, channels, rows, width = maps.shape
    rows_per_part = check_split(rows, num_parts)
    strips = reshape(maps, (frames, channels, num_parts, rows_per_part * width))
    parts = transpose(pool(strips, -1, "max"), (0, 2, 1))
    return reshape(parts, (num_parts, channels)) if single else parts


def micro_motion(parts: DiffTensor, kernels: DiffTensor, bias: DiffTensor) -> DiffTensor:
    """Per-part, per-channel temporal convolution (zero padded) followed by relu.

    ``parts`` is ``B x T x N x C`` (or ``T x N x C``); ``kernels`` is ``G x N x C``.
    """
    single = len(parts.shape) == 3
    series = reshape(parts, (1, *parts.shape)) if single else parts
    batch, frames, num_parts, channels = series.shape
    window = kernels.shape[0]
    if kernels.shape[1:] != (num_parts, channels) or bias.shape != (num_parts, channels):
        raise DimensionError(
            f"micro-motion kernels {kernels.shape} / bias {bias.shape} do not match {num_parts} parts x {channels}."
        )
    width = batch * num_parts * channels
    flat = reshape(transpose(series, (1, 0, 2, 3)), (frames, width))
    weights = reshape(broadcast_to(reshape(kernels, (window, 1, num_parts, channels)), (window, batch, num_parts, channels)), (window, width))
    mixed = reshape(conv1d_time(flat, weights), (frames, batch, num_parts, channels))
    out = relu(add(transpose(mixed, (1, 0, 2, 3)), bias))
    return reshape(out, (frames, num_parts, channels)) if single else out


class SilhouetteEncoder:
    """Trainable encoder producing ``N x d_s`` part features per sequence."""

    def __init__(self, config: SilhouetteEncoderConfig, store: ParameterStore, prefix: str = "sil") -> None:
        self.config = config
        self.prefix = prefix
        self.stages: list[tuple[DiffTensor, DiffTensor]] = []
        in_channels = 1
        for stage, out_channels in enumerate(config.stage_channels, start=1):
            fan_in = in_channels * CONV_KERNEL * CONV_KERNEL
            kernel = store.create(
                f"{prefix}.conv{stage}.weight", (out_channels, in_channels, CONV_KERNEL, CONV_KERNEL), fan_in=fan_in
            )
            bias = store.create(f"{prefix}.conv{stage}.bias", (out_channels, 1, 1), init="zeros")
            self.stages.append((kernel, bias))
            in_channels = out_channels
        shape = (config.window, config.num_parts, config.part_dim)
        self.motion_kernels = store.create(f"{prefix}.micro_motion.kernel", shape, fan_in=config.window)
        self.motion_bias = store.create(f"{prefix}.micro_motion.bias", shape[1:], init="zeros")

    def encode_frames(self, frames: np.ndarray | DiffTensor) -> DiffTensor:
        """``F x H x W`` masks to ``F x C x H/4 x W/4`` feature maps."""
        masks = frames if isinstance(frames, DiffTensor) else DiffTensor.from_array(np.asarray(frames, dtype=np.float64))
        size = self.config.frame_size
        if len(masks.shape) != 3 or masks.shape[1:] != (size, size):
            raise DimensionError(f"silhouette frames must be F x {size} x {size}, got {masks.shape}.")
        maps = reshape(masks, (masks.shape[0], 1, size, size))
        for stage, (kernel, bias) in enumerate(self.stages, start=1):
            maps = relu(add(conv2d(maps, kernel, stride=1, pad=1), bias))
            if stage < len(self.stages):
                maps = max_pool_2x2(maps)
        return maps

    def part_sequence(self, silhouettes: np.ndarray) -> DiffTensor:
        """Micro-motion output ``B x T x N x C`` before temporal pooling."""
        data = np.asarray(silhouettes, dtype=np.float64)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4:
            raise DimensionError(f"silhouettes must be B x T x H x W, got {data.shape}.")
        batch, frames = data.shape[:2]
        if frames < self.config.window:
            raise InputLengthError(f"sequence has {frames} frames, the micro-motion window needs {self.config.window}.")
        maps = self.encode_frames(data.reshape(batch * frames, *data.shape[2:]))
        parts = horizontal_split(maps, self.config.num_parts)
        parts = reshape(parts, (batch, frames, self.config.num_parts, self.config.part_dim))
        return micro_motion(parts, self.motion_kernels, self.motion_bias)

    def forward(self, silhouettes: np.ndarray, mode: Mode = "eval") -> DiffTensor:
        """``B x T x H x W`` masks (or one ``T x H x W`` sequence) to ``B x N x d_s``."""
        del mode  # no mode-dependent layers
        return pool(self.part_sequence(silhouettes), 1, "max")


def gaitpart_forward(silhouettes: np.ndarray, encoder: SilhouetteEncoder, mode: Mode = "eval") -> DiffTensor:
    return encoder.forward(silhouettes, mode)
