"""Run configuration loaded from a flat ``key = value`` file plus command-line overrides."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
import logging
from pathlib import Path
from typing import Callable, Mapping

from dotenv import dotenv_values

from bifusion_gait.errors import ConfigurationError
from bifusion_gait.fusion import BiFusionConfig
from bifusion_gait.msgg import PYRAMIDS, MsggConfig
from bifusion_gait.sampling import BatchSpec
from bifusion_gait.silhouette import SilhouetteEncoderConfig
from bifusion_gait.skeleton_graph import STRATEGIES

LOGGER = logging.getLogger("bifusion_gait.config")


class ConfigError(ConfigurationError):
    """Configuration loading error with user-facing message text."""


def _parse_int(key: str, raw: str) -> int:
    try:
        return int(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"Configuration error: {key} must be an integer, got {raw!r}.") from exc


def _parse_float(key: str, raw: str) -> float:
    try:
        return float(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"Configuration error: {key} must be a valid float, got {raw!r}.") from exc


def _parse_bool(key: str, raw: str) -> bool:
    normalized = raw.strip().lower()
    if normalized in {"1", "true", "yes", "on"}:
        return True
    if normalized in {"0", "false", "no", "off"}:
        return False
    raise ConfigError(f"Configuration error: {key} must be a boolean value (true/false), got {raw!r}.")


def _parse_int_tuple(key: str, raw: str) -> tuple[int, ...]:
    parts = [part for part in raw.replace(" ", "").split(",") if part]
    return tuple(_parse_int(key, part) for part in parts)


def _parse_float_tuple(key: str, raw: str) -> tuple[float, ...]:
    parts = [part for part in raw.replace(" ", "").split(",") if part]
    return tuple(_parse_float(key, part) for part in parts)


def _choice(*allowed: str) -> Callable[[str, str], str]:
    def parse(key: str, raw: str) -> str:
        value = raw.strip()
        if value not in allowed:
            raise ConfigError(f"Configuration error: {key} must be one of {', '.join(allowed)}, got {raw!r}.")
        return value

    return parse


@dataclass(frozen=True)
class ConfigKey:
    name: str
    parse: Callable[[str, str], object]
    description: str


CONFIG_KEYS: dict[str, ConfigKey] = {
    key.name: key
    for key in (
        ConfigKey("preset", _choice("casia_b", "oumvlp"), "hyperparameter preset applied before explicit keys"),
        ConfigKey("seed", _parse_int, "master seed for parameters, sampling and dropout"),
        ConfigKey("channels", _parse_int_tuple, "graph block channels for blocks (1,2), (3,4), (5,6)"),
        ConfigKey("temporal_kernel", _parse_int, "temporal aggregation window (odd)"),
        ConfigKey("strategy", _choice(*STRATEGIES), "neighbour partition strategy"),
        ConfigKey("pyramid", _choice(*PYRAMIDS), "branch structure of the skeleton network"),
        ConfigKey("semp", _parse_bool, "semantic pooling between scales"),
        ConfigKey("self_loops_all_subsets", _parse_bool, "add the identity to every adjacency subset"),
        ConfigKey("num_parts", _parse_int, "horizontal silhouette parts"),
        ConfigKey("silhouette_channels", _parse_int_tuple, "silhouette conv stage channels"),
        ConfigKey("micro_motion_window", _parse_int, "micro-motion temporal window (odd)"),
        ConfigKey("frame_size", _parse_int, "silhouette frame extent in pixels"),
        ConfigKey("compact_dim", _parse_int, "compact block output length"),
        ConfigKey("compact_dropout", _parse_float, "compact block dropout rate"),
        ConfigKey("compact_source", _choice("body", "concat"), "compact block input: bodyparts embedding or all branches"),
        ConfigKey("fused_dim", _parse_int, "fused part feature length"),
        ConfigKey("batch_p", _parse_int, "identities per batch"),
        ConfigKey("batch_k", _parse_int, "sequences per identity"),
        ConfigKey("batch_t", _parse_int, "frames per training window"),
        ConfigKey("margin", _parse_float, "triplet margin"),
        ConfigKey("loss_weights", _parse_float_tuple, "joints, limbs, bodyparts triplet weights"),
        ConfigKey("momentum", _parse_float, "SGD momentum"),
        ConfigKey("weight_decay", _parse_float, "SGD weight decay"),
        ConfigKey("pretrain_lr", _parse_float, "pretraining learning rate"),
        ConfigKey("pretrain_iterations", _parse_int, "pretraining iterations"),
        ConfigKey("pretrain_milestones", _parse_int_tuple, "pretraining decay iterations (x0.1 each)"),
        ConfigKey("global_lr", _parse_float, "learning rate of fusion, compact block and heads"),
        ConfigKey("global_pretrained_lr", _parse_float, "learning rate of the pretrained modules"),
        ConfigKey("global_iterations", _parse_int, "global training iterations"),
        ConfigKey("global_milestones", _parse_int_tuple, "global training decay iterations (x0.1 each)"),
        ConfigKey("sil_tp_target", _choice("fused", "raw"), "features supervised by the silhouette triplet term"),
        ConfigKey("normalize", _parse_bool, "centre and scale keypoints by the torso"),
        ConfigKey("train_ids", _parse_int, "identities 0..n-1 train, the rest are evaluated"),
        ConfigKey("gallery_sequences", _parse_int_tuple, "NM sequence numbers enrolled as gallery"),
        ConfigKey("rank_k", _parse_int, "rank cut-off for retrieval accuracy"),
        ConfigKey("exclude_identical_view", _parse_bool, "skip the gallery view equal to the probe view"),
        ConfigKey("gen_frames", _parse_int, "frames per synthetic sequence"),
        ConfigKey("gen_noise", _parse_float, "synthetic keypoint noise (pixels)"),
        ConfigKey("threads", _parse_int, "worker threads for generation and embedding"),
    )
}

PRESETS: Mapping[str, Mapping[str, str]] = {
    "casia_b": {
        "channels": "16,32,64",
        "compact_dropout": "0.3",
        "compact_dim": "32",
        "fused_dim": "128",
    },
    "oumvlp": {
        "channels": "32,64,128",
        "compact_dropout": "0.65",
        "compact_dim": "32",
        "fused_dim": "256",
        "batch_p": "32",
        "batch_k": "16",
        "batch_t": "18",
    },
}


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings for one command."""

    preset: str = "casia_b"
    seed: int = 0
    channels: tuple[int, ...] = (16, 32, 64)
    temporal_kernel: int = 9
    strategy: str = "gait_temporal"
    pyramid: str = "full"
    semp: bool = True
    self_loops_all_subsets: bool = True
    num_parts: int = 16
    silhouette_channels: tuple[int, ...] = (32, 64, 128)
    micro_motion_window: int = 3
    frame_size: int = 64
    compact_dim: int = 32
    compact_dropout: float = 0.3
    compact_source: str = "body"
    fused_dim: int = 128
    batch_p: int = 4
    batch_k: int = 4
    batch_t: int = 30
    margin: float = 0.2
    loss_weights: tuple[float, ...] = (3.0, 2.0, 1.0)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    pretrain_lr: float = 0.1
    pretrain_iterations: int = 4000
    pretrain_milestones: tuple[int, ...] = (1000, 2000, 3000)
    global_lr: float = 0.1
    global_pretrained_lr: float = 1e-4
    global_iterations: int = 2000
    global_milestones: tuple[int, ...] = (400, 800, 1200, 1600)
    sil_tp_target: str = "fused"
    normalize: bool = True
    train_ids: int = 10
    gallery_sequences: tuple[int, ...] = (1, 2, 3, 4)
    rank_k: int = 1
    exclude_identical_view: bool = True
    gen_frames: int = 40
    gen_noise: float = 0.5
    threads: int = 1

    def __post_init__(self) -> None:
        if len(self.channels) != 3:
            raise ConfigError(f"Configuration error: channels must list three integers, got {self.channels}.")
        if len(self.silhouette_channels) != 3:
            raise ConfigError(
                f"Configuration error: silhouette_channels must list three integers, got {self.silhouette_channels}."
            )
        if len(self.loss_weights) != 3:
            raise ConfigError(f"Configuration error: loss_weights must list three numbers, got {self.loss_weights}.")
        if self.threads < 1:
            raise ConfigError(f"Configuration error: threads must be >= 1, got {self.threads}.")
        if self.rank_k < 1:
            raise ConfigError(f"Configuration error: rank_k must be >= 1, got {self.rank_k}.")
        if self.train_ids < 2:
            raise ConfigError(f"Configuration error: train_ids must be >= 2, got {self.train_ids}.")
        for name in ("pretrain_iterations", "global_iterations"):
            if getattr(self, name) < 0:
                raise ConfigError(f"Configuration error: {name} must be >= 0, got {getattr(self, name)}.")

    def msgg_config(self, num_classes: int) -> MsggConfig:
        return MsggConfig(
            num_classes=num_classes,
            channels=tuple(self.channels),  # type: ignore[arg-type]
            temporal_kernel=self.temporal_kernel,
            strategy=self.strategy,  # type: ignore[arg-type]
            semp_enabled=self.semp,
            pyramid=self.pyramid,  # type: ignore[arg-type]
            self_loops_all_subsets=self.self_loops_all_subsets,
        )

    def silhouette_config(self) -> SilhouetteEncoderConfig:
        return SilhouetteEncoderConfig(
            stage_channels=tuple(self.silhouette_channels),  # type: ignore[arg-type]
            num_parts=self.num_parts,
            window=self.micro_motion_window,
            frame_size=self.frame_size,
        )

    def bifusion_config(self, num_classes: int) -> BiFusionConfig:
        return BiFusionConfig(
            msgg=self.msgg_config(num_classes),
            silhouette=self.silhouette_config(),
            compact_dim=self.compact_dim,
            compact_dropout=self.compact_dropout,
            fused_dim=self.fused_dim,
            compact_source=self.compact_source,  # type: ignore[arg-type]
        )

    def batch_spec(self) -> BatchSpec:
        return BatchSpec(identities=self.batch_p, samples=self.batch_k, frames=self.batch_t)

    def describe(self) -> str:
        """Sorted ``key=value`` lines of every resolved setting."""
        lines = []
        for item in sorted(fields(self), key=lambda f: f.name):
            value = getattr(self, item.name)
            text = ",".join(str(v) for v in value) if isinstance(value, tuple) else str(value).lower() if isinstance(value, bool) else str(value)
            lines.append(f"{item.name}={text}")
        return "\n".join(lines)


def parse_overrides(pairs: list[str] | None) -> dict[str, str]:
    """Turn ``["key=value", ...]`` from ``--set`` flags into a mapping."""
    overrides: dict[str, str] = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"Configuration error: override {pair!r} must look like key=value.")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def load_config(path: str | Path | None = None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    """Resolve defaults, then the preset, then file keys, then overrides."""
    raw: dict[str, str] = {}
    if path is not None:
        source = Path(path).expanduser()
        if not source.is_file():
            raise ConfigError(f"Configuration error: config file not found: {source}.")
        raw.update({key: value or "" for key, value in dotenv_values(source).items()})
    raw.update(overrides or {})

    unknown = sorted(key for key in raw if key not in CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"Configuration error: unknown config keys: {', '.join(unknown)}.")

    preset = str(CONFIG_KEYS["preset"].parse("preset", raw.get("preset", "casia_b")))
    resolved = {**PRESETS[preset], **raw, "preset": preset}
    values = {key: CONFIG_KEYS[key].parse(key, text) for key, text in resolved.items()}
    config = replace(RunConfig(), **values)
    LOGGER.debug("config_resolved source=%s overrides=%d", path or "<defaults>", len(overrides or {}))
    return config


def describe_keys(names: list[str] | tuple[str, ...] | None = None) -> str:
    """Help text block listing config keys and their meaning."""
    selected = names if names is not None else tuple(CONFIG_KEYS)
    return "\n".join(f"  {name:<24} {CONFIG_KEYS[name].description}" for name in selected)
