"""Model construction from a ``RunConfig`` and checkpoint-backed loading."""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
from pathlib import Path
from typing import Any, Literal, Mapping

from bifusion_gait.checkpoint import (
    MAGIC_BIFUSION,
    MAGIC_MSGG,
    MAGIC_SILHOUETTE,
    load_checkpoint,
    restore_store,
    save_checkpoint,
)
from bifusion_gait.config import RunConfig
from bifusion_gait.errors import LoadError
from bifusion_gait.fusion import BiFusionNetwork
from bifusion_gait.msgg import MsggNetwork
from bifusion_gait.params import ParameterStore
from bifusion_gait.silhouette import SilhouetteEncoder

LOGGER = logging.getLogger("bifusion_gait.pipeline")

ModelKind = Literal["msgg", "silhouette", "bifusion"]
MAGIC_BY_KIND: Mapping[ModelKind, bytes] = {
    "msgg": MAGIC_MSGG,
    "silhouette": MAGIC_SILHOUETTE,
    "bifusion": MAGIC_BIFUSION,
}
KIND_BY_MAGIC: Mapping[bytes, ModelKind] = {magic: kind for kind, magic in MAGIC_BY_KIND.items()}

# Settings that change what a network computes; shapes alone do not pin them down.
MSGG_STRUCTURE = ("channels", "temporal_kernel", "strategy", "semp", "pyramid", "self_loops_all_subsets")
SILHOUETTE_STRUCTURE = ("silhouette_channels", "num_parts", "micro_motion_window", "frame_size")
STRUCTURE_BY_KIND: Mapping[ModelKind, tuple[str, ...]] = {
    "msgg": MSGG_STRUCTURE,
    "silhouette": SILHOUETTE_STRUCTURE,
    "bifusion": MSGG_STRUCTURE + SILHOUETTE_STRUCTURE + ("compact_dim", "fused_dim", "compact_source"),
}


@dataclass
class ModelBundle:
    """A parameter store and the network(s) built on it."""

    kind: ModelKind
    store: ParameterStore
    num_classes: int = 0
    msgg: MsggNetwork | None = None
    silhouette: SilhouetteEncoder | None = None
    bifusion: BiFusionNetwork | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def magic(self) -> bytes:
        return MAGIC_BY_KIND[self.kind]


def build_model(kind: ModelKind, config: RunConfig, num_classes: int) -> ModelBundle:
    store = ParameterStore(config.seed)
    if kind == "msgg":
        return ModelBundle(kind, store, num_classes, msgg=MsggNetwork(config.msgg_config(num_classes), store))
    if kind == "silhouette":
        return ModelBundle(kind, store, num_classes, silhouette=SilhouetteEncoder(config.silhouette_config(), store))
    network = BiFusionNetwork(config.bifusion_config(num_classes), store)
    return ModelBundle(
        kind, store, num_classes, msgg=network.msgg, silhouette=network.silhouette, bifusion=network
    )


def _described(text: str) -> dict[str, str]:
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


def check_structure(path: str | Path, metadata: Mapping[str, Any], config: RunConfig, kind: ModelKind) -> None:
    """Raise ``LoadError`` when ``config`` would rebuild a different network than the one saved."""
    recorded = metadata.get("config")
    if not isinstance(recorded, str):
        raise LoadError(f"{path} does not record the configuration it was trained with.")
    saved, current = _described(recorded), _described(config.describe())
    for key in STRUCTURE_BY_KIND[kind]:
        if saved.get(key) != current.get(key):
            raise LoadError(f"{path} was trained with {key}={saved.get(key)}, the current config has {key}={current.get(key)}.")


def save_model(path: str | Path, bundle: ModelBundle, config: RunConfig, extra: Mapping[str, Any] | None = None) -> Path:
    metadata = {"kind": bundle.kind, "num_classes": bundle.num_classes, "config": config.describe(), **(extra or {})}
    return save_checkpoint(path, bundle.store, bundle.magic, metadata)


def load_model(path: str | Path, config: RunConfig, expected: ModelKind | None = None) -> ModelBundle:
    """Rebuild the network recorded in ``path`` under ``config`` and restore its tensors."""
    checkpoint = load_checkpoint(path, MAGIC_BY_KIND[expected] if expected else None)
    kind = KIND_BY_MAGIC[checkpoint.magic]
    num_classes = int(checkpoint.metadata.get("num_classes", 0))
    if kind != "silhouette" and num_classes < 1:
        raise LoadError(f"{path} does not record the classifier size.")
    check_structure(path, checkpoint.metadata, config, kind)
    bundle = build_model(kind, config, max(num_classes, 1))
    restore_store(bundle.store, checkpoint)
    bundle.metadata = dict(checkpoint.metadata)
    LOGGER.info("model_loaded path=%s kind=%s classes=%d", path, kind, num_classes)
    return bundle


def initialize_from_pretrained(
    bundle: ModelBundle,
    msgg_path: str | Path,
    silhouette_path: str | Path,
    config: RunConfig | None = None,
) -> None:
    """Copy pretrained skeleton and silhouette weights into a fresh BiFusion bundle.

    With ``config``, both checkpoints must have been trained with the same
    module structure.
    """
    if bundle.kind != "bifusion":
        raise LoadError("pretrained initialization needs a bifusion model.")
    msgg = load_checkpoint(msgg_path, MAGIC_MSGG)
    silhouette = load_checkpoint(silhouette_path, MAGIC_SILHOUETTE)
    if config is not None:
        check_structure(msgg_path, msgg.metadata, config, "msgg")
        check_structure(silhouette_path, silhouette.metadata, config, "silhouette")
    restore_store(bundle.store, msgg, prefix="msgg.")
    restore_store(bundle.store, silhouette, prefix="sil.")
