"""Binary checkpoint container for parameter stores.

Layout: 4-byte magic, u32 format version, u32 manifest length, UTF-8 JSON
manifest ``{"metadata": ..., "entries": [{name, shape, offset, kind}]}``,
then every tensor as little-endian float64 in manifest order.
"""

from __future__ import annotations

from dataclasses import dataclass
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from bifusion_gait.errors import FormatError, LoadError
from bifusion_gait.params import ParameterStore

LOGGER = logging.getLogger("bifusion_gait.checkpoint")

MAGIC_MSGG = b"MSGG"
MAGIC_SILHOUETTE = b"SILP"
MAGIC_BIFUSION = b"BIFU"
KNOWN_MAGICS = (MAGIC_MSGG, MAGIC_SILHOUETTE, MAGIC_BIFUSION)
FORMAT_VERSION = 1
SUPPORTED_FORMAT_VERSIONS = {1}
_PREAMBLE_BYTES = 12


@dataclass(frozen=True)
class Checkpoint:
    magic: bytes
    version: int
    metadata: Mapping[str, Any]
    parameters: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]

    def arrays(self) -> dict[str, np.ndarray]:
        return {**self.parameters, **self.buffers}


def _serialize_store(store: ParameterStore, metadata: Mapping[str, Any]) -> tuple[bytes, bytes]:
    entries: list[dict[str, object]] = []
    blobs: list[bytes] = []
    offset = 0
    tensors = [(name, tensor.data, "parameter") for name, tensor in store.named_parameters()]
    tensors += [(name, values, "buffer") for name, values in store.named_buffers()]
    for name, values, kind in tensors:
        blob = np.ascontiguousarray(values, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(values.shape), "offset": offset, "kind": kind})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"metadata": dict(metadata), "entries": entries}, sort_keys=True, separators=(",", ":"))
    return manifest.encode("utf-8"), b"".join(blobs)


def save_checkpoint(path: str | Path, store: ParameterStore, magic: bytes, metadata: Mapping[str, Any] | None = None) -> Path:
    """Write every parameter and buffer of ``store``; returns the written path."""
    if magic not in KNOWN_MAGICS:
        raise FormatError(f"unknown checkpoint magic {magic!r}.")
    target = Path(path).expanduser()
    target.parent.mkdir(parents=True, exist_ok=True)
    manifest, payload = _serialize_store(store, metadata or {})
    preamble = magic + np.asarray([FORMAT_VERSION, len(manifest)], dtype="<u4").tobytes()
    target.write_bytes(preamble + manifest + payload)
    LOGGER.info("checkpoint_saved path=%s magic=%s tensors=%d bytes=%d", target, magic.decode(), len(store), target.stat().st_size)
    return target


def load_checkpoint(path: str | Path, magic: bytes | None = None) -> Checkpoint:
    """Parse a checkpoint file, validating magic, version and blob extents."""
    source = Path(path).expanduser()
    if not source.is_file():
        raise LoadError(f"checkpoint not found: {source}")
    blob = source.read_bytes()
    if len(blob) < _PREAMBLE_BYTES:
        raise FormatError(f"{source} is too short to be a checkpoint.")
    found = blob[:4]
    if found not in KNOWN_MAGICS:
        raise FormatError(f"{source} has unknown magic {found!r}.")
    if magic is not None and found != magic:
        raise LoadError(f"{source} holds a {found.decode()} checkpoint, expected {magic.decode()}.")
    version, manifest_length = (int(v) for v in np.frombuffer(blob, dtype="<u4", count=2, offset=4))
    if version not in SUPPORTED_FORMAT_VERSIONS:
        supported = ", ".join(str(v) for v in sorted(SUPPORTED_FORMAT_VERSIONS))
        raise LoadError(f"Unsupported checkpoint version={version}; supported versions: {supported}")
    try:
        manifest = json.loads(blob[_PREAMBLE_BYTES : _PREAMBLE_BYTES + manifest_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source} has an unreadable manifest: {exc}") from exc
    payload = memoryview(blob)[_PREAMBLE_BYTES + manifest_length :]

    parameters: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    for entry in manifest.get("entries", []):
        shape = tuple(int(extent) for extent in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        offset = int(entry["offset"])
        if offset + 8 * count > len(payload):
            raise FormatError(f"{source}: entry {entry['name']!r} runs past the end of the file.")
        values = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        (buffers if entry.get("kind") == "buffer" else parameters)[str(entry["name"])] = values
    return Checkpoint(
        magic=found,
        version=version,
        metadata=manifest.get("metadata", {}),
        parameters=parameters,
        buffers=buffers,
    )


def restore_store(store: ParameterStore, checkpoint: Checkpoint, prefix: str = "") -> int:
    """Copy checkpoint tensors into ``store``; every ``prefix`` entry of the store must be present."""
    arrays = checkpoint.arrays()
    expected = [name for name, _ in store.named_parameters() if name.startswith(prefix)]
    expected += [name for name, _ in store.named_buffers() if name.startswith(prefix)]
    missing = [name for name in expected if name not in arrays]
    if missing:
        raise LoadError(f"checkpoint lacks {len(missing)} model entries, first {missing[0]!r}.")
    restored = 0
    for name, values in arrays.items():
        if name.startswith(prefix):
            store.assign(name, values)
            restored += 1
    LOGGER.info("checkpoint_restored magic=%s prefix=%s tensors=%d", checkpoint.magic.decode(), prefix or "*", restored)
    return restored


def checkpoint_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
