"""Named parameter and buffer storage shared by every network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Literal, Sequence

import numpy as np

from bifusion_gait.autodiff import DiffTensor
from bifusion_gait.errors import ConfigurationError, LoadError
from bifusion_gait.kernels import BN_MOMENTUM, BatchNormStats
from bifusion_gait.rng import Rng

Init = Literal["uniform", "zeros", "ones", "center_one_hot"]


@dataclass(frozen=True)
class ParameterMeta:
    """Optimizer-facing facts about one parameter."""

    name: str
    group: str
    decay: bool


class ParameterStore:
    """Ordered collection of trainable tensors and non-trainable buffers.

    Initial values are drawn from ``Rng(seed, stream=k)`` for the k-th created
    parameter, so a model built twice with one seed is bit-identical.
    """

    def __init__(self, seed: int = 0) -> None:
        self.seed = int(seed)
        self._params: dict[str, DiffTensor] = {}
        self._meta: dict[str, ParameterMeta] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._params or name in self._buffers

    def __len__(self) -> int:
        return len(self._params)

    def create(
        self,
        name: str,
        shape: Sequence[int],
        *,
        init: Init = "uniform",
        fan_in: int | None = None,
        decay: bool = True,
        group: str = "default",
    ) -> DiffTensor:
        if name in self._params:
            raise ConfigurationError(f"parameter {name!r} already exists.")
        extents = tuple(int(extent) for extent in shape)
        if init == "uniform":
            bound = 1.0 / np.sqrt(float(fan_in if fan_in else extents[0]))
            values = Rng(self.seed, stream=len(self._params)).uniform(-bound, bound, extents)
        elif init == "zeros":
            values = np.zeros(extents)
        elif init == "ones":
            values = np.ones(extents)
        elif init == "center_one_hot":
            values = np.zeros(extents)
            values[extents[0] // 2, ...] = 1.0
        else:
            raise ConfigurationError(f"unknown initializer {init!r}.")
        tensor = DiffTensor.from_array(np.asarray(values, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = tensor
        self._meta[name] = ParameterMeta(name=name, group=group, decay=decay)
        return tensor

    def parameter(self, name: str) -> DiffTensor:
        try:
            return self._params[name]
        except KeyError as exc:
            raise ConfigurationError(f"unknown parameter {name!r}.") from exc

    def meta(self, name: str) -> ParameterMeta:
        return self._meta[name]

    def register_buffer(self, name: str, values: np.ndarray) -> np.ndarray:
        if name in self._buffers:
            raise ConfigurationError(f"buffer {name!r} already exists.")
        array = np.array(values, dtype=np.float64)
        self._buffers[name] = array
        return array

    def buffer(self, name: str) -> np.ndarray:
        try:
            return self._buffers[name]
        except KeyError as exc:
            raise ConfigurationError(f"unknown buffer {name!r}.") from exc

    def batch_norm(self, prefix: str, features: int, *, group: str = "default") -> tuple[DiffTensor, DiffTensor, BatchNormStats]:
        """Create gamma/beta (exempt from weight decay) plus running-stat buffers."""
        gamma = self.create(f"{prefix}.gamma", (features,), init="ones", decay=False, group=group)
        beta = self.create(f"{prefix}.beta", (features,), init="zeros", decay=False, group=group)
        stats = BatchNormStats(
            running_mean=self.register_buffer(f"{prefix}.running_mean", np.zeros(features)),
            running_var=self.register_buffer(f"{prefix}.running_var", np.ones(features)),
            momentum=BN_MOMENTUM,
        )
        return gamma, beta, stats

    def named_parameters(self) -> Iterator[tuple[str, DiffTensor]]:
        yield from self._params.items()

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        yield from self._buffers.items()

    def set_group(self, prefix: str, group: str) -> int:
        """Move every parameter whose name starts with ``prefix`` into ``group``."""
        moved = 0
        for name, meta in list(self._meta.items()):
            if name.startswith(prefix):
                self._meta[name] = ParameterMeta(name=name, group=group, decay=meta.decay)
                moved += 1
        return moved

    def groups(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for meta in self._meta.values():
            seen.setdefault(meta.group, None)
        return tuple(seen)

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.zero_grad()

    def assign(self, name: str, values: np.ndarray) -> None:
        """Overwrite a parameter or buffer in place, keeping its shape."""
        target = self._params[name].data if name in self._params else self._buffers.get(name)
        if target is None:
            raise LoadError(f"checkpoint entry {name!r} has no counterpart in the model.")
        incoming = np.asarray(values, dtype=np.float64)
        if incoming.shape != target.shape:
            raise LoadError(f"shape mismatch for {name!r}: model {target.shape}, checkpoint {incoming.shape}.")
        target[...] = incoming
