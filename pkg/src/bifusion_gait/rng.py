"""Seeded, stream-addressable random number source."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from bifusion_gait.errors import ConfigurationError

_U64_MAX = 2**64 - 1


def _check_u64(name: str, value: int) -> int:
    as_int = int(value)
    if as_int < 0 or as_int > _U64_MAX:
        raise ConfigurationError(f"{name} must fit in an unsigned 64-bit integer, got {value!r}.")
    return as_int


class Rng:
    """PCG64 generator keyed by ``(seed, stream)``.

    PCG64 and ``SeedSequence`` are specified bit-for-bit by numpy, so a given
    pair yields the same draws on every platform.
    """

    def __init__(self, seed: int, stream: int = 0) -> None:
        self.seed = _check_u64("seed", seed)
        self.stream = _check_u64("stream", stream)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        self._generator = np.random.Generator(np.random.PCG64(sequence))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def spawn(self, stream: int) -> "Rng":
        """Return an independent generator on another stream of the same seed."""
        return Rng(self.seed, stream)

    def uniform(self, low: float = 0.0, high: float = 1.0, size: int | Sequence[int] | None = None) -> np.ndarray:
        return self._generator.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size: int | Sequence[int] | None = None) -> np.ndarray:
        return self._generator.normal(loc, scale, size)

    def integers(self, low: int, high: int, size: int | Sequence[int] | None = None) -> np.ndarray:
        return self._generator.integers(low, high, size=size)

    def choice(self, population: int, size: int, *, replace: bool) -> np.ndarray:
        return self._generator.choice(population, size=size, replace=replace)

    def permutation(self, count: int) -> np.ndarray:
        return self._generator.permutation(count)


def derive_seed(*parts: int) -> int:
    """Fold several integers into one 64-bit seed, independent of call order elsewhere."""
    state = np.random.SeedSequence([_check_u64("seed part", part) for part in parts]).generate_state(
        1, dtype=np.uint64
    )
    return int(state[0])
