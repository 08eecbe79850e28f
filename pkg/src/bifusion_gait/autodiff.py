"""Dense float64 tensors with tape-recorded reverse-mode differentiation.

Operations append a ``TapeRecord`` to the tape that is active in the current
context (see ``Tape.__enter__``). Outside any tape nothing is recorded, which
is how inference and finite-difference probing run.
"""

from __future__ import annotations

from contextvars import ContextVar
from dataclasses import dataclass
import logging
from typing import Callable, Iterable, Sequence

import numpy as np

from bifusion_gait.errors import ContractError, TapeConsumedError

LOGGER = logging.getLogger("bifusion_gait.autodiff")

GradRule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class DiffTensor:
    """Row-major float64 value that may take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "name", "_grad")

    def __init__(self, data: object, *, requires_grad: bool = False, name: str = "") -> None:
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._grad: np.ndarray | None = None

    @classmethod
    def from_array(cls, array: np.ndarray, *, requires_grad: bool = False, name: str = "") -> "DiffTensor":
        """Wrap an existing float64 array without copying it."""
        tensor = cls.__new__(cls)
        tensor.data = np.asarray(array, dtype=np.float64)
        tensor.requires_grad = bool(requires_grad)
        tensor.name = name
        tensor._grad = None
        return tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def grad(self) -> np.ndarray | None:
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray | None) -> None:
        if value is None:
            self._grad = None
            return
        array = np.asarray(value, dtype=np.float64)
        if array.shape != self.data.shape:
            raise ContractError(f"grad shape {array.shape} does not match data shape {self.data.shape}.")
        self._grad = array

    def zero_grad(self) -> None:
        if self.requires_grad:
            self._grad = np.zeros_like(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}.")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "DiffTensor":
        return DiffTensor.from_array(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


def as_tensor(value: "DiffTensor | np.ndarray | float | Sequence[float]") -> DiffTensor:
    """Return ``value`` unchanged when it is a tensor, else a constant tensor."""
    if isinstance(value, DiffTensor):
        return value
    return DiffTensor(value)


@dataclass(frozen=True)
class TapeRecord:
    """One recorded operation: its output, its inputs, and how to pull gradients back."""

    op_name: str
    output: DiffTensor
    inputs: tuple[DiffTensor, ...]
    grad_rule: GradRule


_ACTIVE_TAPE: ContextVar["Tape | None"] = ContextVar("bifusion_gait_active_tape", default=None)


class Tape:
    """Ordered log of differentiable operations for a single backward pass."""

    def __init__(self) -> None:
        self._records: list[TapeRecord] = []
        self._consumed = False
        self._tokens: list[object] = []

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise TapeConsumedError("Cannot record on a tape that has already been consumed by backward().")
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc_info: object) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())  # type: ignore[arg-type]

    def __len__(self) -> int:
        return len(self._records)

    @property
    def consumed(self) -> bool:
        return self._consumed

    @property
    def records(self) -> tuple[TapeRecord, ...]:
        return tuple(self._records)

    def record(self, record: TapeRecord) -> None:
        if self._consumed:
            raise TapeConsumedError("Cannot record on a tape that has already been consumed by backward().")
        self._records.append(record)

    def clear(self) -> None:
        """Drop every recorded operation and mark the tape as consumed."""
        self._records.clear()
        self._consumed = True


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def record_op(
    op_name: str,
    output: np.ndarray,
    inputs: Iterable[DiffTensor],
    grad_rule: GradRule,
) -> DiffTensor:
    """Wrap a forward result and record it when a tape is active and any input needs grad."""
    input_tuple = tuple(inputs)
    tape = _ACTIVE_TAPE.get()
    if tape is None or not any(tensor.requires_grad for tensor in input_tuple):
        return DiffTensor.from_array(output)
    result = DiffTensor.from_array(output, requires_grad=True)
    tape.record(TapeRecord(op_name=op_name, output=result, inputs=input_tuple, grad_rule=grad_rule))
    return result


def backward(loss: DiffTensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires-grad leaf.

    Records are replayed in reverse order. Leaves that the loss does not reach
    keep whatever gradient they had (zero after ``zero_grad``).
    """
    if tape.consumed:
        raise TapeConsumedError("backward() was already called on this tape.")
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}.")

    pending: dict[int, np.ndarray] = {}
    owners: dict[int, DiffTensor] = {}
    if loss.requires_grad:
        pending[id(loss)] = np.ones_like(loss.data)
        owners[id(loss)] = loss

    for record in reversed(tape.records):
        upstream = pending.pop(id(record.output), None)
        if upstream is None:
            continue
        input_grads = record.grad_rule(upstream)
        for tensor, grad in zip(record.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            owners[key] = tensor
            if key in pending:
                pending[key] = pending[key] + grad
            else:
                pending[key] = grad

    leaf_count = 0
    for key, grad in pending.items():
        leaf = owners[key]
        if not np.all(np.isfinite(grad)):
            tape.clear()
            raise ContractError(f"non-finite gradient reached leaf {leaf.name or leaf.shape}.")
        leaf.grad = leaf.grad + np.asarray(grad).reshape(leaf.shape)
        leaf_count += 1

    LOGGER.debug("backward records=%d leaves=%d", len(tape), leaf_count)
    tape.clear()
