"""SGD with momentum, per-group learning rates and a multi-step decay schedule."""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass
import logging
from typing import Mapping, Sequence

import numpy as np

from bifusion_gait.errors import ConfigurationError
from bifusion_gait.params import ParameterStore

LOGGER = logging.getLogger("bifusion_gait.optim")

MOMENTUM = 0.9
WEIGHT_DECAY = 5e-4
DECAY_FACTOR = 0.1


def sgd_step(
    param: np.ndarray,
    grad: np.ndarray,
    velocity: np.ndarray,
    *,
    lr: float,
    momentum: float = MOMENTUM,
    weight_decay: float = WEIGHT_DECAY,
    decay: bool = True,
) -> None:
    """In place: ``v = m*v + g + wd*p``; ``p -= lr*v``. ``decay=False`` drops the wd term."""
    velocity *= momentum
    velocity += grad
    if decay and weight_decay:
        velocity += weight_decay * param
    param -= lr * velocity


@dataclass(frozen=True)
class MultiStepSchedule:
    """Learning rate multiplied by ``gamma`` at each milestone iteration."""

    base_lr: float
    milestones: tuple[int, ...] = ()
    gamma: float = DECAY_FACTOR

    def __post_init__(self) -> None:
        if self.base_lr < 0:
            raise ConfigurationError(f"learning rate must be >= 0, got {self.base_lr}.")
        if list(self.milestones) != sorted(set(self.milestones)) or any(m < 1 for m in self.milestones):
            raise ConfigurationError(f"milestones must be strictly increasing positive iterations, got {self.milestones}.")

    def lr_at(self, iteration: int) -> float:
        return self.base_lr * self.gamma ** bisect_right(self.milestones, iteration)


class SGD:
    """Momentum SGD over every parameter of a store, grouped by ``ParameterMeta.group``."""

    def __init__(
        self,
        store: ParameterStore,
        schedules: Mapping[str, MultiStepSchedule],
        *,
        momentum: float = MOMENTUM,
        weight_decay: float = WEIGHT_DECAY,
    ) -> None:
        missing = [group for group in store.groups() if group not in schedules]
        if missing:
            raise ConfigurationError(f"no learning-rate schedule for parameter groups {missing}.")
        self.store = store
        self.schedules = dict(schedules)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.iteration = 0
        self._velocity = {name: np.zeros_like(tensor.data) for name, tensor in store.named_parameters()}

    def current_lrs(self) -> dict[str, float]:
        return {group: schedule.lr_at(self.iteration) for group, schedule in self.schedules.items()}

    def step(self) -> dict[str, float]:
        """Apply one update in store order and advance the schedule; returns the rates used."""
        lrs = self.current_lrs()
        for name, tensor in self.store.named_parameters():
            meta = self.store.meta(name)
            grad = tensor.grad
            sgd_step(
                tensor.data,
                grad if grad is not None else np.zeros_like(tensor.data),
                self._velocity[name],
                lr=lrs[meta.group],
                momentum=self.momentum,
                weight_decay=self.weight_decay,
                decay=meta.decay,
            )
        self.iteration += 1
        return lrs

    def velocity(self, name: str) -> np.ndarray:
        return self._velocity[name]


def group_schedules(groups: Sequence[str], base_lrs: Mapping[str, float], milestones: Sequence[int]) -> dict[str, MultiStepSchedule]:
    return {group: MultiStepSchedule(base_lrs[group], tuple(milestones)) for group in groups}
