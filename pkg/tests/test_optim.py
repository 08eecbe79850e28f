"""Momentum SGD and the multi-step learning-rate schedule."""

from __future__ import annotations

import numpy as np
import pytest

from bifusion_gait.errors import ConfigurationError
from bifusion_gait.optim import SGD, MultiStepSchedule, group_schedules, sgd_step
from bifusion_gait.params import ParameterStore


def test_sgd_step_applies_momentum_and_weight_decay() -> None:
    param = np.array([1.0, -2.0])
    velocity = np.array([0.5, 0.5])
    grad = np.array([0.1, 0.2])

    sgd_step(param, grad, velocity, lr=0.1, momentum=0.9, weight_decay=5e-4)

    expected_velocity = 0.9 * np.array([0.5, 0.5]) + grad + 5e-4 * np.array([1.0, -2.0])
    np.testing.assert_allclose(velocity, expected_velocity)
    np.testing.assert_allclose(param, np.array([1.0, -2.0]) - 0.1 * expected_velocity)


def test_sgd_step_without_decay_ignores_the_parameter_value() -> None:
    param = np.array([100.0])
    velocity = np.zeros(1)

    sgd_step(param, np.array([1.0]), velocity, lr=0.5, decay=False)

    assert velocity[0] == 1.0
    assert param[0] == 99.5


@pytest.mark.parametrize(
    ("iteration", "expected"),
    [(0, 0.1), (999, 0.1), (1000, 0.01), (1999, 0.01), (2000, 0.001)],
)
def test_schedule_decays_by_ten_at_each_milestone(iteration: int, expected: float) -> None:
    schedule = MultiStepSchedule(0.1, (1000, 2000))

    assert schedule.lr_at(iteration) == pytest.approx(expected)


@pytest.mark.parametrize("milestones", [(10, 5), (5, 5), (0,)])
def test_schedule_rejects_unordered_or_zero_milestones(milestones: tuple[int, ...]) -> None:
    with pytest.raises(ConfigurationError, match="milestones"):
        MultiStepSchedule(0.1, milestones)


def test_optimizer_requires_a_schedule_for_every_group() -> None:
    store = ParameterStore(seed=0)
    store.create("a.weight", (2, 2))
    store.create("b.weight", (2, 2), group="head")

    with pytest.raises(ConfigurationError, match="head"):
        SGD(store, {"default": MultiStepSchedule(0.1)})


def test_optimizer_uses_per_group_rates_and_skips_decay_flags() -> None:
    store = ParameterStore(seed=0)
    slow = store.create("slow.weight", (3,), init="ones", group="pretrained")
    fast = store.create("fast.gamma", (3,), init="ones", decay=False, group="head")
    slow.grad = np.ones(3)
    fast.grad = np.ones(3)
    optimizer = SGD(store, group_schedules(("pretrained", "head"), {"pretrained": 0.01, "head": 0.1}, (1,)), weight_decay=0.5)

    lrs = optimizer.step()

    assert lrs == {"pretrained": pytest.approx(0.01), "head": pytest.approx(0.1)}
    np.testing.assert_allclose(slow.data, 1.0 - 0.01 * 1.5)
    np.testing.assert_allclose(fast.data, 1.0 - 0.1 * 1.0)
    assert optimizer.current_lrs()["head"] == pytest.approx(0.01)


def test_untouched_gradients_only_move_decayed_parameters() -> None:
    store = ParameterStore(seed=0)
    weight = store.create("w", (2,), init="ones")
    optimizer = SGD(store, {"default": MultiStepSchedule(1.0)}, momentum=0.0, weight_decay=0.1)

    optimizer.step()

    np.testing.assert_allclose(weight.data, 0.9)
