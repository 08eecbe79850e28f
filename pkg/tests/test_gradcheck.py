"""Finite-difference checks of every kernel and of miniature network blocks."""

from __future__ import annotations

import numpy as np
import pytest

from bifusion_gait.autodiff import DiffTensor
from bifusion_gait.gradcheck import (
    TOLERANCE,
    grad_check,
    kernel_cases,
    miniature_msgg_case,
    miniature_silhouette_case,
    run_gradient_suite,
)
from bifusion_gait.kernels import linear, total
from bifusion_gait.rng import Rng


@pytest.mark.parametrize("case", kernel_cases(0), ids=lambda case: case[0])
def test_kernel_gradients_match_finite_differences(case) -> None:
    _, closure, inputs = case

    assert grad_check(closure, inputs) <= TOLERANCE


def test_linear_map_gradient_is_exact_up_to_rounding() -> None:
    rng = Rng(7)
    x = DiffTensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = DiffTensor(rng.normal(size=(4, 2)), requires_grad=True)

    error = grad_check(lambda: total(linear(x, w)), [x, w])

    assert error <= 1e-7


def test_grad_check_detects_a_wrong_gradient_rule() -> None:
    from bifusion_gait.autodiff import record_op

    x = DiffTensor(np.array([1.0, 2.0]), requires_grad=True)

    def broken() -> DiffTensor:
        return record_op("broken_square", np.asarray((x.data**2).sum()), (x,), lambda g: (g * x.data,))

    assert grad_check(broken, [x]) > 0.1


def test_miniature_msgg_blocks_pass() -> None:
    _, closure, inputs = miniature_msgg_case(0)

    assert grad_check(closure, inputs, max_elements=8, rng=Rng(1)) <= TOLERANCE


def test_miniature_silhouette_encoder_passes() -> None:
    _, closure, inputs = miniature_silhouette_case(0)

    assert grad_check(closure, inputs) <= TOLERANCE


def test_gradient_suite_report_ends_with_max_error_line() -> None:
    report = run_gradient_suite(0, include_blocks=False)

    lines = report.lines()
    assert report.passed is True
    assert lines[-1].startswith("max_error=")
    assert {"conv2d", "batch_norm_train", "micro_motion", "batch_all_triplet"} <= {row.name for row in report.rows}
