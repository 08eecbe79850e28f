"""Forward behavior and error contracts of the tensor kernels."""

from __future__ import annotations

import numpy as np
import pytest

from bifusion_gait.autodiff import DiffTensor, Tape, backward
from bifusion_gait.errors import BatchSizeError, ConfigurationError, DimensionError, LabelIndexError
from bifusion_gait.kernels import (
    BatchNormStats,
    absolute,
    add,
    batch_norm,
    conv1d_time,
    conv2d,
    conv_output_extent,
    dropout,
    matmul,
    pool,
    softmax_cross_entropy,
    total,
)
from bifusion_gait.rng import Rng


def _tensor(values, grad: bool = False) -> DiffTensor:
    return DiffTensor(np.asarray(values, dtype=np.float64), requires_grad=grad)


def test_matmul_with_identity_is_bitwise_exact() -> None:
    x = Rng(3).normal(size=(4, 3))

    out = matmul(_tensor(np.eye(4)), _tensor(x))

    assert np.array_equal(out.data, x)


def test_matmul_rejects_mismatched_inner_extents() -> None:
    with pytest.raises(DimensionError, match="inner"):
        matmul(_tensor(np.ones((2, 3))), _tensor(np.ones((2, 3))))


def test_add_broadcast_gradient_sums_over_expanded_axes() -> None:
    a = _tensor(np.ones((3, 4)), grad=True)
    b = _tensor(np.ones(4), grad=True)
    with Tape() as tape:
        loss = total(add(a, b))
    backward(loss, tape)

    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_conv2d_with_center_one_hot_kernel_is_identity() -> None:
    x = Rng(1).normal(size=(1, 5, 5))
    kernel = np.zeros((1, 1, 3, 3))
    kernel[0, 0, 1, 1] = 1.0

    out = conv2d(_tensor(x), _tensor(kernel), stride=1, pad=1)

    np.testing.assert_array_equal(out.data, x)


def test_conv2d_reports_non_integral_output_extent() -> None:
    with pytest.raises(DimensionError, match="not integral"):
        conv2d(_tensor(np.ones((1, 4, 4))), _tensor(np.ones((1, 1, 3, 3))), stride=2, pad=0)


@pytest.mark.parametrize(
    ("extent", "kernel", "stride", "pad", "expected"),
    [(64, 3, 1, 1, 64), (5, 3, 2, 0, 2), (3, 3, 2, 1, 2)],
)
def test_conv_output_extent(extent: int, kernel: int, stride: int, pad: int, expected: int) -> None:
    assert conv_output_extent(extent, kernel, stride, pad) == expected


def test_conv1d_time_center_one_hot_is_identity() -> None:
    x = Rng(2).normal(size=(7, 4))
    weights = np.zeros((5, 4))
    weights[2] = 1.0

    out = conv1d_time(_tensor(x), _tensor(weights))

    np.testing.assert_array_equal(out.data, x)


def test_conv1d_time_zero_pads_the_sequence_ends() -> None:
    x = np.arange(1.0, 5.0).reshape(4, 1)

    out = conv1d_time(_tensor(x), _tensor(np.ones((3, 1))))

    np.testing.assert_array_equal(out.data[:, 0], [3.0, 6.0, 9.0, 7.0])


def test_conv1d_time_rejects_even_kernels() -> None:
    with pytest.raises(ConfigurationError, match="odd"):
        conv1d_time(_tensor(np.ones((4, 2))), _tensor(np.ones((2, 2))))


def test_batch_norm_train_normalizes_and_moves_running_stats() -> None:
    x = Rng(4).normal(loc=3.0, scale=2.0, size=(16, 3))
    stats = BatchNormStats.fresh(3)

    out = batch_norm(_tensor(x), _tensor(np.ones(3)), _tensor(np.zeros(3)), "train", stats=stats)

    np.testing.assert_allclose(out.data.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.data.var(axis=0), 1.0, rtol=1e-4)
    np.testing.assert_allclose(stats.running_mean, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(stats.running_var, 0.9 + 0.1 * x.var(axis=0))


def test_batch_norm_eval_uses_running_stats() -> None:
    stats = BatchNormStats(running_mean=np.array([1.0]), running_var=np.array([4.0]))

    out = batch_norm(_tensor([[5.0]]), _tensor([1.0]), _tensor([0.0]), "eval", stats=stats)

    np.testing.assert_allclose(out.data, [[4.0 / np.sqrt(4.0 + 1e-5)]])


def test_batch_norm_train_rejects_single_row() -> None:
    with pytest.raises(BatchSizeError):
        batch_norm(_tensor([[1.0, 2.0]]), _tensor(np.ones(2)), _tensor(np.zeros(2)), "train")


def test_dropout_is_identity_in_eval_mode() -> None:
    x = _tensor(np.ones((3, 3)))

    assert dropout(x, 0.5, "eval") is x


def test_dropout_train_scales_survivors() -> None:
    out = dropout(_tensor(np.ones((50, 50))), 0.3, "train", Rng(0))

    survivors = out.data[out.data > 0]
    np.testing.assert_allclose(survivors, 1.0 / 0.7)
    assert 0.6 < survivors.size / out.data.size < 0.8


def test_dropout_train_keeps_the_expectation() -> None:
    out = dropout(_tensor(np.ones(100_000)), 0.5, "train", Rng(1))

    assert set(np.unique(out.data)) <= {0.0, 2.0}
    assert abs(out.data.mean() - 1.0) < 0.01


def test_dropout_train_without_rng_is_a_configuration_error() -> None:
    with pytest.raises(ConfigurationError):
        dropout(_tensor(np.ones(3)), 0.3, "train")


def test_mean_pool_matches_sum_over_count() -> None:
    x = Rng(5).normal(size=(3, 7, 2))

    out = pool(_tensor(x), 1, "mean")

    np.testing.assert_allclose(out.data, x.sum(axis=1) / 7, rtol=1e-12)


def test_max_pool_sends_gradient_to_first_maximum() -> None:
    x = _tensor([[2.0, 5.0, 5.0]], grad=True)
    with Tape() as tape:
        loss = total(pool(x, 1, "max"))
    backward(loss, tape)

    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_pool_over_empty_axis_is_rejected() -> None:
    with pytest.raises(DimensionError):
        pool(_tensor(np.zeros((2, 0))), 1, "mean")


def test_softmax_cross_entropy_of_uniform_logits_is_log_classes() -> None:
    out = softmax_cross_entropy(_tensor(np.zeros((2, 4))), [1, 3])

    assert out.item() == pytest.approx(np.log(4.0))


def test_softmax_cross_entropy_is_stable_for_large_logits() -> None:
    out = softmax_cross_entropy(_tensor([[1000.0, 0.0]]), [0])

    assert np.isfinite(out.item())
    assert out.item() == pytest.approx(0.0, abs=1e-12)


def test_softmax_cross_entropy_of_a_single_row() -> None:
    out = softmax_cross_entropy(_tensor([[1.0, 2.0, 3.0]]), [2])

    np.testing.assert_allclose(out.data, 0.407606, atol=1e-6)


def test_softmax_cross_entropy_rejects_an_empty_batch() -> None:
    with pytest.raises(DimensionError, match="at least one logit row"):
        softmax_cross_entropy(_tensor(np.zeros((0, 3))), [])


def test_softmax_cross_entropy_rejects_out_of_range_labels() -> None:
    with pytest.raises(LabelIndexError):
        softmax_cross_entropy(_tensor(np.zeros((2, 3))), [0, 3])


def test_absolute_routes_the_sign_into_the_gradient() -> None:
    x = _tensor([-2.0, 0.0, 3.0], grad=True)
    with Tape() as tape:
        loss = total(absolute(x))
    backward(loss, tape)

    assert float(loss.data) == 5.0
    np.testing.assert_array_equal(x.grad, [-1.0, 0.0, 1.0])
