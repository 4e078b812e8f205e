"""Tests for the primitive ops and the gradient tape."""

from __future__ import annotations

import sys
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from glyphnet.errors import DimensionError, GlyphNetError, NumericalError  # noqa: E402
from glyphnet.gradcheck import check_gradients  # noqa: E402
from glyphnet.tensor import (  # noqa: E402
    GradTape,
    Tensor,
    add_bias,
    concat_channels,
    conv2d,
    elementwise_add,
    matmul,
    multiply,
    pool2d,
    reduce_mean,
    reduce_sum,
    reshape,
    slice_channels,
    softmax,
)

pytestmark = pytest.mark.usefixtures("float64")


def _conv_oracle(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, padding: str
) -> np.ndarray:
    batch, channels, height, width = x.shape
    out_channels, _, k, _ = w.shape
    if padding == "same":
        out_h, out_w = -(-height // stride), -(-width // stride)
        top = max((out_h - 1) * stride + k - height, 0) // 2
        left = max((out_w - 1) * stride + k - width, 0) // 2
    else:
        out_h, out_w = (height - k) // stride + 1, (width - k) // stride + 1
        top = left = 0
    out = np.zeros((batch, out_channels, out_h, out_w))
    for n in range(batch):
        for o in range(out_channels):
            for i in range(out_h):
                for j in range(out_w):
                    acc = b[o]
                    for c in range(channels):
                        for u in range(k):
                            for v in range(k):
                                r = i * stride + u - top
                                s = j * stride + v - left
                                if 0 <= r < height and 0 <= s < width:
                                    acc += x[n, c, r, s] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def _pool_oracle(x: np.ndarray, kind: str, size: int, stride: int) -> np.ndarray:
    batch, channels, height, width = x.shape
    out_h, out_w = (height - size) // stride + 1, (width - size) // stride + 1
    out = np.zeros((batch, channels, out_h, out_w))
    for n in range(batch):
        for c in range(channels):
            for i in range(out_h):
                for j in range(out_w):
                    window = x[n, c, i * stride : i * stride + size, j * stride : j * stride + size]
                    out[n, c, i, j] = window.max() if kind == "max" else window.sum() / (size * size)
    return out


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return reduce_sum(multiply(out, Tensor(weights)))


def test_conv2d_matches_loop_oracle_bit_exactly() -> None:
    """Real inputs match the bias-first, channel-row-column loop bit for bit."""

    rng = np.random.default_rng(0)
    for _ in range(100):
        height, width = rng.integers(1, 9, size=2)
        padding = str(rng.choice(["same", "valid"]))
        k_max = 3 if padding == "same" else min(3, height, width)
        k = int(rng.integers(1, k_max + 1))
        stride = int(rng.integers(1, 3))
        batch, channels, filters = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        x = rng.uniform(-1.0, 1.0, size=(batch, channels, height, width))
        w = rng.uniform(-1.0, 1.0, size=(filters, channels, k, k))
        b = rng.uniform(-1.0, 1.0, size=(filters,))

        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)

        np.testing.assert_array_equal(out.data, _conv_oracle(x, w, b, stride, padding))


def test_same_padding_output_extent_is_ceil_of_size_over_stride() -> None:
    """``same`` keeps ceil(H / s) rows and columns."""

    x = Tensor(np.ones((1, 1, 7, 5)))
    out = conv2d(x, Tensor(np.ones((2, 1, 3, 3))), Tensor(np.zeros(2)), 2, "same")
    assert out.shape == (1, 2, 4, 3)


def test_pool2d_matches_loop_oracle() -> None:
    """Max and average pooling agree with the brute-force loops."""

    rng = np.random.default_rng(1)
    for _ in range(50):
        height, width = rng.integers(2, 9, size=2)
        size = int(rng.integers(1, min(height, width) + 1))
        stride = int(rng.integers(1, 3))
        kind = str(rng.choice(["max", "avg"]))
        x = rng.integers(-5, 6, size=(2, 2, height, width)).astype(np.float64)

        out = pool2d(Tensor(x), kind, size, stride)

        np.testing.assert_array_equal(out.data, _pool_oracle(x, kind, size, stride))


def test_max_pool_same_padding_ignores_padding() -> None:
    """Padding never wins a max, even for all-negative inputs."""

    x = Tensor(-np.arange(1.0, 10.0).reshape(1, 1, 3, 3))
    out = pool2d(x, "max", 3, 1, "same")
    assert out.shape == (1, 1, 3, 3)
    assert out.data[0, 0, 0, 0] == -1.0
    assert out.data[0, 0, 2, 2] == -5.0


def test_conv2d_gradients_match_finite_differences() -> None:
    """Twenty random conv instances pass the finite-difference check."""

    rng = np.random.default_rng(2)
    for _ in range(20):
        stride = int(rng.integers(1, 3))
        padding = str(rng.choice(["same", "valid"]))
        x = rng.normal(size=(2, 2, 4, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=(3,))
        shape_ref = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
        weights = rng.normal(size=shape_ref.shape)

        def fn(ts: Sequence[Tensor]) -> Tensor:
            return _weighted(conv2d(ts[0], ts[1], ts[2], stride, padding), weights)

        assert check_gradients(fn, [x, w, b]) <= 1e-4


def test_pool2d_gradients_match_finite_differences() -> None:
    """Distinct, well separated values keep every max window unambiguous."""

    rng = np.random.default_rng(3)
    for _ in range(20):
        kind = str(rng.choice(["max", "avg"]))
        x = rng.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6) * 0.1
        x = x + rng.uniform(-0.01, 0.01, size=x.shape)
        weights = rng.normal(size=(2, 2, 3, 3))

        def fn(ts: Sequence[Tensor]) -> Tensor:
            return _weighted(pool2d(ts[0], kind, 2), weights)

        assert check_gradients(fn, [x]) <= 1e-4


def test_dense_ops_gradients_match_finite_differences() -> None:
    """matmul, add_bias and softmax chained together."""

    rng = np.random.default_rng(4)
    for _ in range(20):
        a = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 5))
        b = rng.normal(size=(5,))
        weights = rng.normal(size=(3, 5))

        def fn(ts: Sequence[Tensor]) -> Tensor:
            return _weighted(softmax(add_bias(matmul(ts[0], ts[1]), ts[2])), weights)

        assert check_gradients(fn, [a, w, b]) <= 1e-4


def test_channel_ops_gradients_match_finite_differences() -> None:
    """concat, slice, add, multiply, reshape and reduce_mean."""

    rng = np.random.default_rng(5)
    for _ in range(20):
        a = rng.normal(size=(2, 2, 3, 3))
        b = rng.normal(size=(2, 3, 3, 3))
        weights = rng.normal(size=(2, 45))

        def fn(ts: Sequence[Tensor]) -> Tensor:
            joined = concat_channels([ts[0], ts[1]])
            head = slice_channels(joined, 0, 2)
            mixed = elementwise_add(head, multiply(ts[0], ts[0]))
            flat = reshape(concat_channels([mixed, ts[1]]), (2, -1))
            return reduce_mean(multiply(flat, Tensor(weights)))

        assert check_gradients(fn, [a, b]) <= 1e-4


def test_shared_input_gradients_are_summed() -> None:
    """A tensor consumed twice receives both contributions."""

    x = Tensor(np.array([1.0, 2.0, 3.0]))
    with GradTape() as tape:
        loss = reduce_sum(elementwise_add(x, x))
    tape.backward(loss)
    np.testing.assert_array_equal(tape.grad(x), [2.0, 2.0, 2.0])


def test_backward_reports_named_trainable_tensors_only() -> None:
    """Unnamed or frozen tensors are not in the returned mapping."""

    w = Tensor(np.ones((2, 2)), name="dense.weight", trainable=True)
    frozen = Tensor(np.ones((2, 2)), name="frozen", trainable=False)
    x = Tensor(np.ones((1, 2)))
    with GradTape() as tape:
        loss = reduce_sum(matmul(matmul(x, w), frozen))
    grads = tape.backward(loss)
    assert set(grads) == {"dense.weight"}
    np.testing.assert_array_equal(grads["dense.weight"], [[2.0, 2.0], [2.0, 2.0]])


def test_ops_outside_a_tape_record_nothing() -> None:
    """Without an active tape a loss cannot be differentiated."""

    x = Tensor(np.ones(3))
    loss = reduce_sum(x)
    with GradTape() as tape:
        pass
    assert len(tape) == 0
    with pytest.raises(GlyphNetError):
        tape.backward(loss)


def test_backward_rejects_non_scalar_loss() -> None:
    """Only a single-element loss can seed the backward pass."""

    with GradTape() as tape:
        out = multiply(Tensor(np.ones(3)), Tensor(np.ones(3)))
    with pytest.raises(DimensionError):
        tape.backward(out)


def test_tensors_are_immutable() -> None:
    """Writing into a tensor buffer fails."""

    t = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        t.data[0] = 1.0
    copy = t.numpy()
    copy[0] = 1.0
    assert t.data[0] == 0.0


def test_softmax_rows_sum_to_one_for_large_logits() -> None:
    """Max subtraction keeps large logits finite."""

    probs = softmax(Tensor(np.array([[1000.0, 1000.0, 999.0], [-5.0, 0.0, 5.0]])))
    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(probs.data >= 0)
    assert probs.data[0, 0] == pytest.approx(probs.data[0, 1])


def test_softmax_rejects_non_finite_logits() -> None:
    """NaN logits raise instead of propagating."""

    with pytest.raises(NumericalError):
        softmax(Tensor(np.array([[0.0, np.nan]])))


@pytest.mark.parametrize(
    ("call", "message"),
    [
        (
            lambda: conv2d(
                Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), Tensor(np.zeros(1))
            ),
            "channels",
        ),
        (lambda: pool2d(Tensor(np.ones((1, 1, 2, 2))), "max", 3), "exceeds"),
        (lambda: matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2)))), "inner"),
        (
            lambda: concat_channels([Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3)))]),
            "spatial",
        ),
        (lambda: elementwise_add(Tensor(np.ones(2)), Tensor(np.ones(3))), "shapes differ"),
        (lambda: reshape(Tensor(np.ones(6)), (4, 2)), "reshape"),
    ],
)
def test_shape_violations_raise_dimension_error(call, message: str) -> None:
    """Mismatched shapes are rejected with a descriptive message."""

    with pytest.raises(DimensionError, match=message):
        call()


def test_concat_of_one_input_is_the_input() -> None:
    """A single-input concatenation is the identity."""

    x = Tensor(np.ones((1, 2, 2, 2)))
    assert concat_channels([x]) is x
