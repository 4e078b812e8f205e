"""Dense tensors, the gradient tape and the primitive differentiable ops.

Contract
--------
- Images use the batch x channels x height x width layout, vectors use
  batch x features. Channel concatenation is therefore a contiguous block copy.
- `Tensor` values are immutable once produced (their numpy buffer is flagged
  read-only) and may be shared across threads.
- A `GradTape` is activated with ``with GradTape() as tape:``. Every primitive
  executed inside the block appends one record; `GradTape.backward` replays
  the records in reverse order exactly once and sums the contributions of a
  tensor consumed by several ops. The active tape lives in a context variable,
  so it is confined to the thread that opened it.
- 32-bit reals are the default; `precision(np.float64)` switches newly created
  tensors to 64-bit for oracles and finite-difference checks.

Convolution is cross-correlation (no kernel flip). ``same`` padding pads with
zeros so the output extent is ``ceil(size / stride)``; an odd padding total
puts the extra row/column at the bottom/right.
"""

from __future__ import annotations

import contextvars
import logging
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .const import PADDING_SAME, PADDING_VALID, POOL_AVG, POOL_MAX
from .errors import DimensionError, GlyphNetError, NumericalError

_LOGGER = logging.getLogger(__name__)

_SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_default_dtype: np.dtype = np.dtype(np.float32)

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


# ---------------------------------------------------------------------------
# Precision
# ---------------------------------------------------------------------------
def default_dtype() -> np.dtype:
    """Return the dtype used for newly created tensors and parameters."""
    return _default_dtype


def set_default_dtype(dtype: Any) -> None:
    """Switch the default real type (float32 or float64)."""
    global _default_dtype
    resolved = np.dtype(dtype)
    if resolved not in _SUPPORTED_DTYPES:
        raise ValueError(f"Unsupported dtype {resolved}; use float32 or float64")
    _default_dtype = resolved


@contextmanager
def precision(dtype: Any) -> Iterator[np.dtype]:
    """Temporarily switch the default dtype."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield _default_dtype
    finally:
        set_default_dtype(previous)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------
class Tensor:
    """Immutable dense array with an optional parameter name."""

    __slots__ = ("data", "name", "trainable")

    def __init__(
        self,
        data: Any,
        *,
        name: str | None = None,
        trainable: bool = False,
        dtype: Any = None,
    ) -> None:
        arr = np.array(data, dtype=dtype or _default_dtype)
        arr.flags.writeable = False
        self.data: np.ndarray = arr
        self.name = name
        self.trainable = trainable

    @classmethod
    def wrap(
        cls, arr: np.ndarray, *, name: str | None = None, trainable: bool = False
    ) -> Tensor:
        """Adopt ``arr`` without copying; the caller must not mutate it later."""
        tensor = cls.__new__(cls)
        arr.flags.writeable = False
        tensor.data = arr
        tensor.name = name
        tensor.trainable = trainable
        return tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """Return a writable copy of the values."""
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


# ---------------------------------------------------------------------------
# Gradient tape
# ---------------------------------------------------------------------------
@dataclass(slots=True, eq=False)
class TapeOp:
    """One executed primitive: inputs, output and the local backward rule."""

    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


_ACTIVE_TAPE: contextvars.ContextVar[GradTape | None] = contextvars.ContextVar(
    "glyphnet_active_tape", default=None
)


class GradTape:
    """Ordered record of primitive ops for reverse-mode differentiation."""

    def __init__(self) -> None:
        self.ops: list[TapeOp] = []
        self._producers: dict[int, TapeOp] = {}
        self._grads: dict[int, np.ndarray] = {}
        self._token: contextvars.Token[GradTape | None] | None = None

    def __enter__(self) -> GradTape:
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *_exc: object) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, op: TapeOp) -> None:
        self.ops.append(op)
        self._producers[id(op.output)] = op

    def producer(self, tensor: Tensor) -> TapeOp | None:
        """Return the op that produced ``tensor`` on this tape, if any."""
        return self._producers.get(id(tensor))

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Differentiate ``loss`` and return gradients of named trainable tensors."""
        if id(loss) not in self._producers:
            raise GlyphNetError("backward: loss was not produced on this tape")
        if loss.size != 1:
            raise DimensionError(
                f"backward: loss must be a scalar, got shape {loss.shape}"
            )

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}

        for op in reversed(self.ops):
            upstream = grads.get(id(op.output))
            if upstream is None:
                continue
            local = op.backward(upstream)
            for tensor, contribution in zip(op.inputs, local, strict=True):
                if contribution is None:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + contribution
                else:
                    grads[key] = contribution
                if tensor.trainable and tensor.name:
                    leaves[key] = tensor

        self._grads = grads
        named: dict[str, np.ndarray] = {}
        for key, tensor in leaves.items():
            assert tensor.name is not None
            if tensor.name in named:
                named[tensor.name] = named[tensor.name] + grads[key]
            else:
                named[tensor.name] = grads[key]
        _LOGGER.debug(
            "Backward over %d ops produced %d parameter gradients",
            len(self.ops),
            len(named),
        )
        return named

    def grad(self, tensor: Tensor) -> np.ndarray | None:
        """Gradient of the last differentiated loss with respect to ``tensor``."""
        return self._grads.get(id(tensor))


def active_tape() -> GradTape | None:
    return _ACTIVE_TAPE.get()


def record(
    kind: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: BackwardFn
) -> Tensor:
    """Append an op to the active tape (no-op without one) and return ``output``."""
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.record(TapeOp(kind, tuple(inputs), output, backward_fn))
    return output


def backward(tape: GradTape, loss: Tensor) -> dict[str, np.ndarray]:
    """Functional spelling of `GradTape.backward`."""
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# Shape helpers
# ---------------------------------------------------------------------------
def _expect_rank(tensor: Tensor, rank: int, what: str) -> None:
    if tensor.ndim != rank:
        raise DimensionError(
            f"{what}: expected a rank-{rank} tensor, got shape {tensor.shape}"
        )


def _same_pads(size: int, kernel: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _window_geometry(
    height: int,
    width: int,
    kh: int,
    kw: int,
    stride: int,
    padding: str,
    what: str,
) -> tuple[tuple[int, int, int, int], int, int]:
    if padding == PADDING_SAME:
        top, bottom = _same_pads(height, kh, stride)
        left, right = _same_pads(width, kw, stride)
    elif padding == PADDING_VALID:
        top = bottom = left = right = 0
    else:
        raise DimensionError(f"{what}: unknown padding {padding!r}")

    padded_h = height + top + bottom
    padded_w = width + left + right
    if kh > padded_h or kw > padded_w:
        raise DimensionError(
            f"{what}: window {kh}x{kw} exceeds padded extent {padded_h}x{padded_w}"
        )
    out_h = (padded_h - kh) // stride + 1
    out_w = (padded_w - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"{what}: zero-sized output {out_h}x{out_w}")
    return (top, bottom, left, right), out_h, out_w


def _pad(arr: np.ndarray, pads: tuple[int, int, int, int], value: float) -> np.ndarray:
    top, bottom, left, right = pads
    if not any(pads):
        return arr
    return np.pad(
        arr,
        ((0, 0), (0, 0), (top, bottom), (left, right)),
        mode="constant",
        constant_values=value,
    )


def _windows(arr: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View of shape (B, C, H', W', kh, kw) over a padded NCHW array."""
    view = sliding_window_view(arr, (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------
def _ordered_conv(
    padded: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray | None,
    stride: int,
    out_h: int,
    out_w: int,
) -> np.ndarray:
    """Accumulate bias, then channel by kernel row by kernel column."""
    batch = padded.shape[0]
    out_channels, channels, kh, kw = weights.shape
    out = np.zeros((batch, out_channels, out_h, out_w), dtype=padded.dtype)
    if bias is not None:
        out += bias[None, :, None, None]
    for c in range(channels):
        for u in range(kh):
            for v in range(kw):
                rows = padded[:, c, u : u + stride * out_h : stride, v : v + stride * out_w : stride]
                out += rows[:, None] * weights[None, :, c, u, v, None, None]
    return out


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None,
    stride: int = 1,
    padding: str = PADDING_SAME,
) -> Tensor:
    """2-D cross-correlation of an NCHW batch with an OIHW kernel plus bias.

    In 64-bit mode every output is summed in a fixed order (bias, then input
    channel, kernel row, kernel column), so results are bit-for-bit those of a
    plain nested loop. 32-bit runs contract the windows with ``tensordot``.
    """

    _expect_rank(x, 4, "conv2d input")
    _expect_rank(kernel, 4, "conv2d kernel")
    batch, channels, height, width = x.shape
    out_channels, kernel_channels, kh, kw = kernel.shape
    if kernel_channels != channels:
        raise DimensionError(
            f"conv2d: input has {channels} channels but kernel expects {kernel_channels}"
        )
    if bias is not None and bias.shape != (out_channels,):
        raise DimensionError(
            f"conv2d: bias shape {bias.shape} does not match {out_channels} filters"
        )
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be positive, got {stride}")

    pads, out_h, out_w = _window_geometry(
        height, width, kh, kw, stride, padding, "conv2d"
    )
    padded = _pad(x.data, pads, 0.0)
    windows = _windows(padded, kh, kw, stride)
    weights = kernel.data
    bias_data = bias.data if bias is not None else None

    if x.dtype == np.float64:
        out = _ordered_conv(padded, weights, bias_data, stride, out_h, out_w)
    else:
        out = np.tensordot(windows, weights, axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2)
        if bias_data is not None:
            out = out + bias_data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def _backward(grad: np.ndarray) -> tuple[np.ndarray, ...]:
        grad_kernel = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_windows = np.tensordot(grad, weights, axes=([1], [0]))
        grad_windows = grad_windows.transpose(0, 3, 1, 2, 4, 5)
        grad_padded = np.zeros(padded.shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                grad_padded[
                    :,
                    :,
                    i : i + stride * out_h : stride,
                    j : j + stride * out_w : stride,
                ] += grad_windows[..., i, j]
        top, _, left, _ = pads
        grad_x = np.ascontiguousarray(
            grad_padded[:, :, top : top + height, left : left + width]
        )
        if bias is None:
            return grad_x, grad_kernel
        return grad_x, grad_kernel, grad.sum(axis=(0, 2, 3))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record("conv2d", inputs, Tensor.wrap(out), _backward)


def pool2d(
    x: Tensor,
    kind: str,
    size: int,
    stride: int | None = None,
    padding: str = PADDING_VALID,
) -> Tensor:
    """Max or average pooling over square windows (stride defaults to size)."""

    _expect_rank(x, 4, "pool2d input")
    stride = size if stride is None else stride
    if size <= 0 or stride <= 0:
        raise DimensionError(
            f"pool2d: size and stride must be positive, got {size}/{stride}"
        )
    if kind not in (POOL_MAX, POOL_AVG):
        raise DimensionError(f"pool2d: unknown kind {kind!r}")
    if padding == PADDING_SAME and kind != POOL_MAX:
        raise DimensionError("pool2d: same padding is only supported for max pooling")

    _, _, height, width = x.shape
    pads, out_h, out_w = _window_geometry(
        height, width, size, size, stride, padding, "pool2d"
    )
    padded = _pad(x.data, pads, -np.inf)
    windows = _windows(padded, size, size, stride)
    top, _, left, _ = pads
    area = size * size

    if kind == POOL_MAX:
        flat = windows.reshape(*windows.shape[:4], area)
        winner = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, winner[..., None], axis=-1)[..., 0]
    else:
        winner = None
        out = windows.mean(axis=(4, 5))
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        grad_padded = np.zeros(padded.shape, dtype=grad.dtype)
        for i in range(size):
            for j in range(size):
                if winner is not None:
                    contribution = np.where(winner == i * size + j, grad, 0.0)
                else:
                    contribution = grad / area
                grad_padded[
                    :,
                    :,
                    i : i + stride * out_h : stride,
                    j : j + stride * out_w : stride,
                ] += contribution
        grad_x = grad_padded[:, :, top : top + height, left : left + width]
        return (np.ascontiguousarray(grad_x),)

    return record(f"{kind}_pool2d", (x,), Tensor.wrap(out), _backward)


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """Matrix product of a (B, M) batch with an (M, N) matrix."""

    _expect_rank(a, 2, "matmul lhs")
    _expect_rank(w, 2, "matmul rhs")
    if a.shape[1] != w.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions differ ({a.shape[1]} vs {w.shape[0]})"
        )
    lhs, rhs = a.data, w.data
    out = lhs @ rhs

    def _backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return grad @ rhs.T, lhs.T @ grad

    return record("matmul", (a, w), Tensor.wrap(out), _backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a (N,) bias to every row of a (B, N) batch."""

    _expect_rank(x, 2, "add_bias input")
    if bias.shape != (x.shape[1],):
        raise DimensionError(
            f"add_bias: bias shape {bias.shape} does not match {x.shape[1]} features"
        )
    out = x.data + bias.data[None, :]

    def _backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return grad, grad.sum(axis=0)

    return record("add_bias", (x, bias), Tensor.wrap(out), _backward)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Stack NCHW tensors along the channel axis in argument order."""

    if not inputs:
        raise DimensionError("concat_channels: no inputs")
    for tensor in inputs:
        _expect_rank(tensor, 4, "concat_channels input")
    first = inputs[0].shape
    for tensor in inputs[1:]:
        if (tensor.shape[0], *tensor.shape[2:]) != (first[0], *first[2:]):
            raise DimensionError(
                f"concat_channels: shape {tensor.shape} disagrees with {first} "
                "on batch or spatial extent"
            )
    if len(inputs) == 1:
        return inputs[0]

    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])
    out = np.concatenate([t.data for t in inputs], axis=1)

    def _backward(grad: np.ndarray) -> list[np.ndarray]:
        return [
            np.ascontiguousarray(grad[:, bounds[i] : bounds[i + 1]])
            for i in range(len(inputs))
        ]

    return record("concat_channels", tuple(inputs), Tensor.wrap(out), _backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``start:stop`` of an NCHW tensor."""

    _expect_rank(x, 4, "slice_channels input")
    if not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(
            f"slice_channels: range {start}:{stop} outside {x.shape[1]} channels"
        )
    out = np.ascontiguousarray(x.data[:, start:stop])

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(x.shape, dtype=grad.dtype)
        full[:, start:stop] = grad
        return (full,)

    return record("slice_channels", (x,), Tensor.wrap(out), _backward)


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    """Pointwise sum of two tensors of identical shape (no broadcasting)."""

    if a.shape != b.shape:
        raise DimensionError(f"elementwise_add: shapes differ ({a.shape} vs {b.shape})")
    out = a.data + b.data

    def _backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return grad, grad

    return record("add", (a, b), Tensor.wrap(out), _backward)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Pointwise product of two tensors of identical shape."""

    if a.shape != b.shape:
        raise DimensionError(f"multiply: shapes differ ({a.shape} vs {b.shape})")
    lhs, rhs = a.data, b.data
    out = lhs * rhs

    def _backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return grad * rhs, grad * lhs

    return record("multiply", (a, b), Tensor.wrap(out), _backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Row-major reshape; ``-1`` infers one extent."""

    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as err:
        raise DimensionError(f"reshape: {x.shape} -> {tuple(shape)}: {err}") from None
    original = x.shape

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad.reshape(original),)

    return record("reshape", (x,), Tensor.wrap(out), _backward)


def reduce_sum(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""

    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.full(x.shape, grad, dtype=x.dtype),)

    return record("reduce_sum", (x,), Tensor.wrap(out), _backward)


def reduce_mean(x: Tensor) -> Tensor:
    """Mean of all elements as a scalar tensor."""

    count = x.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.full(x.shape, grad / count, dtype=x.dtype),)

    return record("reduce_mean", (x,), Tensor.wrap(out), _backward)


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax of (B, K) logits with max subtraction."""

    _expect_rank(logits, 2, "softmax input")
    if logits.shape[1] < 1:
        raise DimensionError("softmax: need at least one class")
    if not np.all(np.isfinite(logits.data)):
        raise NumericalError("softmax: logits contain NaN or Inf")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        dot = (grad * probs).sum(axis=1, keepdims=True)
        return (probs * (grad - dot),)

    return record("softmax", (logits,), Tensor.wrap(probs), _backward)
