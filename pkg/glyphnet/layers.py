"""Parameterized layers with train/infer behaviour.

Key points:
- `LayerNode` is the tree node every layer and block derives from. Children
  and parameters are registered under stable local names; `named_parameters`
  yields dotted, fully qualified names (``res2.conv1.kernel``) which are also
  the names the gradient tape reports.
- Parameter shapes are fixed at construction; forward rejects inputs that do
  not match them.
- Batch normalization uses the population variance of the batch (1/m) in
  train mode and EMA running statistics in infer mode.
- Dropout is inverted: survivors are scaled by 1/(1 - rate) while training,
  so infer mode is the identity.
- ReLU's subgradient at 0 is 0.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterator
from dataclasses import dataclass
from enum import StrEnum
from typing import Any

import numpy as np

from .const import BN_EPSILON, BN_MOMENTUM, PADDING_SAME, PADDING_VALID, POOL_MAX
from .errors import ConfigError, DimensionError
from .helpers import derive_rng
from .tensor import (
    Tensor,
    add_bias,
    conv2d,
    default_dtype,
    matmul,
    pool2d,
    record,
    reshape,
)

_LOGGER = logging.getLogger(__name__)

# Key mixed into dropout seeds so they never collide with init/data streams.
_DROPOUT_STREAM = 0xD20


class Mode(StrEnum):
    TRAIN = "train"
    INFER = "infer"


class Parameter:
    """Named, shape-fixed tensor slot owned by a layer."""

    __slots__ = ("name", "trainable", "tensor")

    def __init__(self, shape: tuple[int, ...], *, trainable: bool = True) -> None:
        self.name = ""
        self.trainable = trainable
        self.tensor = Tensor.wrap(np.zeros(shape, dtype=default_dtype()))

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    @property
    def size(self) -> int:
        return self.tensor.size

    def assign(self, value: Any) -> None:
        """Replace the value; the shape must not change."""
        arr = np.array(value, dtype=self.tensor.dtype)
        if arr.shape != self.shape:
            raise DimensionError(
                f"{self.name or 'parameter'}: cannot assign shape {arr.shape} "
                f"to {self.shape}"
            )
        self.tensor = Tensor.wrap(arr, name=self.name, trainable=self.trainable)

    def bind(self, name: str) -> None:
        self.name = name
        self.tensor = Tensor.wrap(
            self.tensor.data, name=name, trainable=self.trainable
        )

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


class LayerNode:
    """Differentiable transform with named parameters and named children."""

    kind = "node"

    def __init__(self) -> None:
        self.mode = Mode.TRAIN
        self._params: dict[str, Parameter] = {}
        self._children: dict[str, LayerNode] = {}

    # -- registration ------------------------------------------------------
    def add_param(
        self, name: str, shape: tuple[int, ...], *, trainable: bool = True
    ) -> Parameter:
        param = Parameter(shape, trainable=trainable)
        self._params[name] = param
        return param

    def add_child(self, name: str, child: LayerNode) -> LayerNode:
        if name in self._children:
            raise ValueError(f"duplicate child name {name!r}")
        self._children[name] = child
        return child

    # -- traversal ---------------------------------------------------------
    def children(self) -> Iterator[tuple[str, LayerNode]]:
        yield from self._children.items()

    def modules(self) -> Iterator[LayerNode]:
        """Pre-order traversal including ``self``."""
        yield self
        for child in self._children.values():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for local, param in self._params.items():
            yield f"{prefix}{local}", param
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def bind_names(self, prefix: str = "") -> None:
        """Stamp qualified names onto every parameter in the subtree."""
        for name, param in self.named_parameters(prefix):
            param.bind(name)

    # -- modes -------------------------------------------------------------
    def set_mode(self, mode: Mode | str) -> None:
        resolved = Mode(mode)
        for module in self.modules():
            module.mode = resolved

    def train(self) -> None:
        self.set_mode(Mode.TRAIN)

    def eval(self) -> None:
        self.set_mode(Mode.INFER)

    # -- behaviour ---------------------------------------------------------
    def reset_parameters(self, rng: np.random.Generator) -> None:
        """Initialize this node's own parameters (children are separate)."""

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


class Sequential(LayerNode):
    """Children applied in registration order."""

    kind = "sequential"

    def __init__(self, *layers: tuple[str, LayerNode]) -> None:
        super().__init__()
        for name, layer in layers:
            self.add_child(name, layer)

    def append(self, name: str, layer: LayerNode) -> LayerNode:
        return self.add_child(name, layer)

    def forward(self, x: Tensor) -> Tensor:
        for _, layer in self.children():
            x = layer(x)
        return x


# ---------------------------------------------------------------------------
# Functional forms
# ---------------------------------------------------------------------------
def relu(x: Tensor) -> Tensor:
    """max(x, 0) with subgradient 0 at the origin."""

    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * mask,)

    return record("relu", (x,), Tensor.wrap(out), _backward)


def dropout_forward(
    x: Tensor, rate: float, mode: Mode | str, rng: np.random.Generator
) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, rescale survivors."""

    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"must lie in [0, 1), got {rate}", field="dropout.rate")
    if Mode(mode) is Mode.INFER or rate == 0.0:
        return x

    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    out = x.data * mask

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * mask,)

    return record("dropout", (x,), Tensor.wrap(out), _backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean of an NCHW tensor, shape (B, C)."""

    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool: expected NCHW input, got {x.shape}")
    height, width = x.shape[2], x.shape[3]
    out = x.data.mean(axis=(2, 3))
    shape = x.shape

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        spread = grad[:, :, None, None] / (height * width)
        return (np.ascontiguousarray(np.broadcast_to(spread, shape)),)

    return record("global_avg_pool", (x,), Tensor.wrap(out), _backward)


@dataclass(slots=True)
class BatchNormState:
    """Learnable affine (gamma, beta) and EMA statistics of one batch-norm."""

    gamma: Parameter
    beta: Parameter
    running_mean: Parameter
    running_var: Parameter
    epsilon: float = BN_EPSILON
    momentum: float = BN_MOMENTUM

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ConfigError(f"must be positive, got {self.epsilon}", field="epsilon")
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError(
                f"must lie in (0, 1), got {self.momentum}", field="momentum"
            )


def _bn_axes(z: Tensor, channels: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if z.ndim == 4:
        axes, shape = (0, 2, 3), (1, channels, 1, 1)
    elif z.ndim == 2:
        axes, shape = (0,), (1, channels)
    else:
        raise DimensionError(f"batch_norm: expected rank 2 or 4 input, got {z.shape}")
    if z.shape[1] != channels:
        raise DimensionError(
            f"batch_norm: input has {z.shape[1]} channels, state has {channels}"
        )
    return axes, shape


def batch_norm_forward(z: Tensor, state: BatchNormState, mode: Mode | str) -> Tensor:
    """gamma * (z - mu) / sqrt(var + eps) + beta with per-channel statistics."""

    if not state.epsilon > 0:
        raise ConfigError(f"must be positive, got {state.epsilon}", field="epsilon")
    channels = state.gamma.shape[0]
    axes, shape = _bn_axes(z, channels)
    x = z.data
    dtype = x.dtype
    gamma = state.gamma.data.astype(dtype, copy=False).reshape(shape)
    beta = state.beta.data.astype(dtype, copy=False).reshape(shape)

    if Mode(mode) is Mode.TRAIN:
        count = x.size // channels
        if count < 2:
            raise DimensionError(
                "batch_norm: train mode needs at least 2 values per channel, "
                f"got {count}"
            )
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        momentum = state.momentum
        state.running_mean.assign(
            momentum * state.running_mean.data + (1.0 - momentum) * mean
        )
        state.running_var.assign(
            momentum * state.running_var.data + (1.0 - momentum) * var
        )
    else:
        count = 0
        mean = state.running_mean.data.astype(dtype, copy=False)
        var = state.running_var.data.astype(dtype, copy=False)

    inv_std = (1.0 / np.sqrt(var + state.epsilon)).astype(dtype, copy=False)
    inv_std = inv_std.reshape(shape)
    normed = (x - mean.reshape(shape)) * inv_std
    out = gamma * normed + beta

    def _backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        grad_gamma = (grad * normed).sum(axis=axes)
        grad_beta = grad.sum(axis=axes)
        grad_normed = grad * gamma
        if count:
            sum_g = grad_normed.sum(axis=axes).reshape(shape)
            sum_gx = (grad_normed * normed).sum(axis=axes).reshape(shape)
            grad_z = inv_std / count * (count * grad_normed - sum_g - normed * sum_gx)
        else:
            grad_z = grad_normed * inv_std
        return grad_z, grad_gamma, grad_beta

    return record(
        "batch_norm",
        (z, state.gamma.tensor, state.beta.tensor),
        Tensor.wrap(np.ascontiguousarray(out)),
        _backward,
    )


# ---------------------------------------------------------------------------
# Leaf layers
# ---------------------------------------------------------------------------
def _he_normal(
    rng: np.random.Generator, shape: tuple[int, ...], fan_in: int
) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Conv2D(LayerNode):
    kind = "conv2d"

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        *,
        stride: int = 1,
        padding: str = PADDING_SAME,
        bias: bool = True,
    ) -> None:
        super().__init__()
        if min(in_channels, out_channels, kernel_size, stride) <= 0:
            raise ConfigError(
                f"channels/kernel/stride must be positive, got "
                f"{in_channels}/{out_channels}/{kernel_size}/{stride}",
                field="conv2d",
            )
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.kernel = self.add_param(
            "kernel", (out_channels, in_channels, kernel_size, kernel_size)
        )
        # bias=False for convs that feed a batch-norm.
        self.bias = self.add_param("bias", (out_channels,)) if bias else None

    def reset_parameters(self, rng: np.random.Generator) -> None:
        fan_in = self.in_channels * self.kernel_size * self.kernel_size
        self.kernel.assign(_he_normal(rng, self.kernel.shape, fan_in))
        if self.bias is not None:
            self.bias.assign(np.zeros(self.bias.shape))

    def forward(self, x: Tensor) -> Tensor:
        bias = self.bias.tensor if self.bias is not None else None
        return conv2d(x, self.kernel.tensor, bias, self.stride, self.padding)


class Dense(LayerNode):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int) -> None:
        super().__init__()
        if in_features <= 0 or out_features <= 0:
            raise ConfigError(
                f"features must be positive, got {in_features}->{out_features}",
                field="dense",
            )
        self.in_features = in_features
        self.out_features = out_features
        self.weight = self.add_param("weight", (in_features, out_features))
        self.bias = self.add_param("bias", (out_features,))

    def reset_parameters(self, rng: np.random.Generator) -> None:
        self.weight.assign(_he_normal(rng, self.weight.shape, self.in_features))
        self.bias.assign(np.zeros(self.bias.shape))

    def forward(self, x: Tensor) -> Tensor:
        return dense_forward(x, self)


def dense_forward(x: Tensor, layer: Dense) -> Tensor:
    """xW + b for a (B, M) batch."""

    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise DimensionError(
            f"dense: expected (B, {layer.in_features}) input, got {x.shape}"
        )
    return add_bias(matmul(x, layer.weight.tensor), layer.bias.tensor)


class BatchNorm(LayerNode):
    kind = "batch_norm"

    def __init__(
        self,
        channels: int,
        *,
        epsilon: float = BN_EPSILON,
        momentum: float = BN_MOMENTUM,
    ) -> None:
        super().__init__()
        self.channels = channels
        self.state = BatchNormState(
            gamma=self.add_param("gamma", (channels,)),
            beta=self.add_param("beta", (channels,)),
            running_mean=self.add_param("running_mean", (channels,), trainable=False),
            running_var=self.add_param("running_var", (channels,), trainable=False),
            epsilon=epsilon,
            momentum=momentum,
        )

    def reset_parameters(self, rng: np.random.Generator) -> None:
        self.state.gamma.assign(np.ones(self.channels))
        self.state.beta.assign(np.zeros(self.channels))
        self.state.running_mean.assign(np.zeros(self.channels))
        self.state.running_var.assign(np.ones(self.channels))

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm_forward(x, self.state, self.mode)


class ReLU(LayerNode):
    kind = "relu"

    def forward(self, x: Tensor) -> Tensor:
        return relu(x)


class Dropout(LayerNode):
    kind = "dropout"

    def __init__(self, rate: float) -> None:
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"must lie in [0, 1), got {rate}", field="dropout.rate")
        self.rate = rate
        self.rng = np.random.default_rng(0)

    def forward(self, x: Tensor) -> Tensor:
        return dropout_forward(x, self.rate, self.mode, self.rng)


class Pool2D(LayerNode):
    kind = "pool2d"

    def __init__(
        self,
        kind: str,
        size: int,
        *,
        stride: int | None = None,
        padding: str = PADDING_VALID,
    ) -> None:
        super().__init__()
        self.pool_kind = kind
        self.size = size
        self.stride = size if stride is None else stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return pool2d(x, self.pool_kind, self.size, self.stride, self.padding)

    def __repr__(self) -> str:
        return f"Pool2D({self.pool_kind}, {self.size}, stride={self.stride})"


class GlobalAvgPool(LayerNode):
    kind = "global_avg_pool"

    def forward(self, x: Tensor) -> Tensor:
        return global_avg_pool(x)


class Flatten(LayerNode):
    kind = "flatten"

    def forward(self, x: Tensor) -> Tensor:
        return reshape(x, (x.shape[0], -1))


def max_pool_same(size: int) -> Pool2D:
    """Stride-1 max pool that keeps the spatial extent."""
    return Pool2D(POOL_MAX, size, stride=1, padding=PADDING_SAME)


# ---------------------------------------------------------------------------
# Initialization and seeding
# ---------------------------------------------------------------------------
def init_params(layer: LayerNode, rng: np.random.Generator) -> None:
    """He-normal conv/dense weights, zero biases, identity batch-norm."""

    for module in layer.modules():
        module.reset_parameters(rng)


def seed_dropout(layer: LayerNode, seed: int) -> int:
    """Give every dropout node its own generator derived from ``seed``.

    Returns the number of dropout nodes seeded.
    """

    count = 0
    for module in layer.modules():
        if isinstance(module, Dropout):
            module.rng = derive_rng(seed, _DROPOUT_STREAM, count)
            count += 1
    _LOGGER.debug("Seeded %d dropout nodes from seed %s", count, seed)
    return count
