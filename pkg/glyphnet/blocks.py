"""Composite building blocks: inception, residual, dense unit and transition.

Ordering conventions:
- Inception and residual blocks use conv -> batch-norm -> ReLU.
- Dense units and transitions are pre-activation: batch-norm -> ReLU -> conv.
- Every block conv uses ``same`` padding; spatial extent only shrinks through
  explicit 2x2 average pooling (residual downsampling and transitions).

Residual blocks carry the stage-1 input (after the optional downsampling pool)
around three 3x3 stages into an element-wise add before the final ReLU. A 1x1
projection is inserted on the shortcut only when channel counts differ.
Dropout follows each ReLU inside the residual path, ahead of the add.

Convolutions whose output reaches a batch-norm carry no bias (the
normalization removes it); only the residual 1x1 projection keeps one.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import StrEnum

from .const import POOL_AVG
from .errors import ConfigError
from .layers import (
    BatchNorm,
    Conv2D,
    Dropout,
    LayerNode,
    Pool2D,
    ReLU,
    Sequential,
    max_pool_same,
    relu,
)
from .tensor import Tensor, concat_channels, elementwise_add

_LOGGER = logging.getLogger(__name__)

# Bottleneck width of a dense unit, as a multiple of the growth rate.
DENSE_BOTTLENECK_FACTOR = 4


class BlockKind(StrEnum):
    INCEPTION = "inception"
    RESIDUAL = "residual"
    DENSE = "dense"
    TRANSITION = "transition"


@dataclass(frozen=True, slots=True)
class InceptionFilters:
    """(bottleneck, out) for the 3x3 and 5x5 branches plus the pool branch out."""

    bottleneck3: int = 32
    out3: int = 32
    bottleneck5: int = 16
    out5: int = 32
    out_pool: int = 16

    def __post_init__(self) -> None:
        for name in ("bottleneck3", "out3", "bottleneck5", "out5", "out_pool"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ConfigError(
                    f"must be a positive integer, got {value!r}",
                    field=f"inception.{name}",
                )

    @property
    def out_channels(self) -> int:
        return self.out3 + self.out5 + self.out_pool


@dataclass(frozen=True, slots=True)
class BlockSpec:
    """Declarative description of one block for `build_block`."""

    kind: BlockKind
    filters: int = 0
    inception: InceptionFilters = field(default_factory=InceptionFilters)
    dropout_rate: float = 0.0
    downsample: bool = False
    growth_rate: int = 32
    compression: float = 0.5

    def __post_init__(self) -> None:
        if self.growth_rate <= 0:
            raise ConfigError(
                f"must be positive, got {self.growth_rate}", field="growth_rate"
            )
        if not 0.0 < self.compression <= 1.0:
            raise ConfigError(
                f"must lie in (0, 1], got {self.compression}", field="compression"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(
                f"must lie in [0, 1), got {self.dropout_rate}", field="dropout_rate"
            )
        if self.kind is BlockKind.RESIDUAL and self.filters <= 0:
            raise ConfigError(f"must be positive, got {self.filters}", field="filters")


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------
class ConvBNReLU(Sequential):
    """conv -> batch-norm -> ReLU with ``same`` padding."""

    kind = "conv_bn_relu"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int) -> None:
        super().__init__(
            ("conv", Conv2D(in_channels, out_channels, kernel_size, bias=False)),
            ("bn", BatchNorm(out_channels)),
            ("relu", ReLU()),
        )
        self.out_channels = out_channels


class InceptionBlock(LayerNode):
    kind = "inception"

    def __init__(self, in_channels: int, filters: InceptionFilters) -> None:
        super().__init__()
        self.filters = filters
        self.branch3 = self.add_child(
            "branch3",
            Sequential(
                ("reduce", ConvBNReLU(in_channels, filters.bottleneck3, 1)),
                ("conv", ConvBNReLU(filters.bottleneck3, filters.out3, 3)),
            ),
        )
        self.branch5 = self.add_child(
            "branch5",
            Sequential(
                ("reduce", ConvBNReLU(in_channels, filters.bottleneck5, 1)),
                ("conv", ConvBNReLU(filters.bottleneck5, filters.out5, 5)),
            ),
        )
        self.branch_pool = self.add_child(
            "branch_pool",
            Sequential(
                ("pool", max_pool_same(3)),
                ("proj", ConvBNReLU(in_channels, filters.out_pool, 1)),
            ),
        )
        self.out_channels = filters.out_channels

    def forward(self, x: Tensor) -> Tensor:
        return concat_channels(
            [self.branch3(x), self.branch5(x), self.branch_pool(x)]
        )


class ResidualBlock(LayerNode):
    kind = "residual"

    def __init__(
        self,
        in_channels: int,
        filters: int,
        dropout_rate: float,
        downsample: bool,
    ) -> None:
        super().__init__()
        if filters <= 0:
            raise ConfigError(f"must be positive, got {filters}", field="filters")
        self.in_channels = in_channels
        self.out_channels = filters
        self.dropout_rate = dropout_rate
        self.pool = (
            self.add_child("pool", Pool2D(POOL_AVG, 2, stride=2)) if downsample else None
        )

        path = Sequential()
        channels = in_channels
        for stage in (1, 2, 3):
            path.append(f"conv{stage}", Conv2D(channels, filters, 3, bias=False))
            path.append(f"bn{stage}", BatchNorm(filters))
            channels = filters
            if stage < 3:
                path.append(f"relu{stage}", ReLU())
                if dropout_rate > 0:
                    path.append(f"drop{stage}", Dropout(dropout_rate))
        self.path = self.add_child("path", path)
        self.shortcut = (
            self.add_child("shortcut", Conv2D(in_channels, filters, 1))
            if in_channels != filters
            else None
        )

    def forward(self, x: Tensor) -> Tensor:
        if self.pool is not None:
            x = self.pool(x)
        residual = self.path(x)
        identity = self.shortcut(x) if self.shortcut is not None else x
        return relu(elementwise_add(residual, identity))


class DenseUnit(LayerNode):
    """Pre-activation bottleneck unit that appends ``growth_rate`` maps."""

    kind = "dense_unit"

    def __init__(self, in_channels: int, growth_rate: int) -> None:
        super().__init__()
        if growth_rate <= 0:
            raise ConfigError(
                f"must be positive, got {growth_rate}", field="growth_rate"
            )
        width = DENSE_BOTTLENECK_FACTOR * growth_rate
        self.growth_rate = growth_rate
        self.out_channels = in_channels + growth_rate
        self.body = self.add_child(
            "body",
            Sequential(
                ("bn1", BatchNorm(in_channels)),
                ("relu1", ReLU()),
                ("conv1", Conv2D(in_channels, width, 1, bias=False)),
                ("bn2", BatchNorm(width)),
                ("relu2", ReLU()),
                ("conv2", Conv2D(width, growth_rate, 3, bias=False)),
            ),
        )

    def forward(self, x: Tensor) -> Tensor:
        return concat_channels([x, self.body(x)])


class TransitionBlock(Sequential):
    """BN -> ReLU -> 1x1 conv to floor(in * compression) -> 2x2 average pool."""

    kind = "transition"

    def __init__(self, in_channels: int, compression: float) -> None:
        if not 0.0 < compression <= 1.0:
            raise ConfigError(
                f"must lie in (0, 1], got {compression}", field="compression"
            )
        out_channels = math.floor(in_channels * compression)
        if out_channels <= 0:
            raise ConfigError(
                f"{in_channels} channels x {compression} leaves no channels",
                field="compression",
            )
        super().__init__(
            ("bn", BatchNorm(in_channels)),
            ("relu", ReLU()),
            ("conv", Conv2D(in_channels, out_channels, 1, bias=False)),
            ("pool", Pool2D(POOL_AVG, 2, stride=2)),
        )
        self.out_channels = out_channels


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------
def build_inception(in_channels: int, branch_filters: InceptionFilters) -> InceptionBlock:
    return InceptionBlock(in_channels, branch_filters)


def build_residual(
    in_channels: int, filters: int, dropout_rate: float, downsample: bool
) -> ResidualBlock:
    return ResidualBlock(in_channels, filters, dropout_rate, downsample)


def build_dense_block(in_channels: int, growth_rate: int) -> DenseUnit:
    return DenseUnit(in_channels, growth_rate)


def build_transition(in_channels: int, compression: float) -> TransitionBlock:
    return TransitionBlock(in_channels, compression)


def build_block(spec: BlockSpec, in_channels: int) -> LayerNode:
    """Dispatch a `BlockSpec` to its builder."""

    if spec.kind is BlockKind.INCEPTION:
        return build_inception(in_channels, spec.inception)
    if spec.kind is BlockKind.RESIDUAL:
        return build_residual(
            in_channels, spec.filters, spec.dropout_rate, spec.downsample
        )
    if spec.kind is BlockKind.DENSE:
        return build_dense_block(in_channels, spec.growth_rate)
    return build_transition(in_channels, spec.compression)
