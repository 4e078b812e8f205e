"""Model A/B/C assembly and softmax-averaging ensembles.

Model A: conv stem -> inception block -> three downsampling residual blocks
(20% dropout) -> flatten -> dense 1024 -> dense 512 -> softmax.
Model B: five residual blocks with 32/64/128/256/512 filters (10% dropout,
blocks 2-5 downsample) -> flatten -> dense 1024 -> dense 512 -> softmax.
Model C: conv stem -> 6 dense units -> transition -> 12 dense units ->
BN -> ReLU -> global average pool -> softmax. No dropout anywhere.

Every number above is an `ArchConfig` default and can be overridden; the
resolved `ArchConfig` is stored in checkpoints so graphs can be rebuilt.
"""

from __future__ import annotations

import logging
import threading
from collections.abc import Iterator, Mapping, Sequence
from contextlib import contextmanager
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Protocol

import numpy as np

from .blocks import (
    BlockKind,
    BlockSpec,
    ConvBNReLU,
    InceptionFilters,
    build_block,
)
from .const import DEFAULT_IMAGE_SIZE, MODEL_A, MODEL_B, MODEL_C, MODEL_KINDS
from .errors import ConfigError, DimensionError, EnsembleMismatchError
from .helpers import derive_rng
from .layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    GlobalAvgPool,
    LayerNode,
    Mode,
    Parameter,
    ReLU,
    Sequential,
    init_params,
    seed_dropout,
)
from .tensor import Tensor, softmax

_LOGGER = logging.getLogger(__name__)

_INIT_STREAM = 0x1417


@dataclass(frozen=True, slots=True)
class InputSpec:
    """Grayscale input geometry (channels x height x width)."""

    channels: int = 1
    height: int = DEFAULT_IMAGE_SIZE
    width: int = DEFAULT_IMAGE_SIZE

    @classmethod
    def square(cls, size: int) -> InputSpec:
        return cls(1, size, size)

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


@dataclass(frozen=True, slots=True)
class ArchConfig:
    """Layer widths and rates for one model kind."""

    stem_filters: int = 32
    inception: InceptionFilters = field(default_factory=InceptionFilters)
    residual_filters: tuple[int, ...] = (64, 128, 256)
    dense_units: tuple[int, ...] = (1024, 512)
    dropout: float = 0.2
    growth_rate: int = 32
    dense_blocks: tuple[int, ...] = (6, 12)
    compression: float = 0.5

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        for key in ("residual_filters", "dense_units", "dense_blocks"):
            data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ArchConfig:
        values = dict(data)
        if "inception" in values and not isinstance(
            values["inception"], InceptionFilters
        ):
            values["inception"] = InceptionFilters(**values["inception"])
        for key in ("residual_filters", "dense_units", "dense_blocks"):
            if key in values:
                values[key] = tuple(int(v) for v in values[key])
        return cls(**values)


def default_arch(kind: str) -> ArchConfig:
    """Published defaults per model kind."""

    if kind == MODEL_A:
        return ArchConfig()
    if kind == MODEL_B:
        return ArchConfig(residual_filters=(32, 64, 128, 256, 512), dropout=0.1)
    if kind == MODEL_C:
        return ArchConfig(stem_filters=64, dropout=0.0)
    raise ConfigError(f"unknown model kind {kind!r}", field="model")


class ModelGraph:
    """A built network: layer tree, parameter registry and its descriptor."""

    def __init__(
        self,
        kind: str,
        num_classes: int,
        input_spec: InputSpec,
        arch: ArchConfig,
        seed: int,
        body: Sequential,
    ) -> None:
        self.kind = kind
        self.num_classes = num_classes
        self.input_spec = input_spec
        self.arch = arch
        self.seed = seed
        self.body = body
        self._mode_lock = threading.RLock()
        body.bind_names()

    # -- forward -----------------------------------------------------------
    def forward(self, x: Tensor) -> Tensor:
        """Class probabilities, shape (B, K)."""
        if x.ndim != 4 or x.shape[1:] != self.input_spec.as_tuple():
            expected = (-1, *self.input_spec.as_tuple())
            raise DimensionError(
                f"model {self.kind}: expected input shaped {expected}, got {x.shape}"
            )
        return softmax(self.body(x))

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Infer-mode probabilities for an (N, C, H, W) array, in batches."""
        with self.inferring():
            chunks = [
                self.forward(Tensor(images[start : start + batch_size])).data
                for start in range(0, len(images), batch_size)
            ]
        if not chunks:
            return np.zeros((0, self.num_classes))
        return np.concatenate(chunks, axis=0)

    # -- modes -------------------------------------------------------------
    @property
    def mode(self) -> Mode:
        return self.body.mode

    def set_mode(self, mode: Mode | str) -> None:
        self.body.set_mode(mode)

    def train(self) -> None:
        self.body.train()

    def eval(self) -> None:
        self.body.eval()

    @contextmanager
    def inferring(self) -> Iterator[None]:
        """Infer mode for the duration of the block, then the previous mode.

        Holds a per-model lock, so threads sharing one model never observe
        each other's mode switch.
        """
        with self._mode_lock:
            previous = self.mode
            self.eval()
            try:
                yield
            finally:
                self.set_mode(previous)

    # -- introspection -----------------------------------------------------
    def modules(self) -> Iterator[LayerNode]:
        return self.body.modules()

    def named_parameters(self) -> dict[str, Parameter]:
        return dict(self.body.named_parameters())

    def trainable_parameters(self) -> dict[str, Parameter]:
        return {n: p for n, p in self.body.named_parameters() if p.trainable}

    def param_count(self, *, trainable_only: bool = True) -> int:
        params = self.trainable_parameters() if trainable_only else self.named_parameters()
        return sum(p.size for p in params.values())

    def descriptor(self) -> dict[str, Any]:
        """Everything needed to rebuild the same graph."""
        return {
            "kind": self.kind,
            "num_classes": self.num_classes,
            "input_spec": list(self.input_spec.as_tuple()),
            "arch": self.arch.to_dict(),
            "seed": self.seed,
        }

    def __repr__(self) -> str:
        return (
            f"ModelGraph(kind={self.kind!r}, num_classes={self.num_classes}, "
            f"input={self.input_spec.as_tuple()}, params={self.param_count()})"
        )


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------
def _halve(size: int, times: int, kind: str, input_spec: InputSpec) -> int:
    for _ in range(times):
        size //= 2
        if size < 1:
            raise DimensionError(
                f"model {kind}: input {input_spec.height}x{input_spec.width} is too "
                f"small for {times} downsamplings"
            )
    return size


def _check_classes(num_classes: int) -> None:
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}", field="classes")


def _append_classifier(
    body: Sequential, features: int, arch: ArchConfig, num_classes: int
) -> None:
    for index, width in enumerate(arch.dense_units, start=1):
        body.append(f"fc{index}", Dense(features, width))
        body.append(f"fc{index}_relu", ReLU())
        if arch.dropout > 0:
            body.append(f"fc{index}_drop", Dropout(arch.dropout))
        features = width
    body.append("classifier", Dense(features, num_classes))


def _finish(
    kind: str,
    num_classes: int,
    input_spec: InputSpec,
    arch: ArchConfig,
    seed: int,
    body: Sequential,
) -> ModelGraph:
    init_params(body, derive_rng(seed, _INIT_STREAM))
    seed_dropout(body, seed)
    model = ModelGraph(kind, num_classes, input_spec, arch, seed, body)
    _LOGGER.debug("Built %r", model)
    return model


def build_model_a(
    num_classes: int,
    input_spec: InputSpec | None = None,
    *,
    arch: ArchConfig | None = None,
    seed: int = 0,
) -> ModelGraph:
    """Stem, inception block, three residual blocks, two dense layers."""

    _check_classes(num_classes)
    input_spec = input_spec or InputSpec()
    arch = arch or default_arch(MODEL_A)
    height = _halve(input_spec.height, len(arch.residual_filters), MODEL_A, input_spec)
    width = _halve(input_spec.width, len(arch.residual_filters), MODEL_A, input_spec)

    body = Sequential(("stem", ConvBNReLU(input_spec.channels, arch.stem_filters, 3)))
    inception = build_block(
        BlockSpec(BlockKind.INCEPTION, inception=arch.inception), arch.stem_filters
    )
    body.append("inception", inception)
    channels = arch.inception.out_channels
    for index, filters in enumerate(arch.residual_filters, start=1):
        spec = BlockSpec(
            BlockKind.RESIDUAL,
            filters=filters,
            dropout_rate=arch.dropout,
            downsample=True,
        )
        body.append(f"res{index}", build_block(spec, channels))
        channels = filters
    body.append("flatten", Flatten())
    _append_classifier(body, channels * height * width, arch, num_classes)
    return _finish(MODEL_A, num_classes, input_spec, arch, seed, body)


def build_model_b(
    num_classes: int,
    input_spec: InputSpec | None = None,
    *,
    arch: ArchConfig | None = None,
    seed: int = 0,
) -> ModelGraph:
    """Five residual blocks (first at full resolution), two dense layers."""

    _check_classes(num_classes)
    input_spec = input_spec or InputSpec()
    arch = arch or default_arch(MODEL_B)
    downsamplings = max(len(arch.residual_filters) - 1, 0)
    height = _halve(input_spec.height, downsamplings, MODEL_B, input_spec)
    width = _halve(input_spec.width, downsamplings, MODEL_B, input_spec)

    body = Sequential()
    channels = input_spec.channels
    for index, filters in enumerate(arch.residual_filters, start=1):
        spec = BlockSpec(
            BlockKind.RESIDUAL,
            filters=filters,
            dropout_rate=arch.dropout,
            downsample=index > 1,
        )
        body.append(f"res{index}", build_block(spec, channels))
        channels = filters
    body.append("flatten", Flatten())
    _append_classifier(body, channels * height * width, arch, num_classes)
    return _finish(MODEL_B, num_classes, input_spec, arch, seed, body)


def build_model_c(
    num_classes: int,
    input_spec: InputSpec | None = None,
    *,
    arch: ArchConfig | None = None,
    seed: int = 0,
) -> ModelGraph:
    """Stem, dense-unit groups joined by transitions, GAP classifier."""

    _check_classes(num_classes)
    input_spec = input_spec or InputSpec()
    arch = arch or default_arch(MODEL_C)
    if arch.dropout:
        arch = replace(arch, dropout=0.0)
    transitions = max(len(arch.dense_blocks) - 1, 0)
    _halve(input_spec.height, transitions, MODEL_C, input_spec)
    _halve(input_spec.width, transitions, MODEL_C, input_spec)

    body = Sequential(
        ("stem", Conv2D(input_spec.channels, arch.stem_filters, 3, bias=False)),
    )
    channels = arch.stem_filters
    unit = 0
    for group, count in enumerate(arch.dense_blocks):
        if group > 0:
            transition = build_block(
                BlockSpec(BlockKind.TRANSITION, compression=arch.compression), channels
            )
            body.append(f"transition{group}", transition)
            channels = transition.out_channels
        for _ in range(count):
            unit += 1
            dense = build_block(
                BlockSpec(BlockKind.DENSE, growth_rate=arch.growth_rate), channels
            )
            body.append(f"dense{unit}", dense)
            channels = dense.out_channels
    body.append("final_bn", BatchNorm(channels))
    body.append("final_relu", ReLU())
    body.append("gap", GlobalAvgPool())
    body.append("classifier", Dense(channels, num_classes))
    return _finish(MODEL_C, num_classes, input_spec, arch, seed, body)


_BUILDERS = {MODEL_A: build_model_a, MODEL_B: build_model_b, MODEL_C: build_model_c}


def build_model(
    kind: str,
    num_classes: int,
    input_spec: InputSpec | None = None,
    *,
    arch: ArchConfig | None = None,
    seed: int = 0,
) -> ModelGraph:
    """Dispatch to the builder for ``kind`` (A, B or C)."""

    kind = str(kind).upper()
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}", field="model")
    return _BUILDERS[kind](num_classes, input_spec, arch=arch, seed=seed)


def count_dropout_nodes(model: ModelGraph) -> int:
    return sum(1 for module in model.modules() if isinstance(module, Dropout))


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------
class Predictor(Protocol):
    num_classes: int

    def predict(self, images: np.ndarray, batch_size: int = ...) -> np.ndarray: ...


@dataclass(slots=True)
class EnsembleSpec:
    """Ordered members whose softmax outputs are averaged."""

    members: list[ModelGraph]
    sources: list[str] = field(default_factory=list)
    workers: int = 1

    def __post_init__(self) -> None:
        if not self.members:
            raise EnsembleMismatchError("an ensemble needs at least one member")
        if not self.sources:
            self.sources = [f"member{i}" for i in range(len(self.members))]
        reference = self.members[0]
        offenders = [
            self.sources[i]
            for i, member in enumerate(self.members)
            if member.num_classes != reference.num_classes
            or member.input_spec != reference.input_spec
        ]
        if offenders:
            raise EnsembleMismatchError(
                f"members disagree with {self.sources[0]} "
                f"(K={reference.num_classes}, input={reference.input_spec.as_tuple()})",
                offenders=offenders,
            )

    @property
    def num_classes(self) -> int:
        return self.members[0].num_classes

    @property
    def input_spec(self) -> InputSpec:
        return self.members[0].input_spec

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        outputs = map_members(self, lambda m: m.predict(images, batch_size))
        return average_probabilities(outputs)


def map_members(spec: EnsembleSpec, fn: Any) -> list[np.ndarray]:
    if spec.workers > 1 and len(spec.members) > 1:
        with ThreadPoolExecutor(max_workers=spec.workers) as pool:
            return list(pool.map(fn, spec.members))
    return [fn(member) for member in spec.members]


def average_probabilities(outputs: Sequence[np.ndarray]) -> np.ndarray:
    total = np.array(outputs[0], copy=True)
    for out in outputs[1:]:
        total += out
    return total / len(outputs)


def ensemble_predict(spec: EnsembleSpec, batch: Tensor) -> Tensor:
    """Arithmetic mean of the members' infer-mode softmax rows."""

    def _member_probs(member: ModelGraph) -> np.ndarray:
        with member.inferring():
            return member.forward(batch).data

    return Tensor.wrap(average_probabilities(map_members(spec, _member_probs)))
