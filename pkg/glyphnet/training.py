"""Loss, learning-rate schedule, Adam and the training/evaluation loops.

Contract
--------
- `cross_entropy` takes softmax rows. When those rows were produced by
  `softmax` on the active tape, the loss is recorded directly against the
  logits with gradient ``(p - onehot) / B``; otherwise it differentiates the
  clamped log of the probabilities.
- `step_decay` halves (by default) the learning rate every ``epoch_drop``
  epochs, counting epochs from 0.
- `adam_step` updates parameters in place through `Parameter.assign` and
  refuses to touch anything when a gradient is not finite.
- `fit` validates on the test split after every epoch; the returned
  `TrainingHistory` holds one entry per completed epoch.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .const import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPSILON,
    DEFAULT_BATCH_SIZE,
    DEFAULT_DROP_RATE,
    DEFAULT_EPOCH_DROP,
    DEFAULT_EPOCHS,
    DEFAULT_LR0,
    MODEL_C,
    MODEL_KINDS,
    PROB_FLOOR,
)
from .data import AugmentConfig, DatasetSplit, LabeledImage, batch_iter, stack_images
from .errors import ConfigError, CorpusError, DimensionError, DivergenceError
from .layers import Parameter
from .metrics import MetricsReport, compute_metrics, predictions
from .models import (
    EnsembleSpec,
    ModelGraph,
    Predictor,
    average_probabilities,
    map_members,
)
from .tensor import GradTape, Tensor, active_tape, record

_LOGGER = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 256


@dataclass(slots=True)
class TrainConfig:
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    lr0: float = DEFAULT_LR0[MODEL_C]
    drop_rate: float = DEFAULT_DROP_RATE
    epoch_drop: int = DEFAULT_EPOCH_DROP
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    adam_epsilon: float = ADAM_EPSILON
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    workers: int = 1

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"must be >= 0, got {self.epochs}", field="epochs")
        if self.batch_size < 1:
            raise ConfigError(f"must be >= 1, got {self.batch_size}", field="batch_size")
        if not (math.isfinite(self.lr0) and self.lr0 >= 0):
            raise ConfigError(f"must be >= 0, got {self.lr0}", field="lr0")
        if not 0.0 < self.drop_rate <= 1.0:
            raise ConfigError(
                f"must lie in (0, 1], got {self.drop_rate}", field="drop_rate"
            )
        if self.epoch_drop < 1:
            raise ConfigError(f"must be >= 1, got {self.epoch_drop}", field="epoch_drop")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)", field="adam")
        if self.adam_epsilon <= 0:
            raise ConfigError(
                f"must be positive, got {self.adam_epsilon}", field="adam_epsilon"
            )
        if self.workers < 1:
            raise ConfigError(f"must be >= 1, got {self.workers}", field="workers")

    @classmethod
    def for_model(cls, kind: str, **overrides: Any) -> TrainConfig:
        """Defaults with the model kind's initial learning rate."""
        kind = str(kind).upper()
        if kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {kind!r}", field="model")
        if overrides.get("lr0") is None:
            overrides["lr0"] = DEFAULT_LR0[kind]
        return cls(**overrides)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


# ---------------------------------------------------------------------------
# Loss and schedule
# ---------------------------------------------------------------------------
def _check_labels(labels: np.ndarray, batch: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise DimensionError(f"expected {batch} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise DimensionError(f"labels must be integers, got {labels.dtype}")
    if batch and (labels.min() < 0 or labels.max() >= num_classes):
        raise DimensionError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    return labels.astype(np.int64)


def cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of ``-log(max(p[label], PROB_FLOOR))`` over the batch."""

    if probs.ndim != 2:
        raise DimensionError(f"cross_entropy: expected (B, K) input, got {probs.shape}")
    batch, num_classes = probs.shape
    if batch == 0:
        raise DimensionError("cross_entropy: empty batch")
    labels = _check_labels(labels, batch, num_classes)
    rows = np.arange(batch)
    p = probs.data
    picked = np.maximum(p[rows, labels].astype(np.float64), PROB_FLOOR)
    value = np.asarray(-np.log(picked).mean(), dtype=probs.dtype)
    onehot = np.zeros_like(p)
    onehot[rows, labels] = 1.0

    tape = active_tape()
    producer = tape.producer(probs) if tape is not None else None
    if producer is not None and producer.kind == "softmax":
        (logits,) = producer.inputs

        def _fused(grad: np.ndarray) -> tuple[np.ndarray]:
            return ((p - onehot) * (grad / batch),)

        return record("softmax_cross_entropy", (logits,), Tensor.wrap(value), _fused)

    clamped = p[rows, labels] >= PROB_FLOOR

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        out = np.zeros_like(p)
        out[rows, labels] = np.where(
            clamped, -1.0 / (np.maximum(p[rows, labels], PROB_FLOOR) * batch), 0.0
        )
        return (out * grad,)

    return record("cross_entropy", (probs,), Tensor.wrap(value), _backward)


def step_decay(
    lr0: float,
    epoch: int,
    drop_rate: float = DEFAULT_DROP_RATE,
    epoch_drop: int = DEFAULT_EPOCH_DROP,
) -> float:
    """``lr0 * drop_rate ** floor(epoch / epoch_drop)``."""

    if epoch < 0:
        raise ConfigError(f"must be >= 0, got {epoch}", field="epoch")
    if epoch_drop < 1:
        raise ConfigError(f"must be >= 1, got {epoch_drop}", field="epoch_drop")
    return lr0 * drop_rate ** (epoch // epoch_drop)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------
@dataclass(slots=True)
class AdamState:
    """First and second moments per parameter name, plus the step count."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON

    @classmethod
    def for_params(
        cls, params: Mapping[str, Parameter], cfg: TrainConfig | None = None
    ) -> AdamState:
        cfg = cfg or TrainConfig()
        return cls(
            m={name: np.zeros(p.shape) for name, p in params.items()},
            v={name: np.zeros(p.shape) for name, p in params.items()},
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            epsilon=cfg.adam_epsilon,
        )


def adam_step(
    params: Mapping[str, Parameter],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """One bias-corrected Adam update of every parameter that has a gradient."""

    for name, grad in grads.items():
        if name not in params:
            continue
        if grad.shape != params[name].shape:
            raise DimensionError(
                f"adam: gradient of {name} has shape {grad.shape}, "
                f"parameter has {params[name].shape}"
            )
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(f"adam: gradient of {name} is not finite")

    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        g = np.asarray(grad, dtype=np.float64)
        m = state.m.setdefault(name, np.zeros(param.shape))
        v = state.v.setdefault(name, np.zeros(param.shape))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        param.assign(param.data - update)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------
@dataclass(slots=True)
class TrainingHistory:
    """Per-epoch learning curves."""

    epoch: list[int] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    train_top1: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_top1: list[float] = field(default_factory=list)
    val_top3: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epoch)

    def append(self, **values: float) -> None:
        for key, value in values.items():
            getattr(self, key).append(value)

    def to_dict(self) -> dict[str, list[Any]]:
        return asdict(self)


EpochCallback = Callable[[int, TrainingHistory], None]


def fit(
    model: ModelGraph,
    dataset: DatasetSplit,
    cfg: TrainConfig,
    *,
    on_epoch: EpochCallback | None = None,
) -> tuple[ModelGraph, TrainingHistory]:
    """Train ``model`` in place and return it with its learning curves."""

    if not dataset.train:
        raise CorpusError("cannot train on an empty training split")
    history = TrainingHistory()
    params = model.trainable_parameters()
    state = AdamState.for_params(params, cfg)

    for epoch in range(cfg.epochs):
        lr = step_decay(cfg.lr0, epoch, cfg.drop_rate, cfg.epoch_drop)
        model.train()
        loss_terms: list[float] = []
        correct = 0
        seen = 0
        for batch, labels in batch_iter(
            dataset.train,
            cfg.batch_size,
            cfg.augment,
            cfg.seed,
            epoch,
            workers=cfg.workers,
        ):
            with GradTape() as tape:
                probs = model(batch)
                loss = cross_entropy(probs, labels)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(
                    f"epoch {epoch + 1}: training loss became {value} "
                    f"after {state.t} optimizer steps (lr={lr:g})"
                )
            grads = tape.backward(loss)
            adam_step(params, grads, state, lr)
            loss_terms.append(value * len(labels))
            correct += int(np.count_nonzero(predictions(probs.data) == labels))
            seen += len(labels)

        train_loss = math.fsum(loss_terms) / seen if seen else float("nan")
        train_top1 = correct / seen if seen else 0.0
        if dataset.test:
            report = evaluate(model, dataset.test, class_names=dataset.class_names)
            val = (report.loss, report.top1, report.top3)
        else:
            val = (float("nan"), 0.0, 0.0)
        history.append(
            epoch=epoch + 1,
            lr=lr,
            train_loss=train_loss,
            train_top1=train_top1,
            val_loss=val[0],
            val_top1=val[1],
            val_top3=val[2],
        )
        _LOGGER.info(
            "Epoch %d/%d lr=%.3g loss=%.4f top1=%.4f val_loss=%.4f val_top1=%.4f",
            epoch + 1,
            cfg.epochs,
            lr,
            train_loss,
            train_top1,
            val[0],
            val[1],
        )
        if on_epoch is not None:
            on_epoch(epoch, history)

    model.eval()
    return model, history


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------
def evaluate(
    predictor: Predictor,
    images: Sequence[LabeledImage],
    *,
    class_names: Sequence[str] | None = None,
    batch_size: int = EVAL_BATCH_SIZE,
) -> MetricsReport:
    """Infer-mode metrics of a model or an ensemble on ``images``.

    For an `EnsembleSpec` the report also lists every member's top-1, top-3
    and loss.
    """

    if not images:
        raise CorpusError("cannot evaluate an empty test set")
    pixels, labels = stack_images(images)

    if not isinstance(predictor, EnsembleSpec):
        return compute_metrics(predictor.predict(pixels, batch_size), labels, class_names)

    member_probs = map_members(predictor, lambda m: m.predict(pixels, batch_size))
    report = compute_metrics(average_probabilities(member_probs), labels, class_names)
    for source, probs in zip(predictor.sources, member_probs, strict=True):
        member = compute_metrics(probs, labels, class_names)
        report.members.append(
            {
                "source": source,
                "top1": member.top1,
                "top3": member.top3,
                "loss": member.loss,
            }
        )
    _LOGGER.info(
        "Ensemble of %d: loss=%.4f vs member mean %.4f",
        len(member_probs),
        report.loss,
        math.fsum(m["loss"] for m in report.members) / len(report.members),
    )
    return report
