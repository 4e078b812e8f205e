"""Run configuration: JSON file + CLI flags, validated with voluptuous.

Precedence is flags > config file > defaults. Validation runs before any
corpus or checkpoint is touched; the first invalid field is reported as a
`ConfigError` whose ``field`` is the offending key.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import voluptuous as vol

from .const import (
    AUG_ROTATION_DEG,
    AUG_SHEAR_FRAC,
    AUG_SHIFT_FRAC,
    AUG_ZOOM_FRAC,
    CONF_AUGMENT,
    CONF_BATCH_SIZE,
    CONF_CORPUS,
    CONF_DROP_RATE,
    CONF_ENSEMBLE,
    CONF_EPOCH_DROP,
    CONF_EPOCHS,
    CONF_IMAGE_SIZE,
    CONF_LR0,
    CONF_MODEL,
    CONF_OUT,
    CONF_ROTATION_DEG,
    CONF_SEED,
    CONF_SHEAR_FRAC,
    CONF_SHIFT_FRAC,
    CONF_TRAIN_FRAC,
    CONF_WORKERS,
    CONF_ZOOM_FRAC,
    DEFAULT_BATCH_SIZE,
    DEFAULT_DROP_RATE,
    DEFAULT_EPOCH_DROP,
    DEFAULT_EPOCHS,
    DEFAULT_IMAGE_SIZE,
    DEFAULT_LR0,
    DEFAULT_TRAIN_FRAC,
    MAX_IMAGE_SIZE,
    MIN_IMAGE_SIZE,
    MODEL_A,
    MODEL_KINDS,
)
from .data import AugmentConfig
from .errors import ConfigError
from .training import TrainConfig

_LOGGER = logging.getLogger(__name__)


def _fraction(*, upper: float, upper_included: bool) -> vol.All:
    return vol.All(
        vol.Coerce(float),
        vol.Range(min=0.0, max=upper, max_included=upper_included),
    )


RUN_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_MODEL, default=MODEL_A): vol.All(
            vol.Coerce(str), vol.Upper, vol.In(MODEL_KINDS)
        ),
        vol.Optional(CONF_AUGMENT, default=True): vol.Boolean(),
        vol.Optional(CONF_EPOCHS, default=DEFAULT_EPOCHS): vol.All(
            vol.Coerce(int), vol.Range(min=0)
        ),
        vol.Optional(CONF_BATCH_SIZE, default=DEFAULT_BATCH_SIZE): vol.All(
            vol.Coerce(int), vol.Range(min=1)
        ),
        vol.Optional(CONF_LR0, default=None): vol.Any(
            None, vol.All(vol.Coerce(float), vol.Range(min=0.0))
        ),
        vol.Optional(CONF_DROP_RATE, default=DEFAULT_DROP_RATE): vol.All(
            vol.Coerce(float), vol.Range(min=0.0, max=1.0, min_included=False)
        ),
        vol.Optional(CONF_EPOCH_DROP, default=DEFAULT_EPOCH_DROP): vol.All(
            vol.Coerce(int), vol.Range(min=1)
        ),
        vol.Optional(CONF_SEED, default=0): vol.All(vol.Coerce(int), vol.Range(min=0)),
        vol.Optional(CONF_CORPUS, default=None): vol.Any(None, vol.Coerce(str)),
        vol.Optional(CONF_OUT, default=None): vol.Any(None, vol.Coerce(str)),
        vol.Optional(CONF_IMAGE_SIZE, default=DEFAULT_IMAGE_SIZE): vol.All(
            vol.Coerce(int), vol.Range(min=MIN_IMAGE_SIZE, max=MAX_IMAGE_SIZE)
        ),
        vol.Optional(CONF_TRAIN_FRAC, default=DEFAULT_TRAIN_FRAC): vol.All(
            vol.Coerce(float),
            vol.Range(min=0.0, max=1.0, min_included=False, max_included=False),
        ),
        vol.Optional(CONF_ENSEMBLE, default=list): [vol.Coerce(str)],
        vol.Optional(CONF_WORKERS, default=1): vol.All(
            vol.Coerce(int), vol.Range(min=1)
        ),
        vol.Optional(CONF_ROTATION_DEG, default=AUG_ROTATION_DEG): vol.All(
            vol.Coerce(float), vol.Range(min=0.0, max=180.0)
        ),
        vol.Optional(CONF_SHEAR_FRAC, default=AUG_SHEAR_FRAC): _fraction(
            upper=1.0, upper_included=True
        ),
        vol.Optional(CONF_ZOOM_FRAC, default=AUG_ZOOM_FRAC): _fraction(
            upper=1.0, upper_included=False
        ),
        vol.Optional(CONF_SHIFT_FRAC, default=AUG_SHIFT_FRAC): _fraction(
            upper=1.0, upper_included=True
        ),
    },
    extra=vol.PREVENT_EXTRA,
)


@dataclass(slots=True)
class RunConfig:
    """Effective configuration of one command."""

    model: str = MODEL_A
    augment: bool = True
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    lr0: float = DEFAULT_LR0[MODEL_A]
    drop_rate: float = DEFAULT_DROP_RATE
    epoch_drop: int = DEFAULT_EPOCH_DROP
    seed: int = 0
    corpus: str | None = None
    out: str | None = None
    image_size: int = DEFAULT_IMAGE_SIZE
    train_frac: float = DEFAULT_TRAIN_FRAC
    ensemble: list[str] = field(default_factory=list)
    workers: int = 1
    rotation_deg: float = AUG_ROTATION_DEG
    shear_frac: float = AUG_SHEAR_FRAC
    zoom_frac: float = AUG_ZOOM_FRAC
    shift_frac: float = AUG_SHIFT_FRAC

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            rotation_deg=self.rotation_deg,
            shear_frac=self.shear_frac,
            zoom_frac=self.zoom_frac,
            shift_frac=self.shift_frac,
            enabled=self.augment,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr0=self.lr0,
            drop_rate=self.drop_rate,
            epoch_drop=self.epoch_drop,
            seed=self.seed,
            augment=self.augment_config(),
            workers=self.workers,
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _field_of(err: vol.Invalid) -> str:
    return ".".join(str(part) for part in err.path) or "config"


def validate_run_config(values: Mapping[str, Any]) -> RunConfig:
    """Apply the schema and per-model defaults to merged values."""

    try:
        validated = RUN_SCHEMA(dict(values))
    except vol.MultipleInvalid as err:
        first = err.errors[0]
        raise ConfigError(first.error_message, field=_field_of(first)) from err
    except vol.Invalid as err:
        raise ConfigError(err.error_message, field=_field_of(err)) from err
    if validated[CONF_LR0] is None:
        validated[CONF_LR0] = DEFAULT_LR0[validated[CONF_MODEL]]
    return RunConfig(**validated)


def read_config_file(path: str | Path) -> dict[str, Any]:
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err}", field="config") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path} is not valid JSON: {err}", field="config") from err
    if not isinstance(document, dict):
        raise ConfigError(f"{path} must hold a JSON object", field="config")
    return document


def load_run_config(
    flags: Mapping[str, Any] | None = None,
    config_path: str | Path | None = None,
    *,
    fallbacks: Mapping[str, Any] | None = None,
) -> RunConfig:
    """Merge defaults, fallbacks, the optional JSON file and explicit flags.

    ``fallbacks`` sit between the built-in defaults and the config file (the
    evaluate command passes the split settings recorded in a checkpoint).
    Flags whose value is ``None`` count as not given.
    """

    merged: dict[str, Any] = dict(fallbacks or {})
    if config_path is not None:
        from_file = read_config_file(config_path)
        merged.update(from_file)
        _LOGGER.debug("Read %d setting(s) from %s", len(from_file), config_path)
    for key, value in (flags or {}).items():
        if value is not None:
            merged[key] = value
    return validate_run_config(merged)
