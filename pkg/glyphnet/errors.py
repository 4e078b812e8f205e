"""Error kinds raised by the engine, the data pipeline and the CLI.

Every error carries a stable ``key`` so the command line can report
``error[<key>]: <message>`` and map the kind to an exit code without
parsing messages.
"""

from __future__ import annotations


class GlyphNetError(Exception):
    """Base class for all errors raised by glyphnet."""

    key = "error"
    exit_code = 1


class DimensionError(GlyphNetError, ValueError):
    """Tensor shapes do not agree with an operation's contract."""

    key = "dimension_mismatch"


class NumericalError(GlyphNetError, ArithmeticError):
    """A non-finite value reached an operation that rejects it."""

    key = "non_finite"
    exit_code = 5


class DivergenceError(NumericalError):
    """Training produced a non-finite loss or gradient."""

    key = "diverged"


class ConfigError(GlyphNetError, ValueError):
    """A configuration field is invalid."""

    key = "invalid_config"
    exit_code = 2

    def __init__(self, message: str, *, field: str | None = None) -> None:
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class CorpusError(GlyphNetError):
    """The image corpus is missing, empty or malformed."""

    key = "corpus"
    exit_code = 3


class EnsembleMismatchError(GlyphNetError, ValueError):
    """Ensemble members disagree on class count or input spec."""

    key = "ensemble_mismatch"

    def __init__(self, message: str, *, offenders: list[str] | None = None) -> None:
        offenders = list(offenders or [])
        if offenders:
            message = f"{message} (offending: {', '.join(offenders)})"
        super().__init__(message)
        self.offenders = offenders


class CheckpointError(GlyphNetError):
    """Checkpoint could not be written or read."""

    key = "checkpoint"
    exit_code = 4


class CheckpointFormatError(CheckpointError):
    """Wrong magic or unsupported version."""

    key = "checkpoint_format"


class CheckpointTruncatedError(CheckpointError):
    """File ended before the declared manifest or payload."""

    key = "checkpoint_truncated"


class CheckpointIntegrityError(CheckpointError):
    """Checksum failure or manifest inconsistent with the architecture."""

    key = "checkpoint_integrity"
