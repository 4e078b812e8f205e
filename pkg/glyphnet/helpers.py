"""Helpers for seeded generators, atomic artifact writes and stable JSON.

Seeded generators: `derive_rng` builds a numpy ``Generator`` from a base seed
plus any number of integer keys (epoch, sample index, layer index). Equal keys
always give equal streams, so serial and parallel consumers draw identical
numbers.

Atomic writes: `atomic_write_bytes` / `atomic_write_text` write to a temporary
file in the destination directory and rename on success; a failed command
never leaves a half-written artifact under the final name.

Stable JSON: `dumps_stable` sorts keys and fixes separators so equal inputs
produce byte-identical documents.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import numpy as np

_LOGGER = logging.getLogger(__name__)


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Return a generator seeded from ``seed`` and the ordered ``keys``."""

    entropy = [int(seed) & 0xFFFFFFFF, *(int(k) & 0xFFFFFFFF for k in keys)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def atomic_write_bytes(path: str | Path, payload: bytes) -> Path:
    """Write ``payload`` to ``path`` through a temporary sibling and rename."""

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(
        prefix=f".{target.name}.", suffix=".tmp", dir=target.parent
    )
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, target)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise
    _LOGGER.debug("Wrote %d bytes to %s", len(payload), target)
    return target


def atomic_write_text(path: str | Path, text: str) -> Path:
    """Text variant of `atomic_write_bytes` (UTF-8, ``\\n`` newlines)."""

    return atomic_write_bytes(path, text.encode("utf-8"))


def _json_default(value: Any) -> Any:
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def dumps_stable(document: Any, *, indent: int | None = 2) -> str:
    """Serialize ``document`` with sorted keys and a trailing newline."""

    return (
        json.dumps(
            document,
            sort_keys=True,
            indent=indent,
            default=_json_default,
            ensure_ascii=False,
        )
        + "\n"
    )


def run_id_for(config: Mapping[str, Any]) -> str:
    """Derive a short, stable identifier from an effective configuration."""

    digest = hashlib.sha256(dumps_stable(config, indent=None).encode("utf-8"))
    return digest.hexdigest()[:12]
