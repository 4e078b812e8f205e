"""Checkpoint diagnostics for the ``inspect`` command.

Reads only the header and manifest, so a checkpoint whose payload is damaged
still shows what it claims to contain. Payload consistency is reported as a
separate ``payload_ok`` flag.
"""

from __future__ import annotations

import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Any

import numpy as np

from .checkpoint import read_manifest
from .errors import CheckpointError

# Parameter names that are running statistics rather than learned weights.
_BUFFER_SUFFIXES = (".running_mean", ".running_var")


def _is_buffer(name: str) -> bool:
    return name.endswith(_BUFFER_SUFFIXES)


def _per_block(tensors: list[dict[str, Any]]) -> dict[str, int]:
    counts: OrderedDict[str, int] = OrderedDict()
    for entry in tensors:
        if _is_buffer(entry["name"]):
            continue
        block = entry["name"].split(".", 1)[0]
        counts[block] = counts.get(block, 0) + int(np.prod(entry["shape"], dtype=np.int64))
    return dict(counts)


def summarize_checkpoint(
    path: str | Path, *, include_tensors: bool = False
) -> dict[str, Any]:
    """Structured description of a checkpoint file."""

    path = Path(path)
    manifest = read_manifest(path)
    size = path.stat().st_size
    payload_bytes = int(manifest.get("payload_bytes", 0))
    tensors = list(manifest.get("tensors", []))

    trainable = sum(
        int(np.prod(t["shape"], dtype=np.int64))
        for t in tensors
        if not _is_buffer(t["name"])
    )
    buffers = sum(
        int(np.prod(t["shape"], dtype=np.int64)) for t in tensors if _is_buffer(t["name"])
    )
    try:
        payload = path.read_bytes()[size - payload_bytes :] if payload_bytes else b""
        payload_ok = zlib.crc32(payload) == manifest.get("payload_crc32")
    except OSError as err:
        raise CheckpointError(f"cannot read {path}: {err}") from err

    summary: dict[str, Any] = {
        "file": str(path),
        "file_bytes": size,
        "header_bytes": size - payload_bytes,
        "payload_bytes": payload_bytes,
        "payload_ok": payload_ok,
        "dtype": manifest.get("dtype"),
        "architecture": manifest.get("architecture", {}),
        "provenance": manifest.get("provenance", {}),
        "tensor_count": len(tensors),
        "trainable_parameters": trainable,
        "running_statistics": buffers,
        "parameters_per_block": _per_block(tensors),
    }
    if include_tensors:
        summary["tensors"] = tensors
    return summary
