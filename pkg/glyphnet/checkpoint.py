"""Binary checkpoint persistence.

File layout (all integers little-endian unsigned 32-bit)::

    magic "GNET" | version | manifest_len | manifest_crc32 | manifest | payload

The manifest is UTF-8 JSON holding the architecture descriptor, the training
provenance, the payload checksum and one entry per tensor
(``name``, ``shape``, ``offset``, ``nbytes``). The payload is the
concatenation of every parameter and running statistic as little-endian
32-bit reals, in registry order.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .const import CHECKPOINT_DTYPE, CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from .errors import (
    CheckpointError,
    CheckpointFormatError,
    CheckpointIntegrityError,
    CheckpointTruncatedError,
    GlyphNetError,
)
from .helpers import atomic_write_bytes, dumps_stable
from .models import ArchConfig, InputSpec, ModelGraph, build_model

_LOGGER = logging.getLogger(__name__)

_HEADER = struct.Struct("<4sIII")


@dataclass(slots=True)
class Checkpoint:
    model: ModelGraph
    manifest: dict[str, Any]

    @property
    def provenance(self) -> dict[str, Any]:
        return self.manifest.get("provenance", {})


def encode_checkpoint(
    model: ModelGraph, provenance: dict[str, Any] | None = None
) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, param in model.named_parameters().items():
        raw = np.ascontiguousarray(param.data, dtype=CHECKPOINT_DTYPE).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(param.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "architecture": model.descriptor(),
        "provenance": provenance or {},
        "dtype": CHECKPOINT_DTYPE,
        "tensors": entries,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    manifest_bytes = dumps_stable(manifest, indent=None).encode("utf-8")
    header = _HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        len(manifest_bytes),
        zlib.crc32(manifest_bytes),
    )
    return header + manifest_bytes + payload


def save_checkpoint(
    model: ModelGraph, path: str | Path, provenance: dict[str, Any] | None = None
) -> Path:
    """Atomically write ``model`` to ``path``."""

    blob = encode_checkpoint(model, provenance)
    try:
        target = atomic_write_bytes(path, blob)
    except OSError as err:
        raise CheckpointError(f"cannot write checkpoint {path}: {err}") from err
    _LOGGER.info("Saved %s checkpoint (%d bytes) to %s", model.kind, len(blob), target)
    return target


def _split_blob(blob: bytes, source: str) -> tuple[dict[str, Any], bytes]:
    if len(blob) < len(CHECKPOINT_MAGIC):
        raise CheckpointTruncatedError(f"{source}: file is only {len(blob)} bytes")
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{source}: not a checkpoint (bad magic)")
    if len(blob) < _HEADER.size:
        raise CheckpointTruncatedError(f"{source}: header is incomplete")
    _, version, manifest_len, manifest_crc = _HEADER.unpack_from(blob)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"{source}: unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )
    end = _HEADER.size + manifest_len
    if len(blob) < end:
        raise CheckpointTruncatedError(
            f"{source}: manifest needs {manifest_len} bytes, file ends early"
        )
    manifest_bytes = blob[_HEADER.size : end]
    if zlib.crc32(manifest_bytes) != manifest_crc:
        raise CheckpointIntegrityError(f"{source}: manifest checksum mismatch")
    try:
        manifest = json.loads(manifest_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointIntegrityError(f"{source}: manifest is not valid JSON") from err
    if not isinstance(manifest, dict):
        raise CheckpointIntegrityError(f"{source}: manifest is not an object")
    return manifest, blob[end:]


def read_manifest(path: str | Path) -> dict[str, Any]:
    """Validated manifest of a checkpoint file, without building the model."""

    return _split_blob(_read(path), str(path))[0]


def _read(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err


def _rebuild(manifest: dict[str, Any], source: str) -> ModelGraph:
    try:
        arch = manifest["architecture"]
        return build_model(
            arch["kind"],
            int(arch["num_classes"]),
            InputSpec(*(int(v) for v in arch["input_spec"])),
            arch=ArchConfig.from_dict(arch["arch"]),
            seed=int(arch.get("seed", 0)),
        )
    except (KeyError, TypeError, ValueError) as err:
        raise CheckpointIntegrityError(
            f"{source}: architecture descriptor is unusable: {err}"
        ) from err
    except GlyphNetError as err:
        raise CheckpointIntegrityError(
            f"{source}: architecture descriptor is invalid: {err}"
        ) from err


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    manifest, payload = _split_blob(blob, source)
    expected = manifest.get("payload_bytes")
    if not isinstance(expected, int):
        raise CheckpointIntegrityError(f"{source}: manifest lacks payload_bytes")
    if len(payload) < expected:
        raise CheckpointTruncatedError(
            f"{source}: payload has {len(payload)} of {expected} bytes"
        )
    if len(payload) > expected:
        raise CheckpointIntegrityError(
            f"{source}: {len(payload) - expected} trailing bytes after payload"
        )
    if zlib.crc32(payload) != manifest.get("payload_crc32"):
        raise CheckpointIntegrityError(f"{source}: payload checksum mismatch")

    model = _rebuild(manifest, source)
    params = model.named_parameters()
    entries = manifest.get("tensors") or []
    names = [entry.get("name") for entry in entries]
    if sorted(names) != sorted(params):
        missing = sorted(set(params) - set(names))
        extra = sorted(set(names) - set(params))
        raise CheckpointIntegrityError(
            f"{source}: tensor names disagree with the architecture "
            f"(missing {missing[:5]}, unexpected {extra[:5]})"
        )

    itemsize = np.dtype(CHECKPOINT_DTYPE).itemsize
    for entry in entries:
        name = entry["name"]
        shape = tuple(entry.get("shape", ()))
        offset = entry.get("offset", -1)
        nbytes = entry.get("nbytes", -1)
        if shape != params[name].shape:
            raise CheckpointIntegrityError(
                f"{source}: {name} has shape {shape}, architecture needs "
                f"{params[name].shape}"
            )
        if nbytes != int(np.prod(shape, dtype=np.int64)) * itemsize or not (
            0 <= offset and offset + nbytes <= len(payload)
        ):
            raise CheckpointIntegrityError(f"{source}: {name} has a bad byte range")
        values = np.frombuffer(
            payload, dtype=CHECKPOINT_DTYPE, count=nbytes // itemsize, offset=offset
        )
        params[name].assign(values.reshape(shape))

    model.eval()
    return Checkpoint(model, manifest)


def read_checkpoint(path: str | Path) -> Checkpoint:
    checkpoint = decode_checkpoint(_read(path), str(path))
    _LOGGER.debug("Loaded %r from %s", checkpoint.model, path)
    return checkpoint


def load_checkpoint(path: str | Path) -> ModelGraph:
    """Rebuild the saved model in infer mode with its stored weights."""

    return read_checkpoint(path).model
