"""Tests for seeded generators, atomic writes and stable JSON."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from glyphnet.helpers import (  # noqa: E402
    atomic_write_bytes,
    atomic_write_text,
    derive_rng,
    dumps_stable,
    run_id_for,
)


def test_derive_rng_streams_depend_on_every_key() -> None:
    """Equal keys repeat the stream; any differing key changes it."""

    first = derive_rng(7, 1, 2).random(4)
    np.testing.assert_array_equal(first, derive_rng(7, 1, 2).random(4))
    assert not np.array_equal(first, derive_rng(7, 2, 1).random(4))
    assert not np.array_equal(first, derive_rng(8, 1, 2).random(4))


def test_atomic_write_replaces_the_target(tmp_path: Path) -> None:
    """Content lands under the final name and no temporary file remains."""

    target = tmp_path / "nested" / "out.bin"
    atomic_write_bytes(target, b"old")
    assert atomic_write_bytes(target, b"new") == target
    assert target.read_bytes() == b"new"
    assert [p.name for p in target.parent.iterdir()] == ["out.bin"]


def test_failed_atomic_write_leaves_no_partial_file(
    tmp_path: Path, monkeypatch: pytest.MonkeyPatch
) -> None:
    """A failure before the rename keeps the previous content."""

    target = tmp_path / "metrics.json"
    atomic_write_text(target, "before")

    def _boom(*_args: object) -> None:
        raise OSError("disk full")

    monkeypatch.setattr("glyphnet.helpers.os.replace", _boom)
    with pytest.raises(OSError):
        atomic_write_text(target, "after")
    assert target.read_text() == "before"
    assert [p.name for p in tmp_path.iterdir()] == ["metrics.json"]


def test_dumps_stable_sorts_keys_and_converts_numpy() -> None:
    """Key order never matters and numpy scalars serialize as plain numbers."""

    a = dumps_stable({"b": np.int64(2), "a": np.float32(0.5), "c": np.arange(2)})
    b = dumps_stable({"c": [0, 1], "a": 0.5, "b": 2})
    assert a == b
    assert a.endswith("\n")
    assert json.loads(a) == {"a": 0.5, "b": 2, "c": [0, 1]}


def test_run_id_is_stable_and_short() -> None:
    """Equal configurations share an id; a changed field changes it."""

    config = {"model": "A", "seed": 0}
    assert run_id_for(config) == run_id_for(dict(reversed(config.items())))
    assert len(run_id_for(config)) == 12
    assert run_id_for(config) != run_id_for({"model": "A", "seed": 1})
