"""Tests for checkpoint diagnostics."""

from __future__ import annotations

import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from glyphnet.checkpoint import save_checkpoint  # noqa: E402
from glyphnet.diagnostics import summarize_checkpoint  # noqa: E402


def test_summary_counts_parameters_and_buffers(build_tiny, tmp_path: Path) -> None:
    """Trainable weights and running statistics are reported apart."""

    model = build_tiny("C")
    path = save_checkpoint(model, tmp_path / "c.ckpt", {"seed": 1})
    summary = summarize_checkpoint(path)
    total = model.param_count(trainable_only=False)
    assert summary["trainable_parameters"] == model.param_count()
    assert summary["running_statistics"] == total - model.param_count()
    assert summary["payload_bytes"] == 4 * total
    assert summary["file_bytes"] == path.stat().st_size
    assert summary["payload_ok"] is True
    assert summary["architecture"]["kind"] == "C"
    assert summary["provenance"] == {"seed": 1}
    assert "tensors" not in summary
    assert sum(summary["parameters_per_block"].values()) == model.param_count()
    assert list(summary["parameters_per_block"])[0] == "stem"


def test_summary_lists_tensors_on_request(build_tiny, tmp_path: Path) -> None:
    """``include_tensors`` adds the manifest entries in registry order."""

    model = build_tiny("C")
    path = save_checkpoint(model, tmp_path / "c.ckpt")
    summary = summarize_checkpoint(path, include_tensors=True)
    assert [t["name"] for t in summary["tensors"]] == list(model.named_parameters())


def test_damaged_payload_is_flagged_not_fatal(build_tiny, tmp_path: Path) -> None:
    """A payload checksum failure shows up as ``payload_ok`` False."""

    path = save_checkpoint(build_tiny("C"), tmp_path / "c.ckpt")
    blob = bytearray(path.read_bytes())
    blob[-1] ^= 0x01
    path.write_bytes(bytes(blob))
    assert summarize_checkpoint(path)["payload_ok"] is False
