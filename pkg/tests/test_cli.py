"""Tests for the command line entry point."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from glyphnet import cli  # noqa: E402
from glyphnet.cli import build_parser, checkpoint_name, main  # noqa: E402

TRAIN_FLAGS = ["--model", "c", "--epochs", "1", "--batch-size", "8", "--image-size", "16"]


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory: pytest.TempPathFactory, toy_corpus: Path) -> Path:
    """Output directory of a one-epoch Model C run on the toy corpus."""

    out = tmp_path_factory.mktemp("run")
    assert main(["-q", "train", *TRAIN_FLAGS, "--corpus", str(toy_corpus), "--out", str(out)]) == 0
    return out


def _metrics(directory: Path) -> dict:
    return json.loads((directory / "metrics.json").read_text(encoding="utf-8"))


def test_checkpoint_name() -> None:
    """One checkpoint file per model kind."""

    assert checkpoint_name("A") == "model_a.ckpt"


def test_parser_normalizes_model_kind() -> None:
    """Model kinds are case-insensitive on the command line."""

    args = build_parser().parse_args(["train", "--model", "b", "--no-augment"])
    assert args.model == "B"
    assert args.augment is False


def test_gen_toy_writes_the_corpus(tmp_path: Path) -> None:
    """gen-toy exits 0 and writes classes x per-class images."""

    out = tmp_path / "toy"
    code = main(
        ["-q", "gen-toy", "--classes", "3", "--per-class", "2", "--image-size", "16", "--out", str(out)]
    )
    assert code == 0
    assert len(list(out.rglob("*.png"))) == 6


def test_train_writes_every_artifact(trained_run: Path) -> None:
    """Checkpoint, metrics document and the three CSV files."""

    names = {p.name for p in trained_run.iterdir()}
    assert {
        "model_c.ckpt",
        "metrics.json",
        "curves.csv",
        "per_class.csv",
        "confusion_matrix.csv",
    } <= names
    document = _metrics(trained_run)
    assert document["command"] == "train"
    assert document["model"]["kind"] == "C"
    assert document["checkpoint"] == "model_c.ckpt"
    assert document["class_names"] == ["c00", "c01", "c02"]
    assert document["curves"]["epoch"] == [1]
    assert document["test"]["num_samples"] == 6
    assert document["config"]["lr0"] == 0.001
    assert len(document["run_id"]) == 12


def test_evaluate_reproduces_the_training_metrics(
    trained_run: Path, toy_corpus: Path, tmp_path: Path
) -> None:
    """Reloading the checkpoint gives the same test metrics, twice over."""

    ckpt = trained_run / "model_c.ckpt"
    first, second = tmp_path / "e1", tmp_path / "e2"
    for out in (first, second):
        code = main(
            ["-q", "evaluate", "--checkpoint", str(ckpt), "--corpus", str(toy_corpus), "--out", str(out)]
        )
        assert code == 0
    assert _metrics(first)["test"] == _metrics(trained_run)["test"]
    assert (first / "metrics.json").read_bytes() == (second / "metrics.json").read_bytes()


def test_ensemble_of_one_model_twice(trained_run: Path, toy_corpus: Path, tmp_path: Path) -> None:
    """Two copies of a member average to the member itself."""

    ckpt = str(trained_run / "model_c.ckpt")
    out = tmp_path / "ens"
    code = main(
        ["-q", "evaluate", "--ensemble", ckpt, ckpt, "--corpus", str(toy_corpus), "--out", str(out)]
    )
    assert code == 0
    test = _metrics(out)["test"]
    single = _metrics(trained_run)["test"]
    assert test["top1"] == single["top1"]
    assert test["loss"] == single["loss"]
    assert [m["source"] for m in test["members"]] == [ckpt, ckpt]


def test_evaluate_builds_each_checkpoint_once(
    trained_run: Path, toy_corpus: Path, monkeypatch: pytest.MonkeyPatch
) -> None:
    """Split fallbacks come from the manifest; only the evaluation rebuilds models."""

    ckpt = str(trained_run / "model_c.ckpt")
    loads: list[str] = []
    original = cli.read_checkpoint

    def counting(path: str):
        loads.append(str(path))
        return original(path)

    monkeypatch.setattr(cli, "read_checkpoint", counting)
    argv = ["-q", "evaluate", "--ensemble", ckpt, ckpt, "--corpus", str(toy_corpus)]
    assert main(argv) == 0
    assert loads == [ckpt, ckpt]


def test_evaluate_without_out_prints_metrics(
    trained_run: Path, toy_corpus: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    """The test metrics go to stdout as JSON."""

    ckpt = str(trained_run / "model_c.ckpt")
    assert main(["-q", "evaluate", "--checkpoint", ckpt, "--corpus", str(toy_corpus)]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["num_samples"] == 6


def test_inspect_prints_the_manifest(
    trained_run: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    """inspect shows architecture, provenance and payload health."""

    assert main(["inspect", str(trained_run / "model_c.ckpt")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["architecture"]["kind"] == "C"
    assert summary["provenance"]["image_size"] == 16
    assert summary["payload_ok"] is True


def test_config_file_supplies_settings(toy_corpus: Path, tmp_path: Path) -> None:
    """Settings from --config apply; zero epochs still write a checkpoint."""

    config = tmp_path / "run.json"
    config.write_text(json.dumps({"model": "C", "epochs": 0, "image_size": 16}), encoding="utf-8")
    out = tmp_path / "out"
    code = main(["-q", "--config", str(config), "train", "--corpus", str(toy_corpus), "--out", str(out)])
    assert code == 0
    assert (out / "model_c.ckpt").is_file()
    assert _metrics(out)["curves"]["epoch"] == []


@pytest.mark.parametrize(
    ("argv", "code", "key"),
    [
        (["train", "--out", "unused"], 2, "invalid_config"),
        (["train", "--epochs", "-1", "--corpus", "x", "--out", "y"], 2, "invalid_config"),
        (["train", "--corpus", "{missing}", "--out", "{out}"], 3, "corpus"),
        (["inspect", "{garbage}"], 4, "checkpoint_format"),
        (["evaluate", "--corpus", "{missing}"], 2, "invalid_config"),
    ],
)
def test_errors_map_to_exit_codes(
    argv: list[str],
    code: int,
    key: str,
    tmp_path: Path,
    capsys: pytest.CaptureFixture[str],
) -> None:
    """Each error kind has its own exit code and ``error[key]`` prefix."""

    garbage = tmp_path / "garbage.ckpt"
    garbage.write_bytes(b"not a checkpoint at all")
    values = {
        "missing": str(tmp_path / "missing"),
        "out": str(tmp_path / "out"),
        "garbage": str(garbage),
    }
    resolved = [arg.format(**values) for arg in argv]
    assert main(["-q", *resolved]) == code
    assert capsys.readouterr().err.startswith(f"error[{key}]:")
