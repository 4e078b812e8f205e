"""Command line: ``train``, ``evaluate``, ``gen-toy`` and ``inspect``.

Every artifact is written through a temporary sibling and renamed, so a
failed command leaves no partial file under a final name. Errors print as
``error[<key>]: <message>`` on stderr and select the exit code of their kind
(2 configuration, 3 corpus, 4 checkpoint, 5 numerical, 1 anything else).
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from .checkpoint import read_checkpoint, read_manifest, save_checkpoint
from .config import RunConfig, load_run_config
from .const import (
    CHECKPOINT_SUFFIX,
    CONF_AUGMENT,
    CONF_BATCH_SIZE,
    CONF_CORPUS,
    CONF_ENSEMBLE,
    CONF_EPOCHS,
    CONF_IMAGE_SIZE,
    CONF_LR0,
    CONF_MODEL,
    CONF_OUT,
    CONF_SEED,
    CONF_TRAIN_FRAC,
    CONF_WORKERS,
    CONFUSION_FILE,
    CURVES_FILE,
    DEFAULT_IMAGE_SIZE,
    DOMAIN,
    METRICS_FILE,
    MODEL_KINDS,
    PER_CLASS_FILE,
)
from .data import load_dataset
from .diagnostics import summarize_checkpoint
from .errors import ConfigError, CorpusError, GlyphNetError
from .helpers import atomic_write_text, dumps_stable, run_id_for
from .metrics import MetricsReport, confusion_csv, curves_csv, per_class_csv
from .models import EnsembleSpec, InputSpec, ModelGraph, build_model
from .toy import generate_toy_corpus
from .training import evaluate, fit

_LOGGER = logging.getLogger(__name__)


def checkpoint_name(kind: str) -> str:
    return f"model_{kind.lower()}{CHECKPOINT_SUFFIX}"


def _require(value: str | None, name: str) -> Path:
    if not value:
        raise ConfigError("is required for this command", field=name)
    return Path(value)


def _log_report(report: MetricsReport) -> None:
    _LOGGER.info(
        "Test top-1 %.4f, top-3 %.4f, loss %.4f", report.top1, report.top3, report.loss
    )


def _write_report_files(out_dir: Path, report: MetricsReport) -> None:
    atomic_write_text(out_dir / PER_CLASS_FILE, per_class_csv(report))
    atomic_write_text(out_dir / CONFUSION_FILE, confusion_csv(report))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------
def cmd_train(cfg: RunConfig) -> dict[str, Any]:
    """Train one model, save its checkpoint and write the metrics files."""

    corpus = _require(cfg.corpus, CONF_CORPUS)
    out_dir = _require(cfg.out, CONF_OUT)
    train_cfg = cfg.train_config()
    dataset = load_dataset(corpus, cfg.image_size, cfg.train_frac, cfg.seed)
    model = build_model(
        cfg.model,
        dataset.num_classes,
        InputSpec.square(cfg.image_size),
        seed=cfg.seed,
    )
    _LOGGER.info(
        "Training model %s (%d parameters) on %d images, %d classes",
        cfg.model,
        model.param_count(),
        len(dataset.train),
        dataset.num_classes,
    )
    model, history = fit(model, dataset, train_cfg)
    report = evaluate(model, dataset.test, class_names=dataset.class_names)

    config_echo = cfg.to_dict()
    run_id = run_id_for(config_echo)
    provenance = {
        "run_id": run_id,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "augment": cfg.augment,
        "lr0": cfg.lr0,
        "batch_size": cfg.batch_size,
        "image_size": cfg.image_size,
        "train_frac": cfg.train_frac,
        "class_names": dataset.class_names,
    }
    ckpt_path = save_checkpoint(model, out_dir / checkpoint_name(cfg.model), provenance)

    document = {
        "run_id": run_id,
        "command": "train",
        "config": config_echo,
        "model": {"kind": cfg.model, "param_count": model.param_count()},
        "class_names": dataset.class_names,
        "checkpoint": ckpt_path.name,
        "curves": history.to_dict(),
        "test": report.to_dict(),
    }
    atomic_write_text(out_dir / METRICS_FILE, dumps_stable(document))
    atomic_write_text(out_dir / CURVES_FILE, curves_csv(history.to_dict()))
    _write_report_files(out_dir, report)
    _log_report(report)
    return document


def _check_classes(predictor: ModelGraph | EnsembleSpec, num_classes: int) -> None:
    if predictor.num_classes != num_classes:
        raise CorpusError(
            f"checkpoint expects {predictor.num_classes} classes, corpus has {num_classes}"
        )


def cmd_evaluate(
    cfg: RunConfig, checkpoints: Sequence[str], *, ensemble: bool
) -> dict[str, Any]:
    """Evaluate one checkpoint or the softmax average of several."""

    corpus = _require(cfg.corpus, CONF_CORPUS)
    if not checkpoints:
        raise ConfigError("give --checkpoint or --ensemble", field=CONF_ENSEMBLE)
    loaded = [read_checkpoint(path) for path in checkpoints]
    dataset = load_dataset(corpus, cfg.image_size, cfg.train_frac, cfg.seed)

    predictor: ModelGraph | EnsembleSpec
    if ensemble:
        predictor = EnsembleSpec(
            [c.model for c in loaded],
            sources=[str(path) for path in checkpoints],
            workers=cfg.workers,
        )
    else:
        if len(loaded) > 1:
            raise ConfigError(
                "use --ensemble for several checkpoints", field=CONF_ENSEMBLE
            )
        predictor = loaded[0].model
    _check_classes(predictor, dataset.num_classes)
    report = evaluate(predictor, dataset.test, class_names=dataset.class_names)

    config_echo = cfg.to_dict()
    document = {
        "run_id": run_id_for({"config": config_echo, "checkpoints": list(checkpoints)}),
        "command": "evaluate",
        "config": config_echo,
        "checkpoints": [str(path) for path in checkpoints],
        "ensemble": ensemble,
        "class_names": dataset.class_names,
        "test": report.to_dict(),
    }
    if cfg.out:
        out_dir = Path(cfg.out)
        atomic_write_text(out_dir / METRICS_FILE, dumps_stable(document))
        _write_report_files(out_dir, report)
    _log_report(report)
    return document


def cmd_gen_toy(
    out_dir: str, classes: int, per_class: int, seed: int, image_size: int
) -> int:
    return generate_toy_corpus(
        out_dir, classes, per_class, seed, image_size=image_size
    )


def cmd_inspect(path: str, *, include_tensors: bool = False) -> dict[str, Any]:
    return summarize_checkpoint(path, include_tensors=include_tensors)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------
def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--corpus", help="corpus root (class-per-directory layout)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="split, shuffle and init seed")
    parser.add_argument("--image-size", dest=CONF_IMAGE_SIZE, type=int)
    parser.add_argument("--train-frac", dest=CONF_TRAIN_FRAC, type=float)
    parser.add_argument("--workers", type=int, help="threads for augmentation/ensembles")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=DOMAIN, description="Train and evaluate handwritten glyph classifiers."
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")
    parser.add_argument("--config", help="JSON file with run settings")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="train one model")
    train.add_argument("--model", type=str.upper, choices=MODEL_KINDS)
    train.add_argument(
        "--augment", action=argparse.BooleanOptionalAction, default=None
    )
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", dest=CONF_BATCH_SIZE, type=int)
    train.add_argument("--lr0", type=float, help="initial learning rate")
    _add_run_flags(train)

    evaluate_cmd = commands.add_parser("evaluate", help="evaluate checkpoints")
    evaluate_cmd.add_argument("--checkpoint", help="single checkpoint file")
    evaluate_cmd.add_argument(
        "--ensemble", nargs="+", default=None, metavar="CKPT",
        help="average the softmax outputs of these checkpoints",
    )
    _add_run_flags(evaluate_cmd)

    toy = commands.add_parser("gen-toy", help="write a synthetic glyph corpus")
    toy.add_argument("--classes", type=int, default=10)
    toy.add_argument("--per-class", dest="per_class", type=int, default=200)
    toy.add_argument("--seed", type=int, default=0)
    toy.add_argument(
        "--image-size", dest=CONF_IMAGE_SIZE, type=int, default=DEFAULT_IMAGE_SIZE
    )
    toy.add_argument("--out", required=True)

    inspect = commands.add_parser("inspect", help="print a checkpoint manifest")
    inspect.add_argument("checkpoint")
    inspect.add_argument("--tensors", action="store_true", help="list every tensor")
    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger(DOMAIN).setLevel(level)


def _flags(args: argparse.Namespace, keys: Sequence[str]) -> dict[str, Any]:
    return {key: getattr(args, key, None) for key in keys}


_TRAIN_KEYS = (
    CONF_MODEL,
    CONF_AUGMENT,
    CONF_EPOCHS,
    CONF_BATCH_SIZE,
    CONF_LR0,
    CONF_SEED,
    CONF_CORPUS,
    CONF_OUT,
    CONF_IMAGE_SIZE,
    CONF_TRAIN_FRAC,
    CONF_WORKERS,
)
_EVALUATE_KEYS = (
    CONF_SEED,
    CONF_CORPUS,
    CONF_OUT,
    CONF_IMAGE_SIZE,
    CONF_TRAIN_FRAC,
    CONF_WORKERS,
    CONF_ENSEMBLE,
)


def _evaluate_fallbacks(paths: Sequence[str]) -> dict[str, Any]:
    """Split settings recorded in the first checkpoint's manifest."""
    provenance = read_manifest(paths[0]).get("provenance", {}) if paths else {}
    return {
        key: provenance[key]
        for key in (CONF_SEED, CONF_IMAGE_SIZE, CONF_TRAIN_FRAC)
        if key in provenance
    }


def run(args: argparse.Namespace) -> int:
    if args.command == "train":
        cfg = load_run_config(_flags(args, _TRAIN_KEYS), args.config)
        cmd_train(cfg)
    elif args.command == "evaluate":
        paths = ([args.checkpoint] if args.checkpoint else []) + (args.ensemble or [])
        cfg = load_run_config(
            _flags(args, _EVALUATE_KEYS),
            args.config,
            fallbacks=_evaluate_fallbacks(paths),
        )
        document = cmd_evaluate(cfg, paths, ensemble=args.ensemble is not None)
        if not cfg.out:
            sys.stdout.write(dumps_stable(document["test"]))
    elif args.command == "gen-toy":
        count = cmd_gen_toy(
            args.out, args.classes, args.per_class, args.seed, args.image_size
        )
        _LOGGER.info("Generated %d images", count)
    else:
        summary = cmd_inspect(args.checkpoint, include_tensors=args.tensors)
        sys.stdout.write(dumps_stable(summary))
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args)
    try:
        return run(args)
    except GlyphNetError as err:
        _LOGGER.debug("Command failed", exc_info=True)
        sys.stderr.write(f"error[{err.key}]: {err}\n")
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
