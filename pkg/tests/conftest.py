"""Shared pytest fixtures: precision switch, tiny models and a toy corpus."""

from __future__ import annotations

import sys
from collections.abc import Callable, Iterator
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from glyphnet.blocks import InceptionFilters  # noqa: E402
from glyphnet.models import ArchConfig, InputSpec, ModelGraph, build_model  # noqa: E402
from glyphnet.tensor import precision  # noqa: E402
from glyphnet.toy import generate_toy_corpus  # noqa: E402

# Narrow variants of the three architectures; same topology, few channels.
TINY_ARCH = {
    "A": ArchConfig(
        stem_filters=4,
        inception=InceptionFilters(2, 2, 2, 2, 2),
        residual_filters=(4, 6, 8),
        dense_units=(16, 8),
        dropout=0.2,
    ),
    "B": ArchConfig(residual_filters=(2, 3, 4, 5, 6), dense_units=(8, 8), dropout=0.1),
    "C": ArchConfig(
        stem_filters=4, growth_rate=2, dense_blocks=(2, 2), compression=0.5, dropout=0.0
    ),
}

TinyBuilder = Callable[..., ModelGraph]


@pytest.fixture
def float64() -> Iterator[None]:
    """Run the engine in 64-bit mode for oracles and finite differences."""

    with precision(np.float64):
        yield


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def build_tiny() -> TinyBuilder:
    """Factory for narrow models: ``build_tiny(kind, num_classes=3, size=16)``."""

    def _build(
        kind: str, num_classes: int = 3, size: int = 16, seed: int = 0
    ) -> ModelGraph:
        return build_model(
            kind,
            num_classes,
            InputSpec.square(size),
            arch=TINY_ARCH[kind],
            seed=seed,
        )

    return _build


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """Three classes of six 16x16 glyphs."""

    root = tmp_path_factory.mktemp("toy")
    generate_toy_corpus(root, classes=3, per_class=6, seed=3, image_size=16)
    return root
