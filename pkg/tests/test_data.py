"""Tests for corpus loading, splitting, augmentation and batching."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from glyphnet.data import (  # noqa: E402
    AffineParams,
    AugmentConfig,
    LabeledImage,
    apply_affine,
    augment,
    batch_iter,
    load_corpus,
    load_dataset,
    split,
)
from glyphnet.errors import ConfigError, CorpusError  # noqa: E402


def _save_png(path: Path, pixels: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels.astype(np.uint8)).save(path)


def _glyph(size: int = 16) -> np.ndarray:
    """Bright square on a black background."""
    pixels = np.zeros((size, size), dtype=np.uint8)
    pixels[size // 4 : 3 * size // 4, size // 4 : 3 * size // 4] = 200
    return pixels


def _samples(per_class: int, classes: int = 2, size: int = 4) -> list[LabeledImage]:
    return [
        LabeledImage(np.full((1, size, size), i / 100.0), label, f"c{label}/{i}")
        for label in range(classes)
        for i in range(per_class)
    ]


def test_load_corpus_labels_follow_directory_order(tmp_path: Path) -> None:
    """Classes are sorted by directory name; every file becomes one sample."""

    for name in ("beta", "alpha"):
        for i in range(3):
            _save_png(tmp_path / name / f"{i}.png", _glyph())
    corpus = load_corpus(tmp_path, 16)
    assert corpus.class_names == ["alpha", "beta"]
    assert len(corpus.images) == 6
    assert [img.label for img in corpus.images] == [0, 0, 0, 1, 1, 1]
    assert corpus.images[0].source_id == "alpha/0.png"
    assert corpus.images[0].pixels.shape == (1, 16, 16)


def test_image_at_target_size_is_only_rescaled(tmp_path: Path) -> None:
    """Bright-on-dark input at the target size is divided by 255, nothing else."""

    raw = _glyph()
    _save_png(tmp_path / "a" / "x.png", raw)
    _save_png(tmp_path / "b" / "y.png", raw)
    corpus = load_corpus(tmp_path, 16)
    expected = (raw.astype(np.float64) / 255.0).astype(np.float32)
    np.testing.assert_array_equal(corpus.images[0].pixels[0], expected)


def test_dark_ink_on_white_is_inverted(tmp_path: Path) -> None:
    """A bright border flips polarity so the background becomes 0."""

    raw = 255 - _glyph()
    _save_png(tmp_path / "a" / "x.png", raw)
    corpus = load_corpus(tmp_path, 16)
    pixels = corpus.images[0].pixels[0]
    assert pixels[0, 0] == 0.0
    assert pixels[8, 8] == pytest.approx(200 / 255.0, abs=1e-6)


def test_non_square_images_are_letterboxed(tmp_path: Path) -> None:
    """An 8x16 image keeps its aspect ratio inside a zero 16x16 canvas."""

    _save_png(tmp_path / "a" / "wide.png", np.full((8, 16), 255))
    pixels = load_corpus(tmp_path, 16).images[0].pixels[0]
    assert not pixels[:4].any()
    assert not pixels[12:].any()
    np.testing.assert_allclose(pixels[4:12], 1.0, atol=1e-6)


def test_unreadable_files_are_skipped(tmp_path: Path, caplog) -> None:
    """A corrupt file is logged and counted, not fatal."""

    _save_png(tmp_path / "a" / "good.png", _glyph())
    (tmp_path / "a" / "bad.png").write_bytes(b"not an image")
    (tmp_path / "a" / "notes.txt").write_text("ignored")
    corpus = load_corpus(tmp_path, 16)
    assert len(corpus.images) == 1
    assert corpus.skipped == 1
    assert "bad.png" in caplog.text


def test_class_without_images_is_an_error(tmp_path: Path) -> None:
    """An empty class directory stops loading."""

    _save_png(tmp_path / "a" / "good.png", _glyph())
    (tmp_path / "b").mkdir()
    with pytest.raises(CorpusError, match="no readable images"):
        load_corpus(tmp_path, 16)


def test_missing_root_is_an_error(tmp_path: Path) -> None:
    """A corpus root must exist and hold class directories."""

    with pytest.raises(CorpusError):
        load_corpus(tmp_path / "missing", 16)
    with pytest.raises(CorpusError):
        load_corpus(tmp_path, 16)


def test_toy_corpus_loads_every_sample(toy_corpus: Path) -> None:
    """Three classes of six images."""

    corpus = load_corpus(toy_corpus, 16)
    assert corpus.class_names == ["c00", "c01", "c02"]
    assert len(corpus.images) == 18
    assert corpus.skipped == 0


def test_split_is_stratified_80_20() -> None:
    """100 images per class give exactly 80 train and 20 test per class."""

    images = _samples(100)
    result = split(images, 0.8, seed=1, class_names=["a", "b"])
    for label in (0, 1):
        assert sum(img.label == label for img in result.train) == 80
        assert sum(img.label == label for img in result.test) == 20
    ids = sorted(img.source_id for img in result.train + result.test)
    assert ids == sorted(img.source_id for img in images)


def test_split_is_deterministic_per_seed() -> None:
    """Equal seeds choose the same samples; another seed differs."""

    images = _samples(50)
    first = [img.source_id for img in split(images, 0.8, seed=3).test]
    second = [img.source_id for img in split(images, 0.8, seed=3).test]
    other = [img.source_id for img in split(images, 0.8, seed=4).test]
    assert first == second
    assert first != other


def test_split_keeps_one_sample_on_each_side() -> None:
    """Small classes still contribute to both sides."""

    result = split(_samples(2), 0.9, seed=0)
    assert len(result.train) == 2
    assert len(result.test) == 2


def test_split_rejects_singleton_classes_and_bad_fractions() -> None:
    """A class of one cannot be split; the fraction must lie strictly inside (0, 1)."""

    with pytest.raises(CorpusError):
        split(_samples(1), 0.8, seed=0)
    with pytest.raises(ConfigError, match="train_frac"):
        split(_samples(5), 1.0, seed=0)


def test_presplit_corpus_is_used_as_is(tmp_path: Path) -> None:
    """train/ and test/ subdirectories bypass the random split."""

    for side, count in (("train", 3), ("test", 2)):
        for name in ("a", "b"):
            for i in range(count):
                _save_png(tmp_path / side / name / f"{i}.png", _glyph())
    dataset = load_dataset(tmp_path, 16, 0.8, seed=0)
    assert dataset.presplit
    assert len(dataset.train) == 6
    assert len(dataset.test) == 4
    assert dataset.test[0].source_id == "test/a/0.png"


def test_presplit_class_sets_must_match(tmp_path: Path) -> None:
    """Train and test must name the same classes."""

    _save_png(tmp_path / "train" / "a" / "0.png", _glyph())
    _save_png(tmp_path / "test" / "b" / "0.png", _glyph())
    with pytest.raises(CorpusError):
        load_dataset(tmp_path, 16)


def test_zero_ranges_leave_images_untouched() -> None:
    """Augmentation with every range at 0 is the identity."""

    image = _samples(1, classes=1, size=8)[0]
    cfg = AugmentConfig(rotation_deg=0, shear_frac=0, zoom_frac=0, shift_frac=0)
    out = augment(image, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(out.pixels, image.pixels)


def test_pure_shift_moves_content_one_pixel() -> None:
    """A +1 pixel x-shift moves every column right and fills with 0."""

    pixels = np.random.default_rng(0).uniform(size=(1, 8, 8))
    out = apply_affine(pixels, AffineParams(shift_x=1.0))
    np.testing.assert_allclose(out[:, :, 1:], pixels[:, :, :-1], atol=1e-12)
    np.testing.assert_allclose(out[:, :, 0], 0.0, atol=1e-12)


def test_augment_is_seeded_and_keeps_label_and_range() -> None:
    """Same generator seed, same output; label and value range preserved."""

    image = LabeledImage(_glyph(32)[None].astype(np.float32) / 255.0, 7, "x")
    cfg = AugmentConfig()
    first = augment(image, cfg, np.random.default_rng(5))
    second = augment(image, cfg, np.random.default_rng(5))
    np.testing.assert_array_equal(first.pixels, second.pixels)
    assert first.label == 7
    assert first.pixels.shape == image.pixels.shape
    assert first.pixels.min() >= 0.0 and first.pixels.max() <= 1.0


def test_augment_roughly_preserves_ink_mass() -> None:
    """Without zoom a centered glyph keeps its ink within 15%."""

    pixels = np.zeros((1, 32, 32))
    pixels[0, 12:20, 12:20] = 1.0
    image = LabeledImage(pixels, 0, "x")
    cfg = AugmentConfig(zoom_frac=0.0)
    for seed in range(20):
        out = augment(image, cfg, np.random.default_rng(seed))
        assert out.pixels.sum() == pytest.approx(pixels.sum(), rel=0.15)


def test_batch_sizes_cover_every_sample_once() -> None:
    """100 samples in batches of 32: 32, 32, 32 and a short 4."""

    images = _samples(50)
    sizes = []
    seen = []
    for batch, labels in batch_iter(images, 32, seed=0, epoch=0):
        sizes.append(batch.shape[0])
        seen.extend((batch.data[:, 0, 0, 0] * 100).round().astype(int).tolist())
        assert batch.shape[1:] == (1, 4, 4)
        assert labels.dtype == np.int64
    assert sizes == [32, 32, 32, 4]
    assert sorted(seen) == sorted(list(range(50)) * 2)


def test_unshuffled_identity_batches_are_the_raw_images() -> None:
    """Without augmentation or shuffling batches are the stacked inputs."""

    images = _samples(5)
    [(batch, labels)] = list(batch_iter(images, 10, shuffle=False))
    expected = np.stack([img.pixels for img in images]).astype(np.float32)
    np.testing.assert_array_equal(batch.data, expected)
    assert labels.tolist() == [img.label for img in images]


def test_batches_are_reproducible_across_workers() -> None:
    """Augmentation randomness is keyed per sample, not per thread."""

    images = [LabeledImage(_glyph()[None] / 255.0, i % 2, str(i)) for i in range(10)]
    cfg = AugmentConfig()
    serial = [b.data for b, _ in batch_iter(images, 4, cfg, seed=2, epoch=1)]
    again = [b.data for b, _ in batch_iter(images, 4, cfg, seed=2, epoch=1)]
    threaded = [b.data for b, _ in batch_iter(images, 4, cfg, seed=2, epoch=1, workers=3)]
    for a, b, c in zip(serial, again, threaded, strict=True):
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a, c)


def test_batch_size_must_be_positive() -> None:
    """A zero batch size is a configuration error."""

    with pytest.raises(ConfigError, match="batch_size"):
        list(batch_iter(_samples(2), 0))
