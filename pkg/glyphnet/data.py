"""Corpus ingestion, stratified splitting, affine augmentation and batching.

Key points:
- A corpus is ``root/<class_name>/<image file>``. Class indices follow the
  lexicographic order of the class directories. A root that holds ``train/``
  and ``test/`` subdirectories (each in the same layout) is taken as already
  split.
- Loaded pixels are grayscale in [0, 1] with bright ink on a zero background.
  Images whose border is brighter than their interior are inverted so that
  padding and augmentation fill never paint strokes.
- Augmentation composes rotation, shear, zoom and shift into a single affine
  map about the image center and resamples once, bilinearly, filling with 0.
- Randomness is keyed: the shuffle of epoch ``e`` uses ``(seed, e)`` and the
  transform of sample ``i`` uses ``(seed, e, i)``, so the stream does not
  depend on batch size or on how many threads augment.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .const import (
    AUG_ROTATION_DEG,
    AUG_SHEAR_FRAC,
    AUG_SHIFT_FRAC,
    AUG_ZOOM_FRAC,
    DEFAULT_IMAGE_SIZE,
    DEFAULT_TRAIN_FRAC,
    IMAGE_EXTENSIONS,
    PRESPLIT_TEST_DIR,
    PRESPLIT_TRAIN_DIR,
)
from .errors import ConfigError, CorpusError
from .helpers import derive_rng
from .tensor import Tensor, default_dtype

_LOGGER = logging.getLogger(__name__)

_SPLIT_STREAM = 0x5917
_SHUFFLE_STREAM = 0x5411
_AUGMENT_STREAM = 0xA06


@dataclass(slots=True)
class LabeledImage:
    """One grayscale sample, pixels shaped (1, H, W)."""

    pixels: np.ndarray
    label: int
    source_id: str


@dataclass(slots=True)
class Corpus:
    """Images of one class-per-directory tree plus the class order."""

    images: list[LabeledImage]
    class_names: list[str]
    skipped: int = 0


@dataclass(slots=True)
class DatasetSplit:
    train: list[LabeledImage]
    test: list[LabeledImage]
    class_names: list[str]
    seed: int = 0
    image_size: int = DEFAULT_IMAGE_SIZE
    train_frac: float = DEFAULT_TRAIN_FRAC
    presplit: bool = False

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True, slots=True)
class AugmentConfig:
    """Sampling ranges of the per-sample affine transform."""

    rotation_deg: float = AUG_ROTATION_DEG
    shear_frac: float = AUG_SHEAR_FRAC
    zoom_frac: float = AUG_ZOOM_FRAC
    shift_frac: float = AUG_SHIFT_FRAC
    enabled: bool = True

    def __post_init__(self) -> None:
        for name in ("rotation_deg", "shear_frac", "zoom_frac", "shift_frac"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"must be >= 0, got {value}", field=f"augment.{name}")
        if self.zoom_frac >= 1.0:
            raise ConfigError(
                f"must be below 1, got {self.zoom_frac}", field="augment.zoom_frac"
            )

    @property
    def is_identity(self) -> bool:
        return not self.enabled or not any(
            (self.rotation_deg, self.shear_frac, self.zoom_frac, self.shift_frac)
        )

    @classmethod
    def disabled(cls) -> AugmentConfig:
        return cls(enabled=False)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------
def normalize_polarity(pixels: np.ndarray) -> np.ndarray:
    """Invert a 2-D image in [0, 1] when its border outshines its interior."""

    if pixels.shape[0] < 3 or pixels.shape[1] < 3:
        return pixels
    border = np.concatenate(
        [pixels[0, :], pixels[-1, :], pixels[1:-1, 0], pixels[1:-1, -1]]
    )
    interior = pixels[1:-1, 1:-1]
    if border.mean() > interior.mean():
        return 1.0 - pixels
    return pixels


def fit_to_square(pixels: np.ndarray, size: int) -> np.ndarray:
    """Aspect-preserving resize into a ``size`` x ``size`` zero canvas."""

    height, width = pixels.shape
    if (height, width) == (size, size):
        return pixels
    scale = size / max(height, width)
    new_h = max(1, min(size, round(height * scale)))
    new_w = max(1, min(size, round(width * scale)))
    resized = Image.fromarray(pixels.astype(np.float32)).resize(
        (new_w, new_h), Image.Resampling.BILINEAR
    )
    canvas = np.zeros((size, size), dtype=np.float64)
    top = (size - new_h) // 2
    left = (size - new_w) // 2
    canvas[top : top + new_h, left : left + new_w] = np.asarray(resized)
    return np.clip(canvas, 0.0, 1.0)


def decode_image(path: Path, image_size: int) -> np.ndarray:
    """Read one file into a (1, size, size) array in the default dtype."""

    with Image.open(path) as img:
        gray = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    pixels = fit_to_square(normalize_polarity(gray), image_size)
    return pixels[None, :, :].astype(default_dtype())


def _image_files(directory: Path) -> list[Path]:
    return sorted(
        p
        for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )


def load_corpus(
    root: str | Path, image_size: int = DEFAULT_IMAGE_SIZE, *, prefix: str = ""
) -> Corpus:
    """Decode every image under ``root/<class>/``.

    Unreadable files are skipped and counted; a class directory that yields
    no image raises `CorpusError`.
    """

    root = Path(root)
    if image_size < 1:
        raise ConfigError(f"must be positive, got {image_size}", field="image_size")
    if not root.is_dir():
        raise CorpusError(f"corpus root {root} is not a directory")
    class_dirs = sorted(
        (p for p in root.iterdir() if p.is_dir() and not p.name.startswith(".")),
        key=lambda p: p.name,
    )
    if not class_dirs:
        raise CorpusError(f"corpus root {root} has no class directories")

    images: list[LabeledImage] = []
    skipped = 0
    for label, class_dir in enumerate(class_dirs):
        loaded = 0
        for path in _image_files(class_dir):
            try:
                pixels = decode_image(path, image_size)
            except (OSError, UnidentifiedImageError, ValueError) as err:
                skipped += 1
                _LOGGER.warning("Skipping unreadable image %s: %s", path, err)
                continue
            source_id = f"{prefix}{class_dir.name}/{path.name}"
            images.append(LabeledImage(pixels, label, source_id))
            loaded += 1
        if loaded == 0:
            raise CorpusError(f"class directory {class_dir} contains no readable images")

    if skipped:
        _LOGGER.warning("Skipped %d unreadable file(s) under %s", skipped, root)
    _LOGGER.info(
        "Loaded %d images in %d classes from %s", len(images), len(class_dirs), root
    )
    return Corpus(images, [p.name for p in class_dirs], skipped)


def split(
    images: Sequence[LabeledImage],
    train_frac: float = DEFAULT_TRAIN_FRAC,
    seed: int = 0,
    *,
    class_names: Sequence[str] | None = None,
) -> DatasetSplit:
    """Per-class stratified shuffle split.

    Each class contributes ``floor(n * train_frac)`` samples to train, clamped
    so that both sides keep at least one sample.
    """

    if not 0.0 < train_frac < 1.0:
        raise ConfigError(f"must lie in (0, 1), got {train_frac}", field="train_frac")
    by_label: dict[int, list[LabeledImage]] = {}
    for image in images:
        by_label.setdefault(image.label, []).append(image)
    if not by_label:
        raise CorpusError("cannot split an empty corpus")

    names = list(class_names) if class_names is not None else [
        str(label) for label in range(max(by_label) + 1)
    ]
    rng = derive_rng(seed, _SPLIT_STREAM)
    train: list[LabeledImage] = []
    test: list[LabeledImage] = []
    for label in sorted(by_label):
        members = by_label[label]
        count = len(members)
        if count < 2:
            raise CorpusError(
                f"class {names[label] if label < len(names) else label} has "
                f"{count} sample(s); at least 2 are needed to split"
            )
        n_train = min(max(math.floor(count * train_frac + 1e-9), 1), count - 1)
        order = rng.permutation(count)
        chosen = set(order[:n_train].tolist())
        for index, image in enumerate(members):
            (train if index in chosen else test).append(image)

    _LOGGER.debug(
        "Split %d images into %d train / %d test", len(images), len(train), len(test)
    )
    return DatasetSplit(train, test, names, seed=seed, train_frac=train_frac)


def is_presplit(root: str | Path) -> bool:
    root = Path(root)
    return (root / PRESPLIT_TRAIN_DIR).is_dir() and (root / PRESPLIT_TEST_DIR).is_dir()


def load_dataset(
    root: str | Path,
    image_size: int = DEFAULT_IMAGE_SIZE,
    train_frac: float = DEFAULT_TRAIN_FRAC,
    seed: int = 0,
) -> DatasetSplit:
    """Load a corpus and return its train/test split.

    A pre-split corpus is used as-is; otherwise `split` is applied.
    """

    root = Path(root)
    if is_presplit(root):
        train = load_corpus(root / PRESPLIT_TRAIN_DIR, image_size, prefix="train/")
        test = load_corpus(root / PRESPLIT_TEST_DIR, image_size, prefix="test/")
        if train.class_names != test.class_names:
            raise CorpusError(
                f"train and test class directories differ under {root}: "
                f"{train.class_names} vs {test.class_names}"
            )
        return DatasetSplit(
            train.images,
            test.images,
            train.class_names,
            seed=seed,
            image_size=image_size,
            train_frac=train_frac,
            presplit=True,
        )

    corpus = load_corpus(root, image_size)
    result = split(corpus.images, train_frac, seed, class_names=corpus.class_names)
    result.image_size = image_size
    return result


def stack_images(images: Sequence[LabeledImage]) -> tuple[np.ndarray, np.ndarray]:
    """(N, 1, H, W) pixels and (N,) integer labels."""

    if not images:
        return np.zeros((0, 1, 0, 0), dtype=default_dtype()), np.zeros(0, dtype=np.int64)
    pixels = np.stack([image.pixels for image in images]).astype(default_dtype())
    labels = np.array([image.label for image in images], dtype=np.int64)
    return pixels, labels


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------
@dataclass(frozen=True, slots=True)
class AffineParams:
    """One drawn transform; shifts are in pixels."""

    rotation_deg: float = 0.0
    shear: float = 0.0
    zoom: float = 1.0
    shift_x: float = 0.0
    shift_y: float = 0.0

    @property
    def is_identity(self) -> bool:
        return (
            self.rotation_deg == 0.0
            and self.shear == 0.0
            and self.zoom == 1.0
            and self.shift_x == 0.0
            and self.shift_y == 0.0
        )


def sample_affine(
    cfg: AugmentConfig, rng: np.random.Generator, height: int, width: int
) -> AffineParams:
    """Draw rotation, shear, zoom, x-shift and y-shift, in that order."""

    if cfg.is_identity:
        return AffineParams()
    rotation = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
    shear = rng.uniform(-cfg.shear_frac, cfg.shear_frac)
    zoom = rng.uniform(1.0 - cfg.zoom_frac, 1.0 + cfg.zoom_frac)
    shift_x = rng.uniform(-cfg.shift_frac, cfg.shift_frac) * width
    shift_y = rng.uniform(-cfg.shift_frac, cfg.shift_frac) * height
    return AffineParams(
        float(rotation), float(shear), float(zoom), float(shift_x), float(shift_y)
    )


def affine_matrix(
    params: AffineParams, height: int, width: int
) -> tuple[np.ndarray, np.ndarray]:
    """Output-to-input (row, col) matrix and offset for `ndimage.affine_transform`.

    The forward map is ``out = A (in - c) + c + t`` with ``A = R @ S @ Z`` in
    (x, y) coordinates: rotation, horizontal shear, isotropic zoom.
    """

    theta = math.radians(params.rotation_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    rotate = np.array([[cos, -sin], [sin, cos]])
    shear = np.array([[1.0, params.shear], [0.0, 1.0]])
    forward_xy = rotate @ shear @ (params.zoom * np.eye(2))
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    forward_rc = swap @ forward_xy @ swap

    inverse = np.linalg.inv(forward_rc)
    center = np.array([(height - 1) / 2.0, (width - 1) / 2.0])
    shift = np.array([params.shift_y, params.shift_x])
    offset = center - inverse @ (center + shift)
    return inverse, offset


def apply_affine(pixels: np.ndarray, params: AffineParams) -> np.ndarray:
    """Bilinear resampling of a (C, H, W) image; outside pixels become 0."""

    if params.is_identity:
        return pixels
    _, height, width = pixels.shape
    matrix, offset = affine_matrix(params, height, width)
    out = np.empty_like(pixels)
    for channel in range(pixels.shape[0]):
        warped = ndimage.affine_transform(
            pixels[channel].astype(np.float64),
            matrix,
            offset=offset,
            order=1,
            mode="constant",
            cval=0.0,
        )
        out[channel] = np.clip(warped, 0.0, 1.0)
    return out


def augment(
    image: LabeledImage, cfg: AugmentConfig, rng: np.random.Generator
) -> LabeledImage:
    """Randomly transformed copy of ``image``; the label is kept."""

    if cfg.is_identity:
        return image
    _, height, width = image.pixels.shape
    params = sample_affine(cfg, rng, height, width)
    return replace(image, pixels=apply_affine(image.pixels, params))


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------
def epoch_order(count: int, seed: int, epoch: int, *, shuffle: bool = True) -> np.ndarray:
    """Sample order of one epoch; depends only on (seed, epoch)."""
    if not shuffle:
        return np.arange(count)
    return derive_rng(seed, _SHUFFLE_STREAM, epoch).permutation(count)


def batch_iter(
    images: DatasetSplit | Sequence[LabeledImage],
    batch_size: int,
    augment_cfg: AugmentConfig | None = None,
    seed: int = 0,
    epoch: int = 0,
    *,
    shuffle: bool = True,
    workers: int = 1,
) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Yield ``(pixels[B, 1, H, W], labels[B])`` over one shuffled pass.

    A `DatasetSplit` is iterated over its train side. The final batch may be
    short.
    """

    if batch_size < 1:
        raise ConfigError(f"must be >= 1, got {batch_size}", field="batch_size")
    samples = images.train if isinstance(images, DatasetSplit) else list(images)
    cfg = augment_cfg or AugmentConfig.disabled()
    order = epoch_order(len(samples), seed, epoch, shuffle=shuffle)

    def _pixels(index: int) -> np.ndarray:
        sample = samples[index]
        if cfg.is_identity:
            return sample.pixels
        rng = derive_rng(seed, _AUGMENT_STREAM, epoch, index)
        return augment(sample, cfg, rng).pixels

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for start in range(0, len(order), batch_size):
            indices = [int(i) for i in order[start : start + batch_size]]
            if pool is not None:
                rows = list(pool.map(_pixels, indices))
            else:
                rows = [_pixels(i) for i in indices]
            labels = np.array([samples[i].label for i in indices], dtype=np.int64)
            yield Tensor(np.stack(rows)), labels
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
