"""Procedural glyph corpus for desk-scale runs and tests.

Each class owns a template of two to four strokes (straight segments and
elliptical arcs) drawn in unit coordinates from ``(seed, class)``. A sample
jitters every control point, the stroke width and the glyph position with a
generator keyed by ``(seed, class, index)``, then renders dark ink on a white
square with Pillow. Equal seeds give byte-identical PNG files.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .const import DEFAULT_IMAGE_SIZE
from .errors import ConfigError
from .helpers import atomic_write_bytes, derive_rng

_LOGGER = logging.getLogger(__name__)

_TEMPLATE_STREAM = 0x7E3
_SAMPLE_STREAM = 0x5A3

POINT_JITTER = 0.04
POSITION_JITTER = 0.05
# Upscaled canvas for smoother strokes before the final downsample.
_SUPERSAMPLE = 4


@dataclass(frozen=True, slots=True)
class Stroke:
    """A segment (``arc`` False) or an arc of the ellipse in ``box``.

    Coordinates are fractions of the glyph box, which spans 0.15..0.85 of the
    image on each axis.
    """

    arc: bool
    points: tuple[float, float, float, float]
    start: float = 0.0
    end: float = 0.0


def class_name(index: int) -> str:
    return f"c{index:02d}"


def class_template(seed: int, index: int) -> list[Stroke]:
    rng = derive_rng(seed, _TEMPLATE_STREAM, index)
    strokes: list[Stroke] = []
    for _ in range(int(rng.integers(2, 5))):
        if rng.random() < 0.5:
            x0, y0, x1, y1 = (float(v) for v in rng.uniform(0.0, 1.0, 4))
            strokes.append(Stroke(False, (x0, y0, x1, y1)))
        else:
            cx, cy = (float(v) for v in rng.uniform(0.3, 0.7, 2))
            rx, ry = (float(v) for v in rng.uniform(0.15, 0.35, 2))
            start = float(rng.uniform(0.0, 360.0))
            sweep = float(rng.uniform(120.0, 300.0))
            strokes.append(
                Stroke(True, (cx - rx, cy - ry, cx + rx, cy + ry), start, start + sweep)
            )
    return strokes


def render_glyph(
    template: list[Stroke], rng: np.random.Generator, size: int = DEFAULT_IMAGE_SIZE
) -> Image.Image:
    """Draw one jittered instance of ``template`` as an 8-bit grayscale image."""

    canvas = size * _SUPERSAMPLE
    image = Image.new("L", (canvas, canvas), color=255)
    draw = ImageDraw.Draw(image)
    dx, dy = rng.uniform(-POSITION_JITTER, POSITION_JITTER, 2)
    width = int(rng.integers(2, 4)) * _SUPERSAMPLE

    def _to_pixels(u: float, v: float) -> tuple[float, float]:
        x = (0.15 + 0.7 * u + dx) * canvas
        y = (0.15 + 0.7 * v + dy) * canvas
        return x, y

    for stroke in template:
        jitter = rng.uniform(-POINT_JITTER, POINT_JITTER, 4)
        x0, y0, x1, y1 = (p + j for p, j in zip(stroke.points, jitter, strict=True))
        a, b = _to_pixels(x0, y0)
        c, d = _to_pixels(x1, y1)
        if stroke.arc:
            box = (min(a, c), min(b, d), max(a, c), max(b, d))
            draw.arc(box, stroke.start, stroke.end, fill=0, width=width)
        else:
            draw.line((a, b, c, d), fill=0, width=width)
    return image.resize((size, size), Image.Resampling.BOX)


def generate_toy_corpus(
    out_dir: str | Path,
    classes: int = 10,
    per_class: int = 200,
    seed: int = 0,
    *,
    image_size: int = DEFAULT_IMAGE_SIZE,
) -> int:
    """Write ``classes * per_class`` PNG files under ``out_dir/cNN/``.

    Returns the number of files written.
    """

    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}", field="classes")
    if per_class < 1:
        raise ConfigError(f"must be >= 1, got {per_class}", field="per_class")
    if image_size < 4:
        raise ConfigError(f"must be >= 4, got {image_size}", field="image_size")

    root = Path(out_dir)
    written = 0
    for index in range(classes):
        template = class_template(seed, index)
        class_dir = root / class_name(index)
        class_dir.mkdir(parents=True, exist_ok=True)
        for sample in range(per_class):
            rng = derive_rng(seed, _SAMPLE_STREAM, index, sample)
            buffer = io.BytesIO()
            render_glyph(template, rng, image_size).save(buffer, format="PNG")
            atomic_write_bytes(class_dir / f"{sample:04d}.png", buffer.getvalue())
            written += 1
        _LOGGER.debug("Rendered %d samples of %s", per_class, class_name(index))
    _LOGGER.info("Wrote %d toy images in %d classes to %s", written, classes, root)
    return written
