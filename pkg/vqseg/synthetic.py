"""
Synthetic road scenes for desk-scale runs.

A scene is a sky band on top, a road band at the bottom, an optional
building band in between, and rectangles / ellipses for the remaining
classes. Labels are rasterised with Pillow (no anti-aliasing), so they are
exact; the image is the class colour of every pixel plus Gaussian noise.
"""

import zlib
from typing import Iterator

import numpy as np
from PIL import Image, ImageDraw

from .data import SegSample
from .errors import ConfigurationError
from .palette import class_colors, synthetic_names

ROAD, SKY, BUILDING = 0, 1, 2
OBJECT_PROBABILITY = 0.8


def synth_scene(
    rng: np.random.Generator,
    num_classes: int,
    size: int,
    noise: float = 0.05,
    sample_id: str = "synthetic",
) -> SegSample:
    """
    Draw one scene.

    Road and sky are always present; building fills the middle band when
    num_classes > 2; every further class appears as one object with
    probability 0.8.
    """
    if num_classes < 2:
        raise ConfigurationError(f"synthetic scenes need at least 2 classes, got {num_classes}")
    if size < 8:
        raise ConfigurationError(f"synthetic scene size must be >= 8, got {size}")

    sky_rows = int(rng.integers(size // 5, size // 3 + 1))
    road_rows = int(rng.integers(size // 4, size // 3 + 1))
    canvas = Image.new("L", (size, size), ROAD)
    draw = ImageDraw.Draw(canvas)
    draw.rectangle([0, 0, size - 1, sky_rows - 1], fill=SKY)
    if num_classes > 2:
        draw.rectangle([0, sky_rows, size - 1, size - road_rows - 1], fill=BUILDING)

    # objects never reach the top sky rows or the bottom half of the road band
    lowest = size - max(2, road_rows // 2) - 1
    for cls in range(BUILDING + 1, num_classes):
        if rng.random() >= OBJECT_PROBABILITY:
            continue
        w = int(rng.integers(size // 8, size // 3 + 1))
        h = int(rng.integers(size // 8, size // 3 + 1))
        h = min(h, lowest - sky_rows + 1)
        x0 = int(rng.integers(0, size - w + 1))
        y0 = int(rng.integers(sky_rows, lowest - h + 2))
        box = [x0, y0, x0 + w - 1, y0 + h - 1]
        if rng.random() < 0.5:
            draw.rectangle(box, fill=cls)
        else:
            draw.ellipse(box, fill=cls)

    labels = np.asarray(canvas, dtype=np.int64)
    colors = class_colors(synthetic_names(num_classes)).astype(np.float32) / 255.0
    image = colors[labels]
    if noise > 0:
        image = image + rng.normal(0.0, noise, size=image.shape).astype(np.float32)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SegSample(image=image, labels=labels, id=sample_id)


def labels_from_colors(image: np.ndarray, num_classes: int) -> np.ndarray:
    """Invert the rendering: nearest class colour per pixel."""
    colors = class_colors(synthetic_names(num_classes)).astype(np.float32) / 255.0
    diff = image[:, :, None, :] - colors[None, None, :, :]
    return np.argmin(np.sum(diff * diff, axis=-1), axis=-1)


class SyntheticDataset:
    """
    num_samples scenes of one split; scene i is a pure function of
    (seed, split, i) and is regenerated on every access.
    """

    def __init__(self, num_samples: int, num_classes: int, size: int, noise: float = 0.05, seed: int = 0, split: str = "train"):
        self.num_samples = num_samples
        self.num_classes = num_classes
        self.size = size
        self.noise = noise
        self.seed = seed
        self.split = split
        self._split_key = zlib.crc32(split.encode("utf-8"))

    def __len__(self) -> int:
        return self.num_samples

    def get(self, index: int) -> SegSample:
        if not 0 <= index < self.num_samples:
            raise IndexError(f"scene {index} outside 0..{self.num_samples - 1}")
        rng = np.random.default_rng([self.seed, self._split_key, index])
        return synth_scene(rng, self.num_classes, self.size, self.noise, sample_id=f"{self.split}_{index:05d}")

    def __iter__(self) -> Iterator[SegSample]:
        for i in range(self.num_samples):
            yield self.get(i)
