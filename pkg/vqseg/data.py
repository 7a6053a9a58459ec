"""
Samples, on-disk datasets, augmentation and the batch loader.

Dataset layout: root/<split>/images/<id>.png (8-bit RGB) next to
root/<split>/labels/<id>.png (8-bit single-channel class indices).
"""

import logging
import queue
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import yaml
from PIL import Image

from .config import AugmentConfig
from .errors import ConfigurationError, DataError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png",)


@dataclass
class SegSample:
    image: np.ndarray    # (H, W, 3) float32; in [0, 1] unless normalised
    labels: np.ndarray   # (H, W) int64, classes or the ignore label
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"sample {self.id}: image must be (H, W, 3), got {self.image.shape}")
        if self.labels.shape != self.image.shape[:2]:
            raise DataError(
                f"sample {self.id}: image {self.image.shape[:2]} and labels {self.labels.shape} differ in size"
            )


def normalize(image: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    return ((image - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)).astype(np.float32)


def load_remap(path: str, ignore_index: int = 255) -> np.ndarray:
    """
    Read a YAML mapping raw label id -> train id into a 256-entry lookup table.
    Raw ids not listed map to the ignore label; the ignore label maps to itself.
    """
    remap_file = Path(path)
    if not remap_file.exists():
        raise ConfigurationError(f"label remap file not found: {path}")
    with open(remap_file, "r") as f:
        mapping = yaml.safe_load(f) or {}
    if not isinstance(mapping, dict):
        raise ConfigurationError(f"label remap file {path} must contain a mapping")
    table = np.full(256, ignore_index, dtype=np.int64)
    for raw, train_id in mapping.items():
        raw, train_id = int(raw), int(train_id)
        if not 0 <= raw < 256:
            raise ConfigurationError(f"remap key {raw} outside the 8-bit label range")
        table[raw] = train_id
    return table


def _index_split(root_dir: Path, split: str) -> List[Tuple[str, Path, Path]]:
    split_dir = Path(root_dir) / split
    if not split_dir.is_dir():
        raise DataError(f"split directory not found: {split_dir}")
    images = {p.stem: p for p in (split_dir / "images").glob("*") if p.suffix.lower() in IMAGE_SUFFIXES}
    labels = {p.stem: p for p in (split_dir / "labels").glob("*") if p.suffix.lower() in IMAGE_SUFFIXES}
    for name in sorted(set(images) ^ set(labels)):
        missing = "label" if name in images else "image"
        raise DataError(f"{split}: {name} has no matching {missing}")
    return [(name, images[name], labels[name]) for name in sorted(images)]


def _read_pair(name: str, image_path: Path, label_path: Path, remap: Optional[np.ndarray]) -> SegSample:
    with Image.open(image_path) as img:
        image = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    with Image.open(label_path) as lab:
        if lab.mode not in ("L", "P"):
            raise DataError(f"{name}: label map must be single-channel 8-bit, got mode {lab.mode}")
        labels = np.asarray(lab, dtype=np.int64)
    if image.shape[:2] != labels.shape:
        raise DataError(f"{name}: image {image.shape[:2]} and label {labels.shape} sizes differ")
    if remap is not None:
        labels = remap[labels]
    return SegSample(image=image, labels=labels, id=name)


# -- augmentation -----------------------------------------------------------

def _resize(sample: SegSample, scale: float) -> SegSample:
    H, W = sample.labels.shape
    h, w = max(1, int(round(H * scale))), max(1, int(round(W * scale)))
    if (h, w) == (H, W):
        return sample
    channels = [
        np.asarray(Image.fromarray(sample.image[:, :, c]).resize((w, h), Image.Resampling.BILINEAR))
        for c in range(3)
    ]
    labels = np.asarray(
        Image.fromarray(sample.labels.astype(np.uint8)).resize((w, h), Image.Resampling.NEAREST),
        dtype=np.int64,
    )
    return SegSample(image=np.stack(channels, axis=-1).astype(np.float32), labels=labels, id=sample.id)


def _pad_to(sample: SegSample, crop_h: int, crop_w: int, ignore_index: int) -> SegSample:
    H, W = sample.labels.shape
    ph, pw = max(0, crop_h - H), max(0, crop_w - W)
    if not ph and not pw:
        return sample
    image = np.pad(sample.image, ((0, ph), (0, pw), (0, 0)), constant_values=0.0)
    labels = np.pad(sample.labels, ((0, ph), (0, pw)), constant_values=ignore_index)
    return SegSample(image=image, labels=labels, id=sample.id)


def hflip(sample: SegSample) -> SegSample:
    return SegSample(
        image=np.ascontiguousarray(sample.image[:, ::-1]),
        labels=np.ascontiguousarray(sample.labels[:, ::-1]),
        id=sample.id,
    )


def augment(sample: SegSample, cfg: AugmentConfig, rng: np.random.Generator, ignore_index: int = 255) -> SegSample:
    """
    Random resize (bilinear image, nearest labels), crop and horizontal flip.

    Inputs smaller than the crop after resizing are padded with zero pixels
    and the ignore label. Labels must fit in 8 bits.
    """
    if not cfg.enabled:
        return sample
    if sample.labels.size and (sample.labels.min() < 0 or sample.labels.max() > 255):
        raise DataError(f"sample {sample.id}: labels must be 8-bit to resize")
    lo, hi = cfg.scale_range
    scale = float(rng.uniform(lo, hi))
    crop_h, crop_w = cfg.crop
    out = _pad_to(_resize(sample, scale), crop_h, crop_w, ignore_index)
    H, W = out.labels.shape
    y0 = int(rng.integers(0, H - crop_h + 1))
    x0 = int(rng.integers(0, W - crop_w + 1))
    out = SegSample(
        image=out.image[y0:y0 + crop_h, x0:x0 + crop_w],
        labels=out.labels[y0:y0 + crop_h, x0:x0 + crop_w],
        id=out.id,
    )
    if rng.random() < cfg.hflip_prob:
        out = hflip(out)
    return out


# -- datasets and batching --------------------------------------------------

class Dataset(Protocol):
    def __len__(self) -> int: ...

    def get(self, index: int) -> SegSample: ...


class FolderDataset:
    """Random access over one split on disk."""

    def __init__(self, root_dir: str, split: str, remap: Optional[np.ndarray] = None):
        self.split = split
        self.remap = remap
        self.pairs = _index_split(Path(root_dir), split)
        logger.info("Indexed %d samples in %s/%s", len(self.pairs), root_dir, split)

    def __len__(self) -> int:
        return len(self.pairs)

    def get(self, index: int) -> SegSample:
        return _read_pair(*self.pairs[index], self.remap)


def load_dataset(
    root_dir: str,
    split: str,
    mean: Optional[Sequence[float]] = None,
    std: Optional[Sequence[float]] = None,
    remap: Optional[np.ndarray] = None,
) -> Iterator[SegSample]:
    """
    Iterate a split in lexicographic order of basenames.

    Pairing is checked before the first sample is produced. When mean and
    std are given the images come back normalised per channel.
    """
    dataset = FolderDataset(root_dir, split, remap)

    def _samples():
        for index in range(len(dataset)):
            sample = dataset.get(index)
            if mean is not None and std is not None:
                sample.image = normalize(sample.image, mean, std)
            yield sample

    return _samples()


class BatchLoader:
    """
    Training batches: shuffled epochs, per-sample augmentation, normalisation.

    Every sample draws its augmentation from a generator seeded by
    (seed, epoch, sample index), so results do not depend on num_workers.
    With workers, a background thread keeps up to `prefetch` batches in a
    bounded queue.
    """

    def __init__(
        self,
        dataset: Dataset,
        batch_size: int,
        augment_cfg: AugmentConfig,
        mean: Sequence[float],
        std: Sequence[float],
        seed: int = 0,
        num_workers: int = 0,
        ignore_index: int = 255,
        prefetch: int = 2,
    ):
        if len(dataset) == 0:
            raise DataError("training dataset is empty")
        self.dataset = dataset
        self.batch_size = batch_size
        self.augment_cfg = augment_cfg
        self.mean, self.std = mean, std
        self.seed = seed
        self.num_workers = num_workers
        self.ignore_index = ignore_index
        self.prefetch = prefetch
        self._orders: Dict[int, np.ndarray] = {}

    def _order(self, epoch: int) -> np.ndarray:
        if epoch not in self._orders:
            self._orders = {epoch: np.random.default_rng([self.seed, epoch]).permutation(len(self.dataset))}
        return self._orders[epoch]

    def _positions(self, iteration: int) -> List[Tuple[int, int]]:
        n = len(self.dataset)
        start = iteration * self.batch_size
        return [divmod(p, n) for p in range(start, start + self.batch_size)]

    def _prepare(self, epoch: int, index: int) -> SegSample:
        sample = self.dataset.get(index)
        rng = np.random.default_rng([self.augment_cfg.seed, epoch, index])
        return augment(sample, self.augment_cfg, rng, self.ignore_index)

    def _collate(self, samples: List[SegSample]) -> Tuple[np.ndarray, np.ndarray]:
        shapes = {s.labels.shape for s in samples}
        if len(shapes) != 1:
            raise DataError(f"samples in a batch differ in size {sorted(shapes)}; enable augmentation cropping")
        images = np.stack([normalize(s.image, self.mean, self.std).transpose(2, 0, 1) for s in samples])
        labels = np.stack([s.labels for s in samples])
        return images, labels

    def batch(self, iteration: int, pool: Optional[ThreadPoolExecutor] = None) -> Tuple[np.ndarray, np.ndarray]:
        jobs = []
        for epoch, slot in self._positions(iteration):
            jobs.append((epoch, int(self._order(epoch)[slot])))
        if pool is None:
            samples = [self._prepare(*job) for job in jobs]
        else:
            samples = list(pool.map(lambda job: self._prepare(*job), jobs))
        return self._collate(samples)

    def batches(self, start: int, stop: int) -> Iterator[Tuple[int, np.ndarray, np.ndarray]]:
        """Yield (iteration, images NCHW, labels NHW) for iterations start..stop-1."""
        if self.num_workers <= 0:
            for it in range(start, stop):
                yield (it, *self.batch(it))
            return

        q: "queue.Queue" = queue.Queue(maxsize=self.prefetch)
        stop_event = threading.Event()
        done = object()

        def _produce():
            with ThreadPoolExecutor(max_workers=self.num_workers) as pool:
                try:
                    for it in range(start, stop):
                        if stop_event.is_set():
                            return
                        q.put((it, *self.batch(it, pool)))
                except Exception as e:
                    q.put(e)
                    return
            q.put(done)

        producer = threading.Thread(target=_produce, name="batch-loader", daemon=True)
        producer.start()
        try:
            while True:
                item = q.get()
                if item is done:
                    return
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            stop_event.set()
            while producer.is_alive():
                try:
                    q.get_nowait()
                except queue.Empty:
                    producer.join(timeout=0.05)
