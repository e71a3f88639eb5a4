"""Dataset ingestion, augmentation and batching.

Images are kept as ``uint8`` arrays shaped ``N x 3 x H x W`` and only turned
into normalised float tensors when a batch is produced.
"""
from __future__ import annotations

import os
import queue
import threading
from dataclasses import dataclass, field
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import Tensor

__all__ = [
    "DatasetError",
    "RecordLayout",
    "DatasetSpec",
    "Dataset",
    "Batch",
    "LAYOUTS",
    "load_dataset",
    "encode_records",
    "make_synthetic",
    "channel_stats",
    "normalize",
    "crop_and_flip",
    "augment",
    "augment_batch",
    "batches",
    "prefetch",
]

PAD = 4


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class RecordLayout:
    """Fixed-size binary records: label bytes followed by channel-planar pixels."""

    label_bytes: int
    label_index: int  # which label field is the class label
    class_count: int
    hw: Tuple[int, int] = (32, 32)
    label_dtype: str = "u1"

    @property
    def pixel_bytes(self) -> int:
        return 3 * self.hw[0] * self.hw[1]

    @property
    def record_bytes(self) -> int:
        return self.label_bytes + self.pixel_bytes


LAYOUTS = {
    "cifar10": RecordLayout(label_bytes=1, label_index=0, class_count=10),
    "cifar100": RecordLayout(label_bytes=2, label_index=1, class_count=100),
    # one little-endian uint16 label per record
    "imagenet32": RecordLayout(label_bytes=2, label_index=0, class_count=1000, label_dtype="<u2"),
}

# (subdirectory candidates, {split: [(filename, records)]}); records=None means any multiple
_FILES = {
    "cifar10": (("cifar-10-batches-bin", ""),
                {"train": [(f"data_batch_{i}.bin", 10000) for i in range(1, 6)],
                 "test": [("test_batch.bin", 10000)]}),
    "cifar100": (("cifar-100-binary", ""),
                 {"train": [("train.bin", 50000)], "test": [("test.bin", 10000)]}),
    "imagenet32": (("imagenet32-binary", ""),
                   {"train": [(f"train_data_batch_{i}.bin", None) for i in range(1, 11)],
                    "test": [("val_data.bin", None)]}),
}


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    root: Optional[str] = None
    split: str = "train"
    # synthetic only
    samples: int = 256
    classes: int = 4
    seed: int = 0
    # overrides the per-file record count check (small fixtures)
    records_per_file: Optional[int] = None

    def __post_init__(self):
        if self.name not in ("cifar10", "cifar100", "imagenet32", "synthetic"):
            raise DatasetError(f"unknown dataset {self.name!r}")
        if self.split not in ("train", "test"):
            raise DatasetError(f"unknown split {self.split!r}")

    @property
    def class_count(self) -> int:
        return self.classes if self.name == "synthetic" else LAYOUTS[self.name].class_count

    @property
    def layout(self) -> Optional[RecordLayout]:
        return LAYOUTS.get(self.name)

    def to_dict(self) -> dict:
        return {"name": self.name, "root": self.root, "split": self.split, "samples": self.samples,
                "classes": self.classes, "seed": self.seed, "records_per_file": self.records_per_file}


@dataclass
class Dataset:
    images: np.ndarray  # uint8, N x 3 x H x W
    labels: np.ndarray  # int64
    class_count: int
    extra_labels: Optional[np.ndarray] = field(default=None, repr=False)  # e.g. coarse CIFAR-100 labels

    def __post_init__(self):
        if self.images.dtype != np.uint8 or self.images.ndim != 4 or self.images.shape[1] != 3:
            raise DatasetError(f"images must be uint8 Nx3xHxW, got {self.images.dtype} {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DatasetError("image and label counts differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DatasetError(f"labels outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Batch:
    images: Tensor
    labels: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def _decode(raw: bytes, layout: RecordLayout, expected: Optional[int], path: str):
    rb = layout.record_bytes
    if len(raw) % rb:
        raise DatasetError(f"{path}: size {len(raw)} is not a multiple of the {rb}-byte record")
    n = len(raw) // rb
    if expected is not None and n != expected:
        raise DatasetError(f"{path}: expected {expected} records, found {n}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, rb)
    label_fields = np.ascontiguousarray(rec[:, :layout.label_bytes]).view(np.dtype(layout.label_dtype))
    labels = label_fields[:, layout.label_index].astype(np.int64)
    extra = None
    if label_fields.shape[1] > 1:
        extra = np.delete(label_fields, layout.label_index, axis=1).astype(np.int64)
    images = rec[:, layout.label_bytes:].reshape(n, 3, *layout.hw).copy()
    return images, labels, extra


def encode_records(ds: Dataset, layout: RecordLayout) -> bytes:
    """Inverse of decoding: serialise a dataset back into binary records."""
    n = len(ds)
    dt = np.dtype(layout.label_dtype)
    fields = layout.label_bytes // dt.itemsize
    lab = np.zeros((n, fields), dtype=dt)
    lab[:, layout.label_index] = ds.labels
    if ds.extra_labels is not None:
        others = [i for i in range(fields) if i != layout.label_index]
        lab[:, others] = ds.extra_labels
    rec = np.concatenate([lab.view(np.uint8).reshape(n, layout.label_bytes),
                          ds.images.reshape(n, -1)], axis=1)
    return rec.tobytes()


def _find_dir(root: str, candidates: Sequence[str], first: str) -> str:
    for sub in candidates:
        d = os.path.join(root, sub)
        if os.path.exists(os.path.join(d, first)):
            return d
    raise DatasetError(f"could not find {first} under {root}")


def load_dataset(spec: DatasetSpec) -> Dataset:
    """Load a split into memory; synthetic datasets need no files."""
    if spec.name == "synthetic":
        return make_synthetic(spec.samples, spec.classes, seed=spec.seed + (0 if spec.split == "train" else 1))
    if spec.root is None:
        raise DatasetError(f"dataset {spec.name} needs a root directory")
    layout = LAYOUTS[spec.name]
    subdirs, splits = _FILES[spec.name]
    files = splits[spec.split]
    directory = _find_dir(spec.root, subdirs, files[0][0])
    parts = []
    for fname, count in files:
        path = os.path.join(directory, fname)
        if not os.path.exists(path):
            if spec.name == "imagenet32" and parts:
                break
            raise DatasetError(f"missing file {path}")
        with open(path, "rb") as fh:
            raw = fh.read()
        expected = spec.records_per_file if spec.records_per_file is not None else count
        parts.append(_decode(raw, layout, expected, path))
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    extra = None if parts[0][2] is None else np.concatenate([p[2] for p in parts])
    if labels.max() >= layout.class_count:
        raise DatasetError(f"label {labels.max()} out of range for {layout.class_count} classes")
    return Dataset(images, labels, layout.class_count, extra)


def make_synthetic(samples: int = 256, classes: int = 4, seed: int = 0, hw: int = 32,
                   noise: float = 20.0) -> Dataset:
    """Seeded toy images whose class sets the mean colour and stripe orientation.

    Class means differ by at least 64 grey levels in one channel, so the
    classes are linearly separable from channel averages alone.
    """
    if not 2 <= classes <= 8:
        raise ValueError("synthetic datasets support 2 to 8 classes")
    rng = np.random.default_rng(seed)
    labels = np.arange(samples) % classes
    rng.shuffle(labels)
    palette = np.array([[64 + 128 * ((k >> c) & 1) for c in range(3)] for k in range(classes)], float)
    yy, xx = np.mgrid[0:hw, 0:hw]
    stripes = np.stack([np.sin(yy * 0.8), np.sin(xx * 0.8)])  # horizontal, vertical
    images = palette[labels][:, :, None, None] + 24.0 * stripes[labels % 2][:, None, :, :]
    images = images + rng.normal(0.0, noise, images.shape)
    images = np.clip(np.rint(images), 0, 255).astype(np.uint8)
    return Dataset(images, labels.astype(np.int64), classes)


def channel_stats(ds: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation of raw pixel values."""
    x = ds.images.astype(np.float64)
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def normalize(images: np.ndarray, mean, std, dtype=np.float32) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64).reshape(1, 3, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(1, 3, 1, 1)
    return ((images.astype(np.float64) - mean) / std).astype(dtype)


def crop_and_flip(image: np.ndarray, dy: int, dx: int, flip: bool) -> np.ndarray:
    """Zero-pad by 4 px, take the window at offset ``(dy, dx)``; optionally mirror first."""
    c, h, w = image.shape
    src = image[:, :, ::-1] if flip else image
    padded = np.zeros((c, h + 2 * PAD, w + 2 * PAD), dtype=image.dtype)
    padded[:, PAD:PAD + h, PAD:PAD + w] = src
    return padded[:, dy:dy + h, dx:dx + w].copy()


def _draw(rng: np.random.Generator, n: int):
    flips = rng.random(n) < 0.5
    offsets = rng.integers(0, 2 * PAD + 1, size=(n, 2))
    return flips, offsets


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip (p = 1/2) then a uniformly placed crop of the padded image."""
    flips, offsets = _draw(rng, 1)
    return crop_and_flip(image, int(offsets[0, 0]), int(offsets[0, 1]), bool(flips[0]))


def augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n, c, h, w = images.shape
    flips, offsets = _draw(rng, n)
    src = np.where(flips[:, None, None, None], images[:, :, :, ::-1], images)
    padded = np.zeros((n, c, h + 2 * PAD, w + 2 * PAD), dtype=images.dtype)
    padded[:, :, PAD:PAD + h, PAD:PAD + w] = src
    out = np.empty_like(images)
    for i, (dy, dx) in enumerate(offsets):
        out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out


def batches(ds: Dataset, batch_size: int, seed: int = 0, epoch: int = 0, train: bool = True,
            mean=None, std=None, dtype=np.float32, shuffle: Optional[bool] = None) -> Iterator[Batch]:
    """Yield batches in an order fixed by ``(seed, epoch)``.

    Training batches are shuffled and augmented; the last partial batch is
    kept.  ``mean``/``std`` default to the dataset's own channel statistics.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if mean is None or std is None:
        mean, std = channel_stats(ds)
    shuffle = train if shuffle is None else shuffle
    n = len(ds)
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    aug_rng = np.random.default_rng([seed, epoch, 1])
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        imgs = ds.images[idx]
        if train:
            imgs = augment_batch(imgs, aug_rng)
        yield Batch(Tensor(normalize(imgs, mean, std, dtype)), ds.labels[idx], idx)


_DONE = object()


def prefetch(items: Iterable, depth: int = 2) -> Iterator:
    """Produce ``items`` on a background thread through a bounded queue."""
    if depth <= 0:
        yield from items
        return
    q: queue.Queue = queue.Queue(maxsize=depth)
    errors: List[BaseException] = []
    stop = threading.Event()

    def worker():
        try:
            for item in items:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        except BaseException as exc:  # re-raised on the consumer side
            errors.append(exc)
        finally:
            q.put(_DONE)

    t = threading.Thread(target=worker, daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is _DONE:
                break
            yield item
    finally:
        stop.set()
        while t.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                pass
            t.join(timeout=0.05)
    if errors:
        raise errors[0]
