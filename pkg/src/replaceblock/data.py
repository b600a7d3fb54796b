"""Dataset readers (CIFAR-10 binary, MNIST IDX), augmentation, normalization, batching."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
MNIST_IMAGES_MAGIC = 2051
MNIST_LABELS_MAGIC = 2049
PAD = 4


class DatasetError(ValueError):
    """Malformed or missing dataset files."""


@dataclass
class Dataset:
    """uint8 images (N, C, H, W) plus int64 labels; pixels scale to [0, 1] on access."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and self.labels.max() >= self.num_classes:
            raise DatasetError(f"label {self.labels.max()} >= num_classes {self.num_classes}")

    def __len__(self) -> int:
        return len(self.labels)

    def pixels(self, idx=slice(None)) -> np.ndarray:
        return self.images[idx].astype(np.float32) / np.float32(255.0)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


# -- CIFAR-10 ---------------------------------------------------------------


def read_cifar10_file(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise DatasetError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DatasetError(f"{path}: label byte {labels.max()} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).copy()
    return Dataset(images, labels, 10)


def write_cifar10_file(path, images: np.ndarray, labels) -> None:
    """Inverse of :func:`read_cifar10_file`; images are uint8 (N, 3, 32, 32)."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(images), -1)
    labels = np.asarray(labels, dtype=np.uint8)[:, None]
    Path(path).write_bytes(np.concatenate([labels, images], axis=1).tobytes())


def _concat(parts: list[Dataset]) -> Dataset:
    return Dataset(
        np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]), 10
    )


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    """Read ``data_batch_{1..5}.bin`` and ``test_batch.bin`` from ``directory``.

    Missing training batches are tolerated as long as at least one exists,
    which keeps trimmed copies of the dataset usable.
    """
    d = Path(directory)
    if d.is_dir() and not (d / CIFAR_TEST_FILE).exists() and (d / "cifar-10-batches-bin").is_dir():
        d = d / "cifar-10-batches-bin"
    train_files = [d / f for f in CIFAR_TRAIN_FILES if (d / f).exists()]
    if not train_files or not (d / CIFAR_TEST_FILE).exists():
        raise DatasetError(f"{directory}: CIFAR-10 binary batches not found")
    return _concat([read_cifar10_file(f) for f in train_files]), read_cifar10_file(d / CIFAR_TEST_FILE)


# -- MNIST ----------------------------------------------------------------


def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """28×28 IDX images zero-padded by 2 pixels on every side to 32×32."""
    img_raw = _read_maybe_gzip(images_path)
    lbl_raw = _read_maybe_gzip(labels_path)
    if len(img_raw) < 16 or len(lbl_raw) < 8:
        raise DatasetError("IDX file shorter than its header")
    magic, n, rows, cols = struct.unpack(">IIII", img_raw[:16])
    if magic != MNIST_IMAGES_MAGIC:
        raise DatasetError(f"{images_path}: magic {magic}, expected {MNIST_IMAGES_MAGIC}")
    lmagic, ln = struct.unpack(">II", lbl_raw[:8])
    if lmagic != MNIST_LABELS_MAGIC:
        raise DatasetError(f"{labels_path}: magic {lmagic}, expected {MNIST_LABELS_MAGIC}")
    if n != ln:
        raise DatasetError(f"{n} images but {ln} labels")
    if len(img_raw) != 16 + n * rows * cols or len(lbl_raw) != 8 + n:
        raise DatasetError("IDX payload length does not match its header")
    imgs = np.frombuffer(img_raw, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    labels = np.frombuffer(lbl_raw, dtype=np.uint8, offset=8).astype(np.int64)
    py, px = (32 - rows) // 2, (32 - cols) // 2
    padded = np.zeros((n, 1, 32, 32), dtype=np.uint8)
    padded[:, :, py : py + rows, px : px + cols] = imgs
    return Dataset(padded, labels, 10)


def write_mnist_idx(images_path, labels_path, images: np.ndarray, labels) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", MNIST_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    labels = np.asarray(labels, dtype=np.uint8)
    Path(labels_path).write_bytes(struct.pack(">II", MNIST_LABELS_MAGIC, len(labels)) + labels.tobytes())


# -- subsets, normalization, augmentation ----------------------------------


def balanced_subset(ds: Dataset, size: int) -> Dataset:
    """First ``size // K`` samples of every class in file order (remainder to low classes)."""
    if size >= len(ds):
        return ds
    k = ds.num_classes
    quota = np.full(k, size // k)
    quota[: size % k] += 1
    chosen = []
    for c in range(k):
        chosen.append(np.flatnonzero(ds.labels == c)[: quota[c]])
    idx = np.sort(np.concatenate(chosen))
    return ds.subset(idx)


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "NormStats":
        chans = [ds.images[:, c].astype(np.float64) / 255.0 for c in range(ds.images.shape[1])]
        if any(ch.size == 0 or ch.min() == ch.max() for ch in chans):
            raise DatasetError("a channel has zero standard deviation; cannot normalize")
        mean = np.array([ch.mean() for ch in chans])
        std = np.array([ch.std() for ch in chans])
        return cls(tuple(float(v) for v in mean), tuple(float(v) for v in std))

    def _arrays(self, ndim: int):
        shape = (-1, 1, 1) if ndim == 3 else (1, -1, 1, 1)
        return (np.asarray(self.mean, np.float32).reshape(shape),
                np.asarray(self.std, np.float32).reshape(shape))


def normalize(img: np.ndarray, stats: NormStats) -> np.ndarray:
    mean, std = stats._arrays(img.ndim)
    return (img - mean) / std


def denormalize(img: np.ndarray, stats: NormStats) -> np.ndarray:
    mean, std = stats._arrays(img.ndim)
    return img * std + mean


def flip_crop(img: np.ndarray, flip: bool, dy: int, dx: int) -> np.ndarray:
    """Optional horizontal mirror, zero-pad by 4, crop the original size at (dy, dx)."""
    if flip:
        img = img[..., ::-1]
    h, w = img.shape[-2:]
    lead = ((0, 0),) * (img.ndim - 2)
    padded = np.pad(img, lead + ((PAD, PAD), (PAD, PAD)))
    return np.ascontiguousarray(padded[..., dy : dy + h, dx : dx + w])


def augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip (p=0.5) then a random pad-4 crop of one (C,H,W) image."""
    flip = bool(rng.random() < 0.5)
    dy, dx = rng.integers(0, 2 * PAD + 1, 2)
    return flip_crop(img, flip, int(dy), int(dx))


class BatchIterator:
    """Seeded epoch iterator over a :class:`Dataset`.

    Every epoch is a permutation of the dataset. Augmentation draws are
    keyed by (seed, epoch, sample index), so they do not depend on batch
    order.
    """

    def __init__(self, dataset: Dataset, batch_size: int, seed: int, stats: NormStats | None = None,
                 augment: bool = True):
        if len(dataset) == 0:
            raise DatasetError("cannot iterate an empty dataset")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.stats = stats
        self.augment = augment

    def __len__(self) -> int:
        return -(-len(self.dataset) // self.batch_size)

    def order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch, 0]).permutation(len(self.dataset))

    def epoch(self, epoch: int):
        n = len(self.dataset)
        order = self.order(epoch)
        aug = np.random.default_rng([self.seed, epoch, 1])
        flips = aug.random(n) < 0.5
        offsets = aug.integers(0, 2 * PAD + 1, (n, 2))
        for start in range(0, n, self.batch_size):
            idx = order[start : start + self.batch_size]
            x = self.dataset.pixels(idx)
            if self.augment:
                x = np.stack([flip_crop(im, flips[i], *offsets[i]) for im, i in zip(x, idx)])
            if self.stats is not None:
                x = normalize(x, self.stats)
            yield x.astype(np.float32, copy=False), self.dataset.labels[idx]


# -- synthetic stand-in ------------------------------------------------------

_SYN_COLORS = np.array(
    [[230, 40, 40], [40, 200, 60], [50, 80, 230], [230, 210, 40], [200, 60, 200]], dtype=np.float64
)


def _shape_mask(kind: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    c = (size - 1) / 2
    if kind == 0:  # filled disc
        return (yy - c) ** 2 + (xx - c) ** 2 <= c**2
    # plus sign
    t = max(size // 4, 1)
    return (np.abs(yy - c) <= t) | (np.abs(xx - c) <= t)


def synthetic_cifar(n_train: int, n_test: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Ten-class 32×32 RGB toy data in the CIFAR layout.

    Class ``c`` is a coloured object (5 colours × disc/plus) pasted at a
    random place on a noisy textured background that also holds a grey
    distractor patch. Used for tests and offline demos when the real
    CIFAR-10 files are not at hand.
    """
    rng = np.random.default_rng([seed, 0xC1FA])

    def make(n):
        labels = np.arange(n) % 10
        rng.shuffle(labels)
        imgs = np.empty((n, 3, 32, 32), dtype=np.uint8)
        for i, c in enumerate(labels):
            base = rng.uniform(40, 160, 3)
            tex = rng.normal(0, 1, (3, 8, 8)).repeat(4, 1).repeat(4, 2) * 18
            img = base[:, None, None] + tex + rng.normal(0, 10, (3, 32, 32))
            dsize = int(rng.integers(5, 10))
            dy, dx = rng.integers(0, 32 - dsize, 2)
            img[:, dy : dy + dsize, dx : dx + dsize] = rng.uniform(60, 200)
            size = int(rng.integers(10, 17))
            oy, ox = rng.integers(0, 32 - size, 2)
            shape = _shape_mask(c // 5, size)
            color = _SYN_COLORS[c % 5] * rng.uniform(0.8, 1.1)
            region = img[:, oy : oy + size, ox : ox + size]
            region[:, shape] = color[:, None] + rng.normal(0, 12, (3, int(shape.sum())))
            imgs[i] = np.clip(img, 0, 255).astype(np.uint8)
        return Dataset(imgs, labels.astype(np.int64), 10)

    return make(n_train), make(n_test)
