"""Datasets in raw pixel units: file loaders, splitting, batching, synthetic sets.

Images are stored as float32 N×C×H×W arrays with values in [0, 255]. Loaders
for the IDX (MNIST-style) and CIFAR-10 binary formats are bit-exact; the
synthetic generators stand in for natural images at desk scale.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

PROXY_KINDS = ("uniform_noise", "gaussian_blobs", "stripe_textures")
TASK_KINDS = ("gratings", "palettes")


class DataFormatError(ValueError):
    """An input file does not follow its declared format."""


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""
    class_count: int | None = None

    def __post_init__(self):
        imgs = np.asarray(self.images, dtype=np.float32)
        if imgs.ndim != 4:
            raise ValueError(f"images must be N×C×H×W, got shape {imgs.shape}")
        if imgs.size and (imgs.min() < 0 or imgs.max() > 255):
            raise ValueError("pixel values must lie in [0, 255]")
        object.__setattr__(self, "images", imgs)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (imgs.shape[0],):
                raise ValueError(f"{labels.shape[0] if labels.ndim else 0} labels "
                                 f"for {imgs.shape[0]} images")
            k = self.class_count
            if k is None:
                k = int(labels.max()) + 1 if labels.size else 0
                object.__setattr__(self, "class_count", k)
            if labels.size and (labels.min() < 0 or labels.max() >= k):
                raise ValueError(f"labels must lie in [0, {k})")
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def subset(self, indices, name: str | None = None) -> Dataset:
        indices = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[indices]
        return Dataset(self.images[indices], labels, name or self.name, self.class_count)

    def unlabeled(self) -> Dataset:
        return Dataset(self.images, None, self.name)


# ---------------------------------------------------------------- file formats

def _read(path) -> bytes:
    return Path(path).read_bytes()


def _idx_header(buf: bytes, magic: int, what: str) -> tuple[tuple[int, ...], bytes]:
    if len(buf) < 4:
        raise DataFormatError(f"{what}: truncated header")
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise DataFormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    if len(buf) < 4 + 4 * ndim:
        raise DataFormatError(f"{what}: truncated header")
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    payload = buf[4 + 4 * ndim:]
    if len(payload) != int(np.prod(dims)):
        raise DataFormatError(f"{what}: header declares {int(np.prod(dims))} bytes, "
                              f"payload has {len(payload)} (size mismatch)")
    return dims, payload


def load_idx(images_path, labels_path=None, name: str | None = None,
             class_count: int | None = None) -> Dataset:
    """Load unsigned-byte IDX images (and optionally labels) as N×1×H×W."""
    dims, payload = _idx_header(_read(images_path), IDX_IMAGES_MAGIC, str(images_path))
    n, h, w = dims
    images = np.frombuffer(payload, dtype=np.uint8).reshape(n, 1, h, w)
    labels = None
    if labels_path is not None:
        (m,), lab = _idx_header(_read(labels_path), IDX_LABELS_MAGIC, str(labels_path))
        if m != n:
            raise DataFormatError(f"image/label count mismatch: {n} images, {m} labels")
        labels = np.frombuffer(lab, dtype=np.uint8)
    return Dataset(images.astype(np.float32), labels, name or Path(images_path).stem, class_count)


def write_idx(dataset: Dataset, images_path, labels_path=None) -> None:
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise ValueError("IDX images are single-channel")
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, h, w)
                                  + _to_bytes(dataset.images))
    if labels_path is not None:
        if dataset.labels is None:
            raise ValueError("dataset has no labels")
        Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, n)
                                      + dataset.labels.astype(np.uint8).tobytes())


def load_cifar_binary(paths: str | Path | Sequence[str | Path], name: str | None = None,
                      class_count: int | None = 10) -> Dataset:
    """Load CIFAR-10 binary batches: per record one label byte, then planar R, G, B."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks = []
    for p in paths:
        buf = _read(p)
        if len(buf) % CIFAR_RECORD:
            raise DataFormatError(f"{p}: length {len(buf)} is not a multiple of {CIFAR_RECORD}")
        chunks.append(np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    recs = np.concatenate(chunks) if chunks else np.zeros((0, CIFAR_RECORD), np.uint8)
    images = recs[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32)
    return Dataset(images, recs[:, 0], name or Path(paths[0]).stem, class_count)


def write_cifar_binary(dataset: Dataset, path) -> None:
    if dataset.sample_shape != (3, 32, 32):
        raise ValueError(f"CIFAR records are 3×32×32, got {dataset.sample_shape}")
    labels = dataset.labels if dataset.labels is not None else np.zeros(len(dataset), np.int64)
    if labels.size and labels.max() > 255:
        raise ValueError("CIFAR labels are single bytes")
    recs = np.empty((len(dataset), CIFAR_RECORD), dtype=np.uint8)
    recs[:, 0] = labels
    recs[:, 1:] = _to_bytes_array(dataset.images).reshape(len(dataset), -1)
    Path(path).write_bytes(recs.tobytes())


def _to_bytes_array(images: np.ndarray) -> np.ndarray:
    if not np.array_equal(images, np.round(images)):
        raise ValueError("byte formats need integer-valued pixels")
    return images.astype(np.uint8)


def _to_bytes(images: np.ndarray) -> bytes:
    return _to_bytes_array(images).tobytes()


def load_dataset(path: str | Path, labels: str | Path | None = None,
                 class_count: int | None = None) -> Dataset:
    """Load by extension: ``.bin`` is CIFAR binary (comma-separated lists allowed), else IDX."""
    text = str(path)
    parts = [p for p in text.split(",") if p]
    for p in parts + ([str(labels)] if labels else []):
        if not Path(p).is_file():
            raise FileNotFoundError(p)
    if all(p.endswith(".bin") for p in parts):
        return load_cifar_binary(parts, class_count=class_count or 10)
    if len(parts) != 1:
        raise DataFormatError("multiple paths are only supported for CIFAR .bin files")
    return load_idx(parts[0], labels, class_count=class_count)


# ---------------------------------------------------------------- splitting / batching

def split(dataset: Dataset, train_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded random partition into train and test parts."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(dataset)
    n_train = int(round(n * train_fraction))
    if n_train == 0 or n_train == n:
        raise ValueError(f"fraction {train_fraction} of {n} samples leaves an empty part")
    perm = np.random.default_rng(seed).permutation(n)
    return (dataset.subset(np.sort(perm[:n_train]), f"{dataset.name}-train"),
            dataset.subset(np.sort(perm[n_train:]), f"{dataset.name}-test"))


class Batch(NamedTuple):
    indices: np.ndarray
    images: np.ndarray
    labels: np.ndarray | None


class BatchIterator:
    """Seeded mini-batches; each ``iter()`` is one epoch with its own shuffle.

    Epoch ``e`` is shuffled with seed ``seed ^ e``; the last batch may be short.
    """

    def __init__(self, dataset: Dataset, batch_size: int = 32, seed: int = 0):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0

    def __len__(self) -> int:
        return -(-len(self.dataset) // self.batch_size)

    def order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng(self.seed ^ epoch).permutation(len(self.dataset))

    def __iter__(self) -> Iterator[Batch]:
        perm = self.order(self.epoch)
        self.epoch += 1
        ds = self.dataset
        for start in range(0, len(perm), self.batch_size):
            idx = perm[start:start + self.batch_size]
            yield Batch(idx, ds.images[idx], None if ds.labels is None else ds.labels[idx])


def batches(dataset: Dataset, b: int = 32, seed: int = 0) -> BatchIterator:
    return BatchIterator(dataset, b, seed)


# ---------------------------------------------------------------- synthetic data

def _finish(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(x), 0, 255).astype(np.float32)


def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return yy - (h - 1) / 2, xx - (w - 1) / 2


def synth_proxy(kind: str, n: int, shape: Sequence[int] = (3, 32, 32), seed: int = 0) -> Dataset:
    """Unlabeled images unrelated to any task, for label-free pattern search.

    ``uniform_noise`` is i.i.d. pixels; ``gaussian_blobs`` and ``stripe_textures``
    carry spatial structure.
    """
    if kind not in PROXY_KINDS:
        raise ValueError(f"kind must be one of {PROXY_KINDS}")
    if n < 1:
        raise ValueError("n must be positive")
    c, h, w = shape
    rng = np.random.default_rng(seed)
    if kind == "uniform_noise":
        imgs = rng.integers(0, 256, size=(n, c, h, w)).astype(np.float64)
    elif kind == "gaussian_blobs":
        yy, xx = _grid(h, w)
        imgs = np.empty((n, c, h, w))
        for i in range(n):
            img = np.full((c, h, w), 128.0)
            for _ in range(rng.integers(2, 6)):
                cy, cx = rng.uniform(-h / 2, h / 2), rng.uniform(-w / 2, w / 2)
                s = rng.uniform(2.0, max(h, w) / 3)
                amp = rng.uniform(-90, 90, size=(c, 1, 1))
                img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
            imgs[i] = img
    else:
        yy, xx = _grid(h, w)
        imgs = np.empty((n, c, h, w))
        for i in range(n):
            theta = rng.uniform(0, np.pi)
            freq = rng.uniform(0.05, 0.4)
            wave = np.sign(np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta))
                                  + rng.uniform(0, 2 * np.pi)))
            lo, hi = rng.uniform(0, 110, size=(c, 1, 1)), rng.uniform(145, 255, size=(c, 1, 1))
            imgs[i] = lo + (hi - lo) * (wave + 1) / 2
    return Dataset(_finish(imgs), None, f"proxy-{kind}")


def synth_task(kind: str, n: int, shape: Sequence[int] = (3, 32, 32), seed: int = 0,
               class_count: int = 10, noise: float = 6.0,
               contrast: tuple[float, float] = (10.0, 30.0)) -> Dataset:
    """Labeled synthetic classification data with balanced classes.

    ``gratings``: class k is a sinusoidal grating oriented at about k·180°/K, with
    random frequency, phase, contrast and colors over a smooth random background.
    ``palettes``: class k fixes a pair of hues painted as soft random blobs; a
    different family meant for transfer experiments.
    Grating amplitude is drawn uniformly from ``contrast``, so a perturbation
    bounded by 10 raw units is comparable to the signal. Both kinds add i.i.d.
    Gaussian pixel noise of std ``noise``.
    """
    if kind not in TASK_KINDS:
        raise ValueError(f"kind must be one of {TASK_KINDS}")
    c, h, w = shape
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % class_count
    rng.shuffle(labels)
    yy, xx = _grid(h, w)
    imgs = np.empty((n, c, h, w))
    if kind == "gratings":
        step = np.pi / class_count
        for i, k in enumerate(labels):
            theta = k * step + rng.uniform(-0.3, 0.3) * step
            freq = rng.uniform(0.08, 0.22)
            wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta))
                          + rng.uniform(0, 2 * np.pi))
            base = rng.uniform(70, 185, size=(c, 1, 1))
            amp = rng.uniform(*contrast) * rng.uniform(0.6, 1.0, size=(c, 1, 1))
            gy, gx = rng.normal(0, 1.2, size=2)
            background = gy * yy + gx * xx
            imgs[i] = base + amp * wave + background
    else:
        hues = _palette(class_count, c)
        for i, k in enumerate(labels):
            img = np.full((c, h, w), 0.0) + rng.uniform(90, 165, size=(c, 1, 1))
            for j in range(4):
                color = hues[k][j % 2]
                cy, cx = rng.uniform(-h / 2, h / 2), rng.uniform(-w / 2, w / 2)
                s = rng.uniform(3.0, 8.0)
                mask = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
                img = img * (1 - mask) + color[:, None, None] * mask
            imgs[i] = img
    imgs += rng.normal(0, noise, size=imgs.shape)
    return Dataset(_finish(imgs), labels, f"synth-{kind}", class_count)


def _palette(class_count: int, channels: int) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for k in range(class_count):
        a = 2 * np.pi * k / class_count
        b = a + np.pi * (0.5 + 0.5 * (k % 2))
        col = lambda t: 127.5 + 110 * np.cos(t + 2 * np.pi * np.arange(channels) / max(channels, 1))
        out.append((col(a), col(b)))
    return out
