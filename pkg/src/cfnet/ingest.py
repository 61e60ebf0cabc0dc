"""MNIST loading, rate encoding, task partitioning and Poisson spike generation."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


class IdxError(ValueError):
    """Base class for IDX container problems."""


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


class DegenerateSampleError(ValueError):
    """Raised for an all-zero image, which has no direction to encode."""


class MissingClassError(ValueError):
    pass


@dataclass(frozen=True)
class RawDataset:
    images: np.ndarray  # (N, rows*cols) uint8
    labels: np.ndarray  # (N,) uint8
    shape: tuple[int, int] = (28, 28)

    def __post_init__(self):
        if self.images.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("images must be 2-D and labels 1-D")
        if len(self.images) != len(self.labels):
            raise CountMismatchError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and self.labels.max() > 9:
            raise ValueError("labels must lie in [0, 9]")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "RawDataset":
        indices = np.asarray(indices)
        return RawDataset(self.images[indices], self.labels[indices], self.shape)

    def rates(self) -> np.ndarray:
        """All samples as unit-norm rate vectors, shape (N, rows*cols)."""
        return to_rate_matrix(self.images)


def _read_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _parse_header(buf: bytes, magic: int, ndims: int, what: str) -> tuple[int, ...]:
    need = 4 + 4 * ndims
    if len(buf) < need:
        raise TruncatedFileError(f"{what}: header needs {need} bytes, got {len(buf)}")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise BadMagicError(f"{what}: magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{ndims}I", buf[4:need])


def parse_idx_images(buf: bytes) -> np.ndarray:
    n, rows, cols = _parse_header(buf, IMAGES_MAGIC, 3, "images")
    body = n * rows * cols
    if len(buf) - 16 < body:
        raise TruncatedFileError(f"images: expected {body} pixel bytes, got {len(buf) - 16}")
    return np.frombuffer(buf, dtype=np.uint8, count=body, offset=16).reshape(n, rows, cols)


def parse_idx_labels(buf: bytes) -> np.ndarray:
    (n,) = _parse_header(buf, LABELS_MAGIC, 1, "labels")
    if len(buf) - 8 < n:
        raise TruncatedFileError(f"labels: expected {n} label bytes, got {len(buf) - 8}")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=8)


def load_idx(images_path, labels_path) -> RawDataset:
    """Read an MNIST image/label file pair (plain or gzipped IDX)."""
    images = parse_idx_images(_read_bytes(images_path))
    labels = parse_idx_labels(_read_bytes(labels_path))
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    n, rows, cols = images.shape
    return RawDataset(images.reshape(n, rows * cols).copy(), labels.copy(), (rows, cols))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write images (N, rows, cols) and labels in IDX format; used for fixtures."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(
        struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + images.tobytes()
    )
    Path(labels_path).write_bytes(
        struct.pack(">II", LABELS_MAGIC, len(labels)) + np.asarray(labels, np.uint8).tobytes()
    )


def load_mnist(data_dir, split: str = "train") -> RawDataset:
    names = {"train": TRAIN_FILES, "test": TEST_FILES}[split]
    data_dir = Path(data_dir)
    paths = []
    for name in names:
        p = data_dir / name
        if not p.exists() and (data_dir / (name + ".gz")).exists():
            p = data_dir / (name + ".gz")
        paths.append(p)
    return load_idx(*paths)


def to_rate_vector(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64).ravel()
    if np.any(image < 0):
        raise ValueError("pixel intensities must be nonnegative")
    norm = np.linalg.norm(image)
    if norm == 0:
        raise DegenerateSampleError("all-zero image cannot be normalized")
    return image / norm


def to_rate_matrix(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms.ravel() == 0)[0])
        raise DegenerateSampleError(f"sample {bad} is all zero")
    return x / norms


@dataclass
class Task:
    classes: tuple[int, ...]
    indices: np.ndarray  # presentation order, epochs already unrolled


@dataclass
class TaskSchedule:
    tasks: list[Task]
    epochs: int
    seed: int
    class_order: tuple[int, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def n_presentations(self) -> int:
        return sum(len(t.indices) for t in self.tasks)


def partition_tasks(labels, class_order: Sequence[int], epochs: int, seed: int) -> TaskSchedule:
    """One task per class, in ``class_order``; each epoch is a fresh seeded shuffle."""
    labels = np.asarray(getattr(labels, "labels", labels))
    order = tuple(int(c) for c in class_order)
    if len(set(order)) != len(order):
        raise ValueError(f"class order has repeats: {order}")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    rng = np.random.default_rng(seed)
    tasks = []
    for c in order:
        members = np.flatnonzero(labels == c)
        if len(members) == 0:
            raise MissingClassError(f"class {c} has no samples")
        seq = np.concatenate([rng.permutation(members) for _ in range(epochs)])
        tasks.append(Task((c,), seq))
    return TaskSchedule(tasks, epochs, seed, order)


def interleaved_schedule(labels, classes: Sequence[int], epochs: int, seed: int) -> TaskSchedule:
    """Control curriculum: all listed classes shuffled together into one stage."""
    labels = np.asarray(getattr(labels, "labels", labels))
    classes = tuple(int(c) for c in classes)
    for c in classes:
        if not np.any(labels == c):
            raise MissingClassError(f"class {c} has no samples")
    members = np.flatnonzero(np.isin(labels, classes))
    rng = np.random.default_rng(seed)
    seq = np.concatenate([rng.permutation(members) for _ in range(epochs)])
    return TaskSchedule([Task(classes, seq)], epochs, seed, classes)


@dataclass(frozen=True)
class SpikeEvent:
    time: float
    kind: str  # "input" | "output" | "dopamine"
    index: int = -1


class SpikeSource:
    """Merged Poisson spike stream over all input channels.

    Draws the gap to the next event from Exp(sum of rates) and picks the
    channel with probability proportional to its rate, so memory use does
    not depend on the number of channels. Events come out in chunks of
    ``(times, channels)`` arrays for the simulation kernel.
    """

    def __init__(self, rates, rate_scale: float, rng: np.random.Generator,
                 start: float = 0.0, chunk: int = 1024):
        if rate_scale <= 0:
            raise ValueError("rate_scale must be positive")
        rates = np.asarray(rates, dtype=np.float64)
        self.cdf = np.cumsum(rates)
        self.total = float(self.cdf[-1]) * rate_scale
        if self.total <= 0:
            raise DegenerateSampleError("spike source needs a nonzero rate")
        self.rng = rng
        self.t = float(start)
        self.chunk = chunk
        self._last = len(rates) - 1

    def next_chunk(self, size: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        size = size or self.chunk
        gaps = self.rng.exponential(1.0 / self.total, size)
        times = self.t + np.cumsum(gaps)
        u = self.rng.random(size) * self.cdf[-1]
        channels = np.searchsorted(self.cdf, u, side="right")
        np.minimum(channels, self._last, out=channels)
        self.t = float(times[-1])
        return times, channels.astype(np.int64)


def spike_stream(rates, rate_scale: float, rng: np.random.Generator,
                 start: float = 0.0) -> Iterator[SpikeEvent]:
    """Unbounded, time-ordered stream of input spikes."""
    source = SpikeSource(rates, rate_scale, rng, start)
    while True:
        times, channels = source.next_chunk()
        for t, c in zip(times.tolist(), channels.tolist()):
            yield SpikeEvent(t, "input", c)
