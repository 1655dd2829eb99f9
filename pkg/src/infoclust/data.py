"""Dataset loaders and mini-batch iteration.

Train and test splits are pooled into a single clustering set. Labels are
kept behind :meth:`Dataset.evaluation_labels`; the training path only ever
receives ``Dataset.images``.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import idctn

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

MNIST_FILES = (
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
)
CIFAR_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6)) + ("test_batch.bin",)


@dataclass(frozen=True)
class Dataset:
    name: str
    images: np.ndarray
    n_classes: int
    _labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) == 0:
            raise ValueError("images must be a non-empty (N, C, H, W) array")
        if len(self._labels) != len(self.images):
            raise ValueError(f"{len(self.images)} images but {len(self._labels)} labels")
        if self._labels.min() < 0 or self._labels.max() >= self.n_classes:
            raise ValueError("labels out of range")
        self.images.setflags(write=False)
        self._labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def evaluation_labels(self) -> np.ndarray:
        """Ground truth, for evaluation code only."""
        return self._labels

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.name, self.images[idx].copy(), self.n_classes, self._labels[idx].copy())


def data_dir(path=None) -> Path:
    return Path(path or os.environ.get("INFOCLUST_DATA_DIR", "data"))


def _read_bytes(path: Path) -> bytes:
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def read_idx(path) -> np.ndarray:
    """Parse an IDX image (magic 0x803) or label (0x801) file, optionally gzipped."""
    data = _read_bytes(Path(path))
    if len(data) < 4:
        raise ValueError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise ValueError(f"{path}: bad magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise ValueError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims))
    if len(data) - header < count:
        raise ValueError(f"{path}: truncated payload, expected {count} bytes")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx_pair(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise ValueError("expected (N, H, W) images and (N,) labels")
    if len(images) != len(labels):
        raise ValueError(f"count mismatch: {len(images)} images, {len(labels)} labels")
    return images, labels


def load_mnist(path=None) -> Dataset:
    """Pooled MNIST train+test set, 70,000 x 1 x 28 x 28 in [0, 1]."""
    root = data_dir(path)
    if (root / "mnist").is_dir():
        root = root / "mnist"
    xs, ys = [], []
    for img, lab in MNIST_FILES:
        x, y = load_idx_pair(root / img, root / lab)
        xs.append(x)
        ys.append(y)
    images = np.concatenate(xs)[:, None].astype(np.float32) / 255.0
    return Dataset("mnist", images, 10, np.concatenate(ys).astype(np.int64))


def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) == 0 or len(data) % CIFAR_RECORD:
        raise ValueError(f"{path}: size {len(data)} is not a multiple of {CIFAR_RECORD}-byte records")
    rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32), rec[:, 0].astype(np.int64)


def load_cifar10(path=None) -> Dataset:
    """Pooled CIFAR-10 train+test set, 60,000 x 3 x 32 x 32 in [0, 1]."""
    root = data_dir(path)
    for sub in ("cifar10", "cifar-10-batches-bin"):
        if (root / sub).is_dir():
            root = root / sub
    xs, ys = zip(*(read_cifar_batch(root / f) for f in CIFAR_FILES))
    images = np.concatenate(xs).astype(np.float32) / 255.0
    labels = np.concatenate(ys)
    if labels.max() >= 10:
        raise ValueError("CIFAR-10 label out of range")
    return Dataset("cifar10", images, 10, labels)


def write_raw(path, images: np.ndarray) -> None:
    """Write the raw image container: four big-endian u32 (N, C, H, W) then LE f32."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise ValueError("expected (N, C, H, W) images")
    Path(path).write_bytes(struct.pack(">4I", *images.shape) + images.astype("<f4").tobytes())


def read_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise ValueError(f"{path}: truncated header")
    shape = struct.unpack(">4I", data[:16])
    count = int(np.prod(shape))
    if len(data) - 16 != 4 * count:
        raise ValueError(f"{path}: payload holds {(len(data) - 16) // 4} values, header says {count}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(shape).astype(np.float32)


def load_svhn(path=None) -> Dataset:
    """SVHN from ``svhn.raw`` (images) and ``svhn-labels-idx1-ubyte`` (labels, 0-9)."""
    root = data_dir(path)
    if (root / "svhn").is_dir():
        root = root / "svhn"
    images = read_raw(root / "svhn.raw")
    labels = read_idx(root / "svhn-labels-idx1-ubyte").astype(np.int64)
    if images.min() < 0 or images.max() > 1:
        raise ValueError("raw SVHN images must already be scaled to [0, 1]")
    return Dataset("svhn", images, 10, labels)


def _low_frequency_basis(image_shape, n: int) -> np.ndarray:
    """``n`` orthonormal cosine images (flattened columns), lowest frequencies first, no DC."""
    c, h, w = image_shape
    freqs = sorted(
        ((u, v, ch) for u in range(h) for v in range(w) for ch in range(c) if (u, v) != (0, 0)),
        key=lambda f: (f[0] + f[1], max(f[0], f[1]), f),
    )
    cols = []
    for u, v, ch in freqs[:n]:
        coef = np.zeros(image_shape)
        coef[ch, u, v] = 1.0
        cols.append(idctn(coef, axes=(1, 2), norm="ortho").ravel())
    return np.stack(cols, axis=1)


def synth_blobs(
    classes: int = 3,
    per_class: int = 200,
    image_shape=(1, 8, 8),
    separation: float = 10.0,
    seed: int = 0,
) -> Dataset:
    """Isotropic unit-variance Gaussian clusters laid out as images.

    Class means sit on a scaled orthonormal frame so every pair is exactly
    ``separation`` standard deviations apart. The frame is a random rotation
    inside the span of the lowest-frequency cosine images, which keeps class
    identity stable under crops, rescaling and brightness shifts. Pixels are
    min-max scaled to [0, 1].
    """
    image_shape = tuple(int(d) for d in image_shape)
    if classes < 2:
        raise ValueError("need at least 2 classes")
    dim = int(np.prod(image_shape))
    if dim - image_shape[0] < classes:
        raise ValueError("image too small for the requested number of classes")
    rng = np.random.default_rng(seed)
    rotation, _ = np.linalg.qr(rng.standard_normal((classes, classes)))
    means = (_low_frequency_basis(image_shape, classes) @ rotation).T * (separation / np.sqrt(2.0))
    labels = np.repeat(np.arange(classes), per_class)
    x = means[labels] + rng.standard_normal((len(labels), dim))
    order = rng.permutation(len(labels))
    x, labels = x[order], labels[order]
    lo, hi = x.min(), x.max()
    x = (x - lo) / (hi - lo)
    return Dataset("blobs", x.reshape(len(x), *image_shape).astype(np.float32), classes, labels.astype(np.int64))


def load_dataset(name: str, path=None, **kwargs) -> Dataset:
    if name == "mnist":
        return load_mnist(path)
    if name == "cifar10":
        return load_cifar10(path)
    if name == "svhn":
        return load_svhn(path)
    if name == "blobs":
        return synth_blobs(**kwargs)
    raise KeyError(f"unknown dataset {name!r}")


@dataclass
class BatchIterator:
    """Shuffled mini-batches of indices; epoch ``e`` is a fixed permutation given the seed."""

    n: int
    batch_size: int
    seed: int = 0
    drop_last: bool = False
    epoch: int = 0

    def permutation(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(self.n)

    def batches(self, epoch: int | None = None):
        e = self.epoch if epoch is None else epoch
        perm = self.permutation(e)
        for start in range(0, self.n, self.batch_size):
            idx = perm[start : start + self.batch_size]
            if self.drop_last and len(idx) < self.batch_size:
                break
            yield idx

    def __iter__(self):
        yield from self.batches()
        self.epoch += 1
