"""MNIST / CIFAR-10 binary loaders, the auxiliary split, and PGM/PPM output."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 32 * 32 * 3
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
DATA_ROOT_ENV = "FIDEL_DATA_ROOT"


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """Images kept as raw bytes; :meth:`take` yields float64 pixels in [0, 1]."""

    pixels: np.ndarray  # uint8, (N, H, W, C)
    labels: np.ndarray  # uint8, (N,)
    source: str
    split: str

    def __post_init__(self):
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 4:
            raise DataFormatError("pixels must be a uint8 array shaped (N, H, W, C)")
        if len(self.pixels) != len(self.labels):
            raise DataFormatError(f"{len(self.pixels)} images but {len(self.labels)} labels")
        if len(self.labels) and int(self.labels.max()) > 9:
            raise DataFormatError(f"label {int(self.labels.max())} out of range 0..9")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.pixels.shape[1:]

    @property
    def images(self) -> np.ndarray:
        return self.pixels / 255.0

    def take(self, indices):
        """Return ``(images, labels)`` for the given indices."""
        indices = np.asarray(indices, dtype=np.intp)
        return self.pixels[indices] / 255.0, self.labels[indices].astype(np.int64)

    def subset(self, indices, split=None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.intp)
        return Dataset(self.pixels[indices], self.labels[indices], self.source, split or self.split)


def one_hot(labels, classes=10):
    return np.eye(classes)[np.asarray(labels, dtype=np.intp)]


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists() and path.with_name(path.name + ".gz").exists():
        path = path.with_name(path.name + ".gz")
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _idx(raw: bytes, magic: int, what: str, dims: int):
    if len(raw) < 4 + 4 * dims:
        raise DataFormatError(f"{what} file too short for its header")
    (actual,) = struct.unpack(">I", raw[:4])
    if actual != magic:
        raise DataFormatError(f"{what} file: expected magic 0x{magic:08x}, got 0x{actual:08x}")
    shape = struct.unpack(f">{dims}I", raw[4 : 4 + 4 * dims])
    body = raw[4 + 4 * dims :]
    expected = int(np.prod(shape))
    if len(body) < expected:
        raise DataFormatError(f"{what} file truncated: header promises {expected} bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=expected).reshape(shape)


def load_mnist(images_path, labels_path, split="train") -> Dataset:
    images = _idx(_read_bytes(images_path), IMAGE_MAGIC, "image", 3)
    labels = _idx(_read_bytes(labels_path), LABEL_MAGIC, "label", 1)
    if len(images) != len(labels):
        raise DataFormatError(f"image file has {len(images)} items, label file has {len(labels)}")
    return Dataset(images[..., None].copy(), labels.copy(), "MNIST", split)


def _cifar_batch(path):
    raw = _read_bytes(path)
    if not raw or len(raw) % CIFAR_RECORD:
        raise DataFormatError(f"{path}: truncated batch ({len(raw)} bytes is not a whole number of records)")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataFormatError(f"{path}: record {bad[0]} has label {labels[bad[0]]}")
    # channel-planar RGB -> H x W x C
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return pixels, labels


def load_cifar10(directory, split="train") -> Dataset:
    directory = Path(directory)
    names = CIFAR_TRAIN_FILES if split == "train" else (CIFAR_TEST_FILE,)
    parts = [_cifar_batch(directory / name) for name in names]
    pixels = np.ascontiguousarray(np.concatenate([p for p, _ in parts]))
    labels = np.concatenate([lab for _, lab in parts])
    return Dataset(pixels, labels, "CIFAR10", split)


def write_mnist(pixels, labels, images_path, labels_path):
    """Write IDX image/label files (inverse of :func:`load_mnist`)."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim == 4:
        pixels = pixels[..., 0]
    n, h, w = pixels.shape
    Path(images_path).parent.mkdir(parents=True, exist_ok=True)
    Path(images_path).write_bytes(struct.pack(">4I", IMAGE_MAGIC, n, h, w) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", LABEL_MAGIC, n) + np.asarray(labels, np.uint8).tobytes())


def write_cifar_batch(pixels, labels, path):
    """Write one CIFAR-10 binary batch from H x W x C uint8 images."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    planar = pixels.transpose(0, 3, 1, 2).reshape(len(pixels), -1)
    records = np.concatenate([np.asarray(labels, np.uint8)[:, None], planar], axis=1)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(records.tobytes())


def data_root(root=None) -> Path:
    root = root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise FileNotFoundError(f"no dataset root given and ${DATA_ROOT_ENV} is not set")
    return Path(root)


def load_dataset(name, split, root=None) -> Dataset:
    """Load ``mnist`` or ``cifar10`` from ``<root>/mnist`` or ``<root>/cifar-10-batches-bin``."""
    root = data_root(root)
    if name == "mnist":
        images, labels = MNIST_FILES[split]
        return load_mnist(root / "mnist" / images, root / "mnist" / labels, split)
    if name == "cifar10":
        return load_cifar10(root / "cifar-10-batches-bin", split)
    raise ValueError(f"unknown dataset {name!r}")


def split_auxiliary(test: Dataset, n_aux=6000, expected=10000) -> tuple[Dataset, Dataset]:
    """First ``n_aux`` test images form the adversary's auxiliary set, the rest the private pool."""
    if len(test) != expected:
        raise ValueError(f"expected a {expected}-sample test set, got {len(test)}")
    aux = test.subset(np.arange(n_aux), "auxiliary")
    private = test.subset(np.arange(n_aux, len(test)), "private-pool")
    return aux, private


# -- image output -------------------------------------------------------------


def to_bytes(tensor, normalize=False) -> np.ndarray:
    t = np.asarray(tensor, dtype=np.float64)
    if t.ndim == 2:
        t = t[..., None]
    if t.ndim != 3 or t.shape[-1] not in (1, 3):
        raise ValueError(f"expected an H x W x 1 or H x W x 3 image, got shape {t.shape}")
    if normalize:
        lo, hi = float(t.min()), float(t.max())
        t = (t - lo) / (hi - lo) if hi > lo else np.zeros_like(t)
    return np.clip(np.rint(t * 255.0), 0, 255).astype(np.uint8)


def emit_image(tensor, path, normalize=False) -> Path:
    """Write a binary PGM (1 channel) or PPM (3 channels), maxval 255."""
    img = to_bytes(tensor, normalize)
    h, w, c = img.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tag = b"P5" if c == 1 else b"P6"
    path.write_bytes(tag + f"\n{w} {h}\n255\n".encode() + img.tobytes())
    return path


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM/PPM back as uint8 H x W x C."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise DataFormatError(f"unsupported PNM header {magic!r} maxval {maxval}")
    c = 1 if magic == b"P5" else 3
    return np.frombuffer(raw[pos : pos + h * w * c], dtype=np.uint8).reshape(h, w, c)


def tile_grid(tiles, cols=None, pad=1, normalize_each=True) -> np.ndarray:
    """Arrange equally shaped images into one mosaic (values in [0, 1])."""
    tiles = [np.asarray(t, dtype=np.float64) for t in tiles]
    if not tiles:
        raise ValueError("no tiles to arrange")
    tiles = [t[..., None] if t.ndim == 2 else t for t in tiles]
    h, w, c = tiles[0].shape
    cols = cols or min(len(tiles), 12)
    rows = -(-len(tiles) // cols)
    grid = np.zeros((rows * (h + pad) + pad, cols * (w + pad) + pad, c))
    for k, t in enumerate(tiles):
        t = to_bytes(t, normalize_each) / 255.0
        r, q = divmod(k, cols)
        grid[pad + r * (h + pad) : pad + r * (h + pad) + h, pad + q * (w + pad) : pad + q * (w + pad) + w] = t
    return grid
