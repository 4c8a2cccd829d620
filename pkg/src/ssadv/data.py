"""Datasets: CIFAR-10 binary batches, NPY arrays, splits, augmentation and
synthetic fixtures. Images are float32 ``N x C x H x W`` in ``[0, 1]``."""
from __future__ import annotations

import ast
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import load_arrays, save_arrays

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
NPY_MAGIC = b"\x93NUMPY"


class DataFormatError(ValueError):
    pass


@dataclass
class ImageDataset:
    images: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    class_count: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) == 0:
            raise ValueError(f"{self.name}: dataset is empty")
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"{self.name}: images {self.images.shape} do not match labels {self.labels.shape}")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ValueError(f"{self.name}: pixels outside [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(f"{self.name}: labels outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, name: str | None = None) -> "ImageDataset":
        idx = np.asarray(idx)
        return ImageDataset(self.images[idx], self.labels[idx], name or self.name, self.class_count)

    def batches(self, batch_size: int, order=None):
        order = np.arange(len(self)) if order is None else order
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            yield self.images[idx], self.labels[idx]


# --- CIFAR-10 binary -------------------------------------------------------

def parse_cifar10_records(buf: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Decode 3073-byte records: label byte then R, G, B planes row-major."""
    if len(buf) % CIFAR_RECORD:
        raise DataFormatError(f"{source}: size {len(buf)} is not a multiple of {CIFAR_RECORD}")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataFormatError(f"{source}: record {bad} has label byte {labels[bad]} > 9")
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255)
    return images, labels


def read_cifar10_file(path) -> ImageDataset:
    path = Path(path)
    images, labels = parse_cifar10_records(path.read_bytes(), str(path))
    return ImageDataset(images, labels, path.stem, 10)


def load_cifar10_bin(directory, split: str = "train") -> ImageDataset:
    """Load the five training batches (``split="train"``) or the test batch."""
    directory = Path(directory)
    names = CIFAR_TRAIN_FILES if split == "train" else (CIFAR_TEST_FILE,)
    missing = [n for n in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,) if not (directory / n).is_file()]
    if missing:
        raise FileNotFoundError(f"{directory}: missing CIFAR-10 files {', '.join(missing)}")
    parts = [read_cifar10_file(directory / n) for n in names]
    return ImageDataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        f"cifar10-{split}",
        10,
    )


# --- NPY -------------------------------------------------------------------

def read_npy_header(buf: bytes, source: str = "<bytes>") -> tuple[dict, int]:
    """Parse an NPY v1/v2 header. Returns ``(header_dict, data_offset)``."""
    if buf[:6] != NPY_MAGIC:
        raise DataFormatError(f"{source}: bad NPY magic {buf[:6]!r} at offset 0")
    if len(buf) < 10:
        raise DataFormatError(f"{source}: truncated NPY preamble at offset 6")
    major, minor = buf[6], buf[7]
    if major == 1:
        (hlen,) = struct.unpack_from("<H", buf, 8)
        start = 10
    elif major == 2:
        if len(buf) < 12:
            raise DataFormatError(f"{source}: truncated NPY preamble at offset 8")
        (hlen,) = struct.unpack_from("<I", buf, 8)
        start = 12
    else:
        raise DataFormatError(f"{source}: unsupported NPY version {major}.{minor} at offset 6")
    text = buf[start : start + hlen].decode("latin1")
    try:
        header = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        raise DataFormatError(f"{source}: unparsable NPY header at offset {start}: {text!r}") from None
    if not isinstance(header, dict) or not {"descr", "fortran_order", "shape"} <= header.keys():
        raise DataFormatError(f"{source}: malformed NPY header at offset {start}: {text!r}")
    return header, start + hlen


def read_npy(path) -> np.ndarray:
    """Read a C-ordered uint8/float32 array from an NPY file."""
    path = Path(path)
    buf = path.read_bytes()
    header, offset = read_npy_header(buf, str(path))
    descr = header["descr"]
    if header["fortran_order"]:
        raise DataFormatError(f"{path}: fortran-ordered arrays are not supported; header {header!r}")
    if descr not in ("|u1", "<u1", "u1", "<f4", "|i1", "<i8", "<i4"):
        raise DataFormatError(f"{path}: unsupported dtype {descr!r}; header {header!r}")
    shape = tuple(header["shape"])
    dtype = np.dtype(descr)
    n = int(np.prod(shape, dtype=np.int64))
    if offset + n * dtype.itemsize > len(buf):
        raise DataFormatError(f"{path}: data truncated at offset {offset}; header {header!r}")
    return np.frombuffer(buf, dtype=dtype, count=n, offset=offset).reshape(shape)


def npy_to_images(arr: np.ndarray, source: str = "<array>") -> np.ndarray:
    """``N x H x W x C`` uint8 or float32 -> ``N x C x H x W`` float32 in [0, 1]."""
    if arr.ndim != 4:
        raise DataFormatError(f"{source}: expected an N x H x W x C array, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        out = arr.astype(np.float32) / np.float32(255)
    elif arr.dtype == np.float32:
        out = arr.astype(np.float32)
        if out.size and out.max() > 1:
            out = out / np.float32(255)
    else:
        raise DataFormatError(f"{source}: image arrays must be uint8 or float32, got {arr.dtype}")
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def load_npy_images(path, labels=None, name: str | None = None, class_count: int = 10) -> ImageDataset:
    images = npy_to_images(read_npy(path), str(path))
    if labels is None:
        labels = np.zeros(len(images), dtype=np.int64)
    return ImageDataset(images, labels, name or Path(path).stem, class_count)


def load_cifar10c(directory, corruption: str, severity: int) -> ImageDataset:
    """Slice one severity (10,000 images each, severities 1-5) from a CIFAR-10-C file."""
    if not 1 <= severity <= 5:
        raise ValueError(f"severity must lie in [1, 5], got {severity}")
    directory = Path(directory)
    arr = read_npy(directory / f"{corruption}.npy")
    labels = read_npy(directory / "labels.npy").astype(np.int64)
    per = len(arr) // 5
    sl = slice((severity - 1) * per, severity * per)
    return ImageDataset(npy_to_images(arr[sl]), labels[sl], f"{corruption}-{severity}", 10)


# --- containers ------------------------------------------------------------

def save_dataset(path, ds: ImageDataset) -> None:
    save_arrays(path, {"images": ds.images, "labels": ds.labels.astype(np.float32)},
                {"name": ds.name, "class_count": ds.class_count})


def load_dataset(path) -> ImageDataset:
    arrays, meta = load_arrays(path)
    return ImageDataset(arrays["images"], arrays["labels"].astype(np.int64), meta["name"], meta["class_count"])


# --- splits and augmentation ----------------------------------------------

def split_train_val(ds: ImageDataset, val_fraction: float = 0.15, seed: int = 0):
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_val = int(round(len(ds) * val_fraction))
    return ds.subset(np.sort(perm[n_val:]), ds.name + "-train"), ds.subset(np.sort(perm[:n_val]), ds.name + "-val")


def hflip(batch: np.ndarray) -> np.ndarray:
    return batch[..., ::-1]


def crop(batch: np.ndarray, offsets, pad: int = 4) -> np.ndarray:
    """Reflection-pad by ``pad`` and crop at per-image ``(dy, dx)`` offsets."""
    B, C, H, W = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    out = np.empty_like(batch)
    for i, (dy, dx) in enumerate(np.asarray(offsets).reshape(B, 2)):
        out[i] = padded[i, :, dy : dy + H, dx : dx + W]
    return out


def augment(batch: np.ndarray, rng: np.random.Generator, pad: int = 4, enabled: bool = True) -> np.ndarray:
    """Random reflection-padded crop plus horizontal flip with probability 1/2."""
    if not enabled:
        return batch
    B = len(batch)
    out = crop(batch, rng.integers(0, 2 * pad + 1, size=(B, 2)), pad)
    flip = rng.random(B) < 0.5
    out[flip] = hflip(out[flip])
    return out


# --- synthetic -------------------------------------------------------------

def synthetic_dataset(kind: str, n: int, seed: int = 0, shape=(3, 32, 32), num_classes: int = 2,
                      separation: float = 6.0, sigma: float = 0.05) -> ImageDataset:
    """Test fixtures with known structure.

    ``two-gaussians-images``: pixels ``0.5 + sigma * noise`` shifted by
    ``+-separation * sigma / 2`` along a random unit direction; the Bayes
    accuracy is ``Phi(separation / 2)``. ``striped-classes``: class ``k`` is a
    sinusoidal grating whose orientation and frequency encode ``k``.
    Classes are balanced (round-robin labels).
    """
    if n < num_classes:
        raise ValueError(f"n={n} must be at least the class count {num_classes}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    C, H, W = shape
    if kind == "two-gaussians-images":
        if num_classes != 2:
            raise ValueError("two-gaussians-images has exactly 2 classes")
        d = C * H * W
        u = rng.standard_normal(d)
        u /= np.linalg.norm(u)
        sign = np.where(labels == 1, 1.0, -1.0)[:, None]
        x = 0.5 + sigma * rng.standard_normal((n, d)) + sign * (separation * sigma / 2) * u
        images = np.clip(x, 0, 1).reshape(n, C, H, W)
        ds = ImageDataset(images, labels, kind, 2)
        ds.direction = u.reshape(shape)
        return ds
    if kind == "striped-classes":
        yy, xx = np.mgrid[0:H, 0:W]
        images = np.empty((n, C, H, W))
        for i, k in enumerate(labels):
            freq = 1 + k // 2
            coord = yy if k % 2 == 0 else xx
            phase = rng.uniform(0, 2 * np.pi)
            pattern = 0.5 + 0.3 * np.sin(2 * np.pi * freq * coord / H + phase)
            images[i] = pattern + sigma * rng.standard_normal((C, H, W))
        return ImageDataset(np.clip(images, 0, 1), labels, kind, num_classes)
    raise ValueError(f"unknown synthetic dataset kind {kind!r}")
