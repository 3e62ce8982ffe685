"""CIFAR-10 binary batches and MNIST IDX files, normalization and augmentation.

Images are held as ``uint8`` arrays and normalized to ``[-1, 1]`` on access;
the full CIFAR-10 training set stays around 150 MB that way.
"""

import gzip
import hashlib
import os
import shutil
import struct
import tarfile
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DataFormatError
from .models import Geometry

CIFAR_RECORD = 3073
CIFAR_PIXELS = 3072
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_DIRNAME = "cifar-10-batches-bin"

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801

# canonical archives and their published MD5 sums
DOWNLOADS = {
    "cifar10": [("https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
                 "c32a1d4ab5d03f1284b67883e8d87530")],
    "mnist": [
        ("https://ossci-datasets.s3.amazonaws.com/mnist/train-images-idx3-ubyte.gz",
         "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
        ("https://ossci-datasets.s3.amazonaws.com/mnist/train-labels-idx1-ubyte.gz",
         "d53e105ee54ea40749a09fcbcd1e9432"),
        ("https://ossci-datasets.s3.amazonaws.com/mnist/t10k-images-idx3-ubyte.gz",
         "9fb629c4189551a2d022fa330f9573f3"),
        ("https://ossci-datasets.s3.amazonaws.com/mnist/t10k-labels-idx1-ubyte.gz",
         "ec29112dd5afa0611ce80d1b7f02629c"),
    ],
}


def normalize(pixel_byte):
    """Map a byte (or array of bytes) 0..255 onto [-1, 1]."""
    return np.asarray(pixel_byte, dtype=np.float64) / 255.0 * 2.0 - 1.0


def normalize_batch(images, dtype=np.float32):
    images = np.asarray(images)
    if images.dtype == np.uint8:
        return (images.astype(dtype) * np.asarray(2.0 / 255.0, dtype) - np.asarray(1.0, dtype))
    return images.astype(dtype, copy=False)


@dataclass
class LabeledImage:
    pixels: np.ndarray
    label: int


@dataclass(frozen=True)
class AugmentPolicy:
    max_shift: int = 0
    hflip: bool = False

    def __post_init__(self):
        if not 0 <= self.max_shift <= 4:
            raise ValueError(f"max_shift must lie in 0..4, got {self.max_shift}")


class ImageSet:
    """A labeled image collection that behaves like a sequence of :class:`LabeledImage`.

    ``images`` is ``uint8`` (normalized on access) or an already normalized float array.
    """

    def __init__(self, images, labels):
        images = np.asarray(images)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4:
            raise DataFormatError(f"images must be (N, C, H, W), got {images.shape}")
        if images.shape[0] != labels.shape[0]:
            raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
        self.images = images
        self.labels = labels

    def __len__(self):
        return self.labels.shape[0]

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return LabeledImage(normalize_batch(self.images[idx]), int(self.labels[idx]))
        return ImageSet(self.images[idx], self.labels[idx])

    def pixels(self, idx=slice(None), dtype=np.float32):
        return normalize_batch(self.images[idx], dtype)

    @property
    def geometry(self):
        shape = self.images.shape[1:]
        for g in Geometry:
            if g.image_shape == shape:
                return g
        raise DataFormatError(f"image shape {shape} matches neither CIFAR-10 nor MNIST")

    def head(self, n):
        return self[:n]


def _read(path):
    path = Path(path)
    if not path.exists():
        gz = path.with_name(path.name + ".gz")
        if gz.exists():
            with gzip.open(gz, "rb") as f:
                return f.read()
        raise DataFormatError(f"missing file: {path}")
    with open(path, "rb") as f:
        return f.read()


def read_cifar_batch(path):
    raw = _read(path)
    if len(raw) % CIFAR_RECORD:
        raise DataFormatError(
            f"{path}: length {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record (truncated)")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataFormatError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).copy()
    return ImageSet(images, labels)


def _cifar_dir(path):
    path = Path(path)
    if (path / CIFAR_DIRNAME).is_dir():
        return path / CIFAR_DIRNAME
    return path


def load_cifar10(path):
    """Return ``(train, test)`` from a directory of CIFAR-10 binary batches."""
    root = _cifar_dir(path)
    parts = [read_cifar_batch(root / name) for name in CIFAR_TRAIN_FILES]
    train = ImageSet(np.concatenate([p.images for p in parts]),
                     np.concatenate([p.labels for p in parts]))
    test = read_cifar_batch(root / CIFAR_TEST_FILE)
    return train, test


def read_idx(path, expected_magic):
    raw = _read(path)
    if len(raw) < 8:
        raise DataFormatError(f"{path}: file too short for an IDX header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    dims = [count]
    if ndim > 1:
        dims += list(struct.unpack(f">{ndim - 1}I", raw[8:4 + 4 * ndim]))
    offset = 4 + 4 * ndim
    need = int(np.prod(dims))
    payload = raw[offset:]
    if len(payload) < need:
        raise DataFormatError(
            f"{path}: header claims {dims} ({need} bytes) but payload has {len(payload)} (truncated)")
    return np.frombuffer(payload[:need], dtype=np.uint8).reshape(dims)


def _mnist_dir(path):
    path = Path(path)
    if (path / "mnist").is_dir():
        return path / "mnist"
    return path


def load_mnist(path):
    """Return ``(train, test)`` from MNIST IDX files (optionally gzipped)."""
    root = _mnist_dir(path)
    out = []
    for split in ("train", "test"):
        images = read_idx(root / MNIST_FILES[f"{split}_images"], MNIST_IMAGE_MAGIC)
        labels = read_idx(root / MNIST_FILES[f"{split}_labels"], MNIST_LABEL_MAGIC)
        if images.shape[0] != labels.shape[0]:
            raise DataFormatError(
                f"MNIST {split}: {images.shape[0]} images but {labels.shape[0]} labels")
        if images.shape[1:] != (28, 28):
            raise DataFormatError(f"MNIST {split}: image size {images.shape[1:]}, expected (28, 28)")
        out.append(ImageSet(images[:, None].copy(), labels.astype(np.int64)))
    return tuple(out)


def load_dataset(name, data_dir):
    if name in ("cifar", "cifar10"):
        return load_cifar10(Path(data_dir))
    if name == "mnist":
        return load_mnist(Path(data_dir))
    raise ValueError(f"unknown dataset {name!r}")


def write_idx(path, array):
    """Write a uint8 array as an IDX file (used for fixtures and conversions)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def write_cifar_batch(path, images, labels):
    images = np.asarray(images, dtype=np.uint8).reshape(-1, CIFAR_PIXELS)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    with open(path, "wb") as f:
        f.write(np.concatenate([labels, images], axis=1).tobytes())


# ---------------------------------------------------------------- augmentation

def shift_image(pixels, dx, dy, fill=0.0):
    """Translate by ``dx`` columns (right positive) and ``dy`` rows (down positive)."""
    out = np.full_like(pixels, fill)
    h, w = pixels.shape[-2:]
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src_r = slice(max(0, -dy), h - max(0, dy))
    dst_r = slice(max(0, dy), h - max(0, -dy))
    src_c = slice(max(0, -dx), w - max(0, dx))
    dst_c = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_r, dst_c] = pixels[..., src_r, src_c]
    return out


def flip_image(pixels):
    return pixels[..., ::-1].copy()


def draw_augmentation(policy, rng, n=None):
    """Draw ``(flip, dx, dy)`` for one example, or arrays of them for ``n`` examples."""
    size = None if n is None else n
    flip = rng.random(size) < 0.5 if policy.hflip else np.zeros(size if size else (), bool)
    s = policy.max_shift
    dx = rng.integers(-s, s + 1, size)
    dy = rng.integers(-s, s + 1, size)
    return flip, dx, dy


def apply_augmentation(pixels, flip, dx, dy):
    out = flip_image(pixels) if flip else pixels
    if dx or dy:
        out = shift_image(out, int(dx), int(dy))
    return out


def augment(img, policy, rng):
    """Random horizontal flip (p=1/2 when enabled) then a uniform integer shift."""
    if policy.max_shift == 0 and not policy.hflip:
        return img
    flip, dx, dy = draw_augmentation(policy, rng)
    return LabeledImage(apply_augmentation(img.pixels, bool(flip), int(dx), int(dy)), img.label)


def augment_batch(pixels, policy, flips, dxs, dys):
    if policy.max_shift == 0 and not policy.hflip:
        return pixels
    out = np.empty_like(pixels)
    for i in range(pixels.shape[0]):
        out[i] = apply_augmentation(pixels[i], bool(flips[i]), int(dxs[i]), int(dys[i]))
    return out


# --------------------------------------------------------------------- fetching

def _md5(path):
    h = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fetch(name, data_dir, downloads=None, log=print):
    """Download a dataset archive, verify its checksum, and unpack it in ``data_dir``."""
    downloads = downloads or DOWNLOADS
    if name not in downloads:
        raise ValueError(f"unknown dataset {name!r}; expected one of {sorted(downloads)}")
    data_dir = Path(data_dir)
    target = data_dir / ("mnist" if name == "mnist" else "")
    target.mkdir(parents=True, exist_ok=True)
    for url, md5 in downloads[name]:
        archive = data_dir / os.path.basename(url)
        if not archive.exists():
            log(f"downloading {url}")
            with urllib.request.urlopen(url) as resp, open(archive, "wb") as f:
                shutil.copyfileobj(resp, f)
        got = _md5(archive)
        if got != md5:
            archive.unlink()
            raise DataFormatError(f"checksum mismatch for {archive.name}: got {got}, expected {md5}")
        if archive.name.endswith(".tar.gz"):
            with tarfile.open(archive) as tar:
                tar.extractall(data_dir, filter="data")
        elif archive.name.endswith(".gz"):
            with gzip.open(archive) as src, open(target / archive.name[:-3], "wb") as dst:
                shutil.copyfileobj(src, dst)
    log(f"{name} ready in {data_dir}")
    return data_dir
