"""IDX dataset ingestion and the bundled MNIST subset.

The IDX container: two zero bytes, a dtype code, the number of dimensions,
then one big-endian u32 per dimension, then the raw payload. Files ending in
``.gz`` are decompressed transparently.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..numcore import FreegradError, ShapeError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
LABEL_SMOOTHING = 0.1

_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: np.dtype(">i2"), 0x0C: np.dtype(">i4"),
           0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}
_CODES = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09, np.dtype(">i2"): 0x0B, np.dtype(">i4"): 0x0C,
          np.dtype(">f4"): 0x0D, np.dtype(">f8"): 0x0E}

_SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(FreegradError, ValueError):
    """Malformed, truncated or mismatched IDX content."""


def _read_bytes(path: str | Path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"IDX file not found: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(raw: bytes, expected_magic: int | None = None, source: str = "<bytes>") -> np.ndarray:
    """Decode an IDX byte string into an array with its declared shape."""
    if len(raw) < 4:
        raise IdxFormatError(f"{source}: truncated header ({len(raw)} bytes)")
    magic = struct.unpack(">I", raw[:4])[0]
    if raw[0] != 0 or raw[1] != 0 or raw[2] not in _DTYPES:
        raise IdxFormatError(f"{source}: bad magic 0x{magic:08x}")
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(f"{source}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{source}: truncated dimension table")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    dtype = np.dtype(_DTYPES[raw[2]])
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) - header < need:
        raise IdxFormatError(f"{source}: truncated payload ({len(raw) - header} of {need} bytes)")
    return np.frombuffer(raw, dtype=dtype, count=need // dtype.itemsize, offset=header).reshape(dims)


def read_idx(path: str | Path, expected_magic: int | None = None) -> np.ndarray:
    return parse_idx(_read_bytes(path), expected_magic, str(path))


def write_idx(path: str | Path, array: np.ndarray) -> None:
    """Write ``array`` as IDX (gzip when the name ends in ``.gz``, with no stored name and a zero mtime for reproducibility)."""
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder(">") if arr.dtype.itemsize > 1 else arr.dtype
    if np.dtype(dt) not in _CODES:
        raise IdxFormatError(f"unsupported IDX dtype {arr.dtype}")
    payload = struct.pack(">BBBB", 0, 0, _CODES[np.dtype(dt)], arr.ndim)
    payload += struct.pack(">" + "I" * arr.ndim, *arr.shape) + arr.astype(dt).tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        with open(path, "wb") as raw_fh, gzip.GzipFile(filename="", fileobj=raw_fh, mode="wb", mtime=0) as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


def one_hot(labels: np.ndarray, n_classes: int = 10, smoothing: float = LABEL_SMOOTHING) -> np.ndarray:
    """Targets with ``smoothing`` on the wrong classes and ``1 - smoothing`` on the right one."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ShapeError(f"labels must lie in [0, {n_classes})")
    out = np.full((labels.shape[0], n_classes), smoothing, dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0 - smoothing
    return out


@dataclass
class Dataset:
    images: np.ndarray  # (N, rows*cols) in [0, 1]
    labels: np.ndarray  # (N,) int
    targets: np.ndarray  # (N, 10) smoothed one-hot

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, n: int | None) -> "Dataset":
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.targets[:n])

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        idx = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            sel = idx[start:start + batch_size]
            yield self.images[sel], self.targets[sel], self.labels[sel]


def load_mnist_idx(images_path: str | Path, labels_path: str | Path, smoothing: float = LABEL_SMOOTHING,
                   limit: int | None = None) -> Dataset:
    """Images scaled to [0, 1] and flattened; labels one-hot with smoothing."""
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    lab = labels.astype(np.int64)
    return Dataset(flat, lab, one_hot(lab, 10, smoothing))


def default_data_root() -> Path:
    """``$FREEGRAD_DATA_DIR`` if set, else the subset shipped in the repository's ``data/mnist5k``."""
    env = os.environ.get("FREEGRAD_DATA_DIR")
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[3] / "data" / "mnist5k"


def _find(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (root / name).exists():
            return root / name
    raise FileNotFoundError(f"no {stem}[.gz] under {root}; set FREEGRAD_DATA_DIR to an MNIST directory")


def load_mnist(split: str = "train", root: str | Path | None = None, limit: int | None = None,
               smoothing: float = LABEL_SMOOTHING) -> Dataset:
    if split not in _SPLIT_FILES:
        raise ValueError(f"split must be one of {sorted(_SPLIT_FILES)}")
    base = Path(root) if root is not None else default_data_root()
    img, lab = _SPLIT_FILES[split]
    return load_mnist_idx(_find(base, img), _find(base, lab), smoothing, limit)
