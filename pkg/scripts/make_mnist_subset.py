"""Build the desk-scale MNIST subset shipped in ``data/mnist5k``.

The source is the 5000-digit MNIST sample (500 per class) bundled with the
``mlxtend`` wheel as ``mlxtend/data/data/mnist_5k.csv.gz``. Pass either the
wheel, an installed mlxtend package directory, or the csv.gz itself:

    python3 scripts/make_mnist_subset.py path/to/mlxtend-0.24.0-py3-none-any.whl

The rows are shuffled with a fixed seed and split 4000/1000 into gzipped IDX
files that ``freegrad.harness.data.load_mnist_idx`` reads.
"""

from __future__ import annotations

import argparse
import gzip
import io
import struct
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_source(path: Path) -> np.ndarray:
    if path.suffix == ".whl":
        raw = zipfile.ZipFile(path).read(MEMBER)
    elif path.is_dir():
        raw = (path / "data" / "data" / "mnist_5k.csv.gz").read_bytes()
    else:
        raw = path.read_bytes()
    return np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",")


def write_idx(path: Path, array: np.ndarray) -> None:
    magic = 0x00000803 if array.ndim == 3 else 0x00000801
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(header + array.astype(np.uint8).tobytes())


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("source", type=Path)
    parser.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "data" / "mnist5k")
    parser.add_argument("--n-test", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    table = read_source(args.source)
    order = np.random.default_rng(args.seed).permutation(len(table))
    table = table[order]
    images = table[:, :-1].reshape(-1, 28, 28)
    labels = table[:, -1]
    n_train = len(table) - args.n_test
    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out / "train-images-idx3-ubyte.gz", images[:n_train])
    write_idx(args.out / "train-labels-idx1-ubyte.gz", labels[:n_train])
    write_idx(args.out / "t10k-images-idx3-ubyte.gz", images[n_train:])
    write_idx(args.out / "t10k-labels-idx1-ubyte.gz", labels[n_train:])
    print(f"wrote {n_train} train / {args.n_test} test digits to {args.out}")


if __name__ == "__main__":
    main()
