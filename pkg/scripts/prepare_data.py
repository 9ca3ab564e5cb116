"""Build the gzipped IDX subsets under data/ from the npm-packaged datasets.

The sandbox has no direct internet access, but the npm registry mirror carries
``mnist-data`` (original IDX files) and ``fashion-mnist`` (per-class JSON).

    npm pack mnist-data fashion-mnist
    mkdir md fm && tar xzf mnist-data-*.tgz -C md && tar xzf fashion-mnist-*.tgz -C fm
    python scripts/prepare_data.py md/package fm/package data/
"""

import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np

MNIST_TRAIN_KEEP = 20000
FASHION_PER_CLASS = 600


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">BBBB", 0, 0, 8, array.ndim)
    header += struct.pack(">" + "I" * array.ndim, *array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + array.tobytes())


def read_idx(path):
    raw = Path(path).read_bytes()
    ndim = raw[3]
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    return np.frombuffer(raw, np.uint8, offset=4 + 4 * ndim).reshape(dims)


def main(mnist_dir, fashion_dir, out_dir):
    mnist_dir, fashion_dir, out_dir = Path(mnist_dir), Path(fashion_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    images = read_idx(mnist_dir / "data/train-images-idx3-ubyte")[:MNIST_TRAIN_KEEP]
    labels = read_idx(mnist_dir / "data/train-labels-idx1-ubyte")[:MNIST_TRAIN_KEEP]
    write_idx(out_dir / "mnist-train-images-idx3-ubyte.gz", images)
    write_idx(out_dir / "mnist-train-labels-idx1-ubyte.gz", labels)
    write_idx(out_dir / "mnist-t10k-images-idx3-ubyte.gz", read_idx(mnist_dir / "data/t10k-images-idx3-ubyte"))
    write_idx(out_dir / "mnist-t10k-labels-idx1-ubyte.gz", read_idx(mnist_dir / "data/t10k-labels-idx1-ubyte"))

    rng = np.random.default_rng(0)
    images, labels = [], []
    for c in range(10):
        rows = [r for r in json.loads((fashion_dir / f"src/clothes/{c}.json").read_text())["data"] if len(r) == 784]
        images.append(np.asarray(rows[:FASHION_PER_CLASS], dtype=np.uint8).reshape(-1, 28, 28))
        labels.append(np.full(len(images[-1]), c, dtype=np.uint8))
    images, labels = np.concatenate(images), np.concatenate(labels)
    order = rng.permutation(len(images))
    write_idx(out_dir / "fashion-images-idx3-ubyte.gz", images[order])
    write_idx(out_dir / "fashion-labels-idx1-ubyte.gz", labels[order])


if __name__ == "__main__":
    main(*sys.argv[1:4])
