#!/usr/bin/env python3
"""Build the gzip-compressed IDX dataset fixtures under data/.

Sources (both ship inside packages on PyPI, no network download of
dataset mirrors is needed):

  mnist5k   5,000 MNIST digits bundled with mlxtend (mlxtend/data/data/mnist_5k.csv.gz)
  digits8   1,797 8x8 handwritten digits bundled with scikit-learn

Each dataset is shuffled with a fixed seed and split into an original
training set (80%) and a held-out test set (20%), then written as
train-images-idx3-ubyte.gz / train-labels-idx1-ubyte.gz /
t10k-images-idx3-ubyte.gz / t10k-labels-idx1-ubyte.gz.

Usage: python3 scripts/make_fixtures.py [--wheel path/to/mlxtend.whl]
"""
import argparse
import glob
import gzip
import io
import os
import struct
import subprocess
import sys
import tempfile
import zipfile

import numpy as np

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + b"".join(
        struct.pack(">I", d) for d in array.shape
    )
    # mtime=0 keeps the archives byte-reproducible.
    with open(path, "wb") as raw:
        with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0, filename="") as f:
            f.write(header)
            f.write(array.tobytes())


def write_dataset(name, images, labels, seed):
    rng = np.random.RandomState(seed)
    order = rng.permutation(len(labels))
    images, labels = images[order], labels[order]
    n_train = int(round(0.8 * len(labels)))
    out = os.path.join(ROOT, "data", name)
    os.makedirs(out, exist_ok=True)
    write_idx(os.path.join(out, "train-images-idx3-ubyte.gz"), images[:n_train])
    write_idx(os.path.join(out, "train-labels-idx1-ubyte.gz"), labels[:n_train])
    write_idx(os.path.join(out, "t10k-images-idx3-ubyte.gz"), images[n_train:])
    write_idx(os.path.join(out, "t10k-labels-idx1-ubyte.gz"), labels[n_train:])
    print(f"{name}: {n_train} train, {len(labels) - n_train} test, shape {images.shape[1:]}")


def mlxtend_wheel(explicit):
    if explicit:
        return explicit
    tmp = tempfile.mkdtemp()
    subprocess.check_call(
        [sys.executable, "-m", "pip", "download", "mlxtend", "--no-deps", "-d", tmp]
    )
    return glob.glob(os.path.join(tmp, "mlxtend-*.whl"))[0]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--wheel", help="path to an mlxtend wheel")
    args = parser.parse_args()

    with zipfile.ZipFile(mlxtend_wheel(args.wheel)) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    write_dataset("mnist5k", images, labels, seed=0)

    from sklearn.datasets import load_digits

    digits = load_digits()
    images = np.round(digits.images * (255.0 / 16.0)).astype(np.uint8)
    write_dataset("digits8", images, digits.target.astype(np.uint8), seed=0)


if __name__ == "__main__":
    main()
