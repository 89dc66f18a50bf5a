#!/usr/bin/env python3
"""Write the 5k MNIST subset shipped with mlxtend as gzip-compressed IDX files.

Produces train-{images-idx3,labels-idx1}-ubyte.gz (400 images per class) and
t10k-*.gz (100 per class) under the output directory. Use this when the full
MNIST files are not available; the loader reads either.
"""
import argparse
import gzip
import os
import struct

import numpy as np


def write_idx(path, array, magic):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for extent in array.shape:
            f.write(struct.pack(">I", extent))
        f.write(array.astype(np.uint8).tobytes())


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data", "mnist"))
    parser.add_argument("--train-per-class", type=int, default=400)
    args = parser.parse_args()

    from mlxtend.data import mnist_data

    images, labels = mnist_data()
    images = images.reshape(-1, 28, 28)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        train_idx.extend(idx[: args.train_per_class])
        test_idx.extend(idx[args.train_per_class:])
    train_idx = np.sort(np.array(train_idx))
    test_idx = np.sort(np.array(test_idx))

    os.makedirs(args.out, exist_ok=True)
    write_idx(os.path.join(args.out, "train-images-idx3-ubyte.gz"), images[train_idx], 0x00000803)
    write_idx(os.path.join(args.out, "train-labels-idx1-ubyte.gz"), labels[train_idx], 0x00000801)
    write_idx(os.path.join(args.out, "t10k-images-idx3-ubyte.gz"), images[test_idx], 0x00000803)
    write_idx(os.path.join(args.out, "t10k-labels-idx1-ubyte.gz"), labels[test_idx], 0x00000801)
    print(f"wrote {len(train_idx)} train / {len(test_idx)} test images to {args.out}")


if __name__ == "__main__":
    main()
