#!/usr/bin/env python3
"""Write the digits bundled with the npm `mnist` package as IDX files.

The package ships ~10k MNIST digits as per-class JSON arrays of [0,1] floats.
They are shuffled with a fixed seed and split into train / t10k IDX files laid
out like the official distribution, so the trainer can read them natively.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/npm_mnist_to_idx.py package/src/digits $RESCAPS_DATA_DIR/mnist
"""
import argparse
import json
import pathlib
import struct

import numpy as np


def write_idx(path, array, magic):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in array.shape:
            f.write(struct.pack(">I", d))
        f.write(array.astype(np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--test", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    images, labels = [], []
    for k in range(10):
        flat = np.asarray(json.load(open(pathlib.Path(args.digits_dir) / f"{k}.json"))["data"])
        digits = np.rint(flat.reshape(-1, 28, 28) * 255.0)
        images.append(digits)
        labels.append(np.full(len(digits), k))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(args.seed).permutation(len(labels))
    images, labels = images[order], labels[order]

    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_train = len(labels) - args.test
    write_idx(out / "train-images-idx3-ubyte", images[:n_train], 0x00000803)
    write_idx(out / "train-labels-idx1-ubyte", labels[:n_train], 0x00000801)
    write_idx(out / "t10k-images-idx3-ubyte", images[n_train:], 0x00000803)
    write_idx(out / "t10k-labels-idx1-ubyte", labels[n_train:], 0x00000801)
    print(f"train={n_train} test={args.test} -> {out}")


if __name__ == "__main__":
    main()
