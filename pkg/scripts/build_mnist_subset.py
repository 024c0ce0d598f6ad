"""Write the 5,000-image MNIST subset bundled with mlxtend as IDX files.

The sandbox this project was built in has no route to the usual MNIST
mirrors, so the bundled subset (500 images per digit) is split into
400 train / 100 test images per class and written in the standard
big-endian IDX layout, gzip-compressed.

    pip download --no-deps "mlxtend==0.24.0" -d /tmp/dl
    python scripts/build_mnist_subset.py /tmp/dl/mlxtend-0.24.0-py3-none-any.whl data/mnist
"""

import argparse
import gzip
import io
import pathlib
import struct
import zipfile

import numpy as np

TRAIN_PER_CLASS = 400


def write_idx(path, array):
    codes = {1: 0x00000801, 3: 0x00000803}
    header = struct.pack(">I", codes[array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    # mtime=0 keeps the archive byte-stable
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
        fh.write(header + array.astype(np.uint8).tobytes())


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("wheel")
    parser.add_argument("out_dir")
    args = parser.parse_args()

    with zipfile.ZipFile(args.wheel) as zf:
        blob = zf.read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.loadtxt(io.BytesIO(gzip.decompress(blob)), delimiter=",").astype(np.uint8)
    images, labels = table[:, :-1].reshape(-1, 28, 28), table[:, -1]

    train_idx, test_idx = [], []
    for d in range(10):
        idx = np.flatnonzero(labels == d)
        train_idx.extend(idx[:TRAIN_PER_CLASS])
        test_idx.extend(idx[TRAIN_PER_CLASS:])
    train_idx, test_idx = np.sort(train_idx), np.sort(test_idx)

    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte.gz", images[train_idx])
    write_idx(out / "train-labels-idx1-ubyte.gz", labels[train_idx])
    write_idx(out / "t10k-images-idx3-ubyte.gz", images[test_idx])
    write_idx(out / "t10k-labels-idx1-ubyte.gz", labels[test_idx])
    print(f"wrote {len(train_idx)} train / {len(test_idx)} test images to {out}")


if __name__ == "__main__":
    main()
