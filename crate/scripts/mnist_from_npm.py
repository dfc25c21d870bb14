#!/usr/bin/env python3
"""Convert the digit dump shipped in the `mnist` npm package into IDX files.

The package stores 10,000 MNIST digits as per-class JSON arrays of
pixel intensities in [0, 1] (three decimals). They are shuffled with a
fixed seed and split into 8,000 train / 2,000 test examples, then
written in the standard IDX layout (big-endian headers, u8 payload).
"""
import json
import random
import struct
import sys
from pathlib import Path


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main(package_dir, out_dir, n_test=2000, seed=0):
    package_dir, out_dir = Path(package_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    examples = []
    for digit in range(10):
        raw = json.loads((package_dir / "src" / "digits" / f"{digit}.json").read_text())["data"]
        for start in range(0, len(raw) - 783, 784):
            pixels = [min(255, max(0, round(v * 255))) for v in raw[start:start + 784]]
            examples.append((pixels, digit))
    random.Random(seed).shuffle(examples)
    test, train = examples[:n_test], examples[n_test:]
    write_idx_images(out_dir / "train-images-idx3-ubyte", [e[0] for e in train])
    write_idx_labels(out_dir / "train-labels-idx1-ubyte", [e[1] for e in train])
    write_idx_images(out_dir / "t10k-images-idx3-ubyte", [e[0] for e in test])
    write_idx_labels(out_dir / "t10k-labels-idx1-ubyte", [e[1] for e in test])
    print(f"wrote {len(train)} train / {len(test)} test examples to {out_dir}")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit("usage: mnist_from_npm.py <unpacked-npm-package-dir> <out-dir>")
    main(sys.argv[1], sys.argv[2])
