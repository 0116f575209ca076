#!/usr/bin/env python3
"""Build the bundled MNIST subset (IDX format) from the `mnist` npm package.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/make_mnist_subset.py package/src/digits data/mnist 256

Takes the first PER_CLASS images of every digit, interleaved by class.
Pixels are stored in the package as value/255 rounded to three decimals,
so rounding back to bytes is exact.
"""
import json
import struct
import sys
from pathlib import Path


def main(src: str, dst: str, per_class: int) -> None:
    digits = []
    for d in range(10):
        raw = json.loads((Path(src) / f"{d}.json").read_text())["data"]
        n = len(raw) // 784
        if n < per_class:
            sys.exit(f"digit {d} has only {n} images")
        digits.append([raw[i * 784:(i + 1) * 784] for i in range(per_class)])

    images, labels = bytearray(), bytearray()
    for i in range(per_class):
        for d in range(10):
            px = [round(v * 255) for v in digits[d][i]]
            assert all(0 <= p <= 255 for p in px)
            images += bytes(px)
            labels.append(d)

    n = 10 * per_class
    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    (out / "images-idx3-ubyte").write_bytes(struct.pack(">IIII", 0x803, n, 28, 28) + images)
    (out / "labels-idx1-ubyte").write_bytes(struct.pack(">II", 0x801, n) + labels)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2], int(sys.argv[3]))
