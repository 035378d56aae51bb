"""Build tests/data/mnist40-*-idx*-ubyte from the 5000-digit MNIST subset bundled with mlxtend.

Usage: pip download --no-deps mlxtend -d /tmp/mlx && python scripts/make_mnist_fixture.py /tmp/mlx/mlxtend-*.whl
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np

PER_CLASS = 4


def main(wheel):
    raw = gzip.decompress(zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    images, labels = table[:, :-1].astype(np.uint8), table[:, -1].astype(np.uint8)
    rng = np.random.default_rng(0)
    picks = np.concatenate(
        [rng.choice(np.flatnonzero(labels == c), PER_CLASS, replace=False) for c in range(10)]
    )
    rng.shuffle(picks)
    out = Path(__file__).resolve().parents[1] / "tests" / "data"
    n = len(picks)
    with open(out / "mnist40-images-idx3-ubyte", "wb") as fh:
        fh.write(struct.pack(">IIII", 0x803, n, 28, 28))
        fh.write(images[picks].tobytes())
    with open(out / "mnist40-labels-idx1-ubyte", "wb") as fh:
        fh.write(struct.pack(">II", 0x801, n))
        fh.write(labels[picks].tobytes())
    print(f"wrote {n} digits, labels {labels[picks].tolist()}")


if __name__ == "__main__":
    main(sys.argv[1])
