"""Write a 2000/1000 train/test MNIST subset in IDX format.

The source is the 5000-sample MNIST excerpt bundled with the mlxtend wheel
(mlxtend/data/data/mnist_5k.csv.gz; 784 pixel columns then the label).

    pip download --no-deps mlxtend -d /tmp/mlx
    python python/make_mnist_subset.py /tmp/mlx/mlxtend-*.whl crates/core/tests/data/mnist
"""
import gzip
import random
import struct
import sys
import zipfile
from pathlib import Path


def write_images(path, rows):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(rows), 28, 28))
        for pixels, _ in rows:
            f.write(bytes(pixels))


def write_labels(path, rows):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(rows)))
        f.write(bytes(label for _, label in rows))


def main():
    wheel, out = sys.argv[1], Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = []
    for line in gzip.decompress(raw).decode().splitlines():
        values = [int(float(v)) for v in line.split(",")]
        rows.append((values[:784], values[784]))
    random.Random(0).shuffle(rows)
    train, test = rows[:2000], rows[2000:3000]
    write_images(out / "train-images-idx3-ubyte", train)
    write_labels(out / "train-labels-idx1-ubyte", train)
    write_images(out / "t10k-images-idx3-ubyte", test)
    write_labels(out / "t10k-labels-idx1-ubyte", test)


if __name__ == "__main__":
    main()
