"""Write the 5000-image MNIST sample bundled with mlxtend as IDX files.

    pip download mlxtend --no-deps -d /tmp/mlx
    python scripts/make_mnist_subset.py /tmp/mlx/mlxtend-*.whl data/mnist5k

The sample is shuffled (seed 0) and split into 4000 train / 1000 eval.
"""

import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from depois_attack.data import ImageDataset, write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("source", help="mlxtend wheel or the extracted mnist_5k.csv.gz")
    parser.add_argument("out", type=Path)
    args = parser.parse_args()

    if args.source.endswith(".whl"):
        raw = zipfile.ZipFile(args.source).read(MEMBER)
    else:
        raw = Path(args.source).read_bytes()
    table = np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",")
    pixels, labels = table[:, :-1], table[:, -1].astype(np.int64)

    perm = np.random.default_rng(0).permutation(labels.size)
    pixels, labels = pixels[perm], labels[perm]
    for name, sl in (("train", slice(0, 4000)), ("t10k", slice(4000, None))):
        ds = ImageDataset(pixels[sl] / 255.0, labels[sl], name, (28, 28))
        write_idx(
            ds,
            args.out / f"{name}-images-idx3-ubyte.gz",
            args.out / f"{name}-labels-idx1-ubyte.gz",
            compress=True,
        )
        print(f"{name}: {len(ds)} images, class counts {ds.class_counts().tolist()}")


if __name__ == "__main__":
    main()
