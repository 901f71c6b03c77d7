"""Write a small MNIST in IDX format from the 5,000-digit CSV bundled with mlxtend.

The full 60k/10k MNIST download is not available offline; this subset has
500 digits per class. Output: ``train-*`` (4,500) and ``t10k-*`` (500) files.

    python3 scripts/prepare_mnist_subset.py --out data/mnist
"""
import argparse
import gzip
import importlib.resources
from pathlib import Path

import numpy as np

from mixerflow.data import encode_idx_images, encode_idx_labels


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--n-val", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    src = importlib.resources.files("mlxtend") / "data" / "data" / "mnist_5k.csv.gz"
    with gzip.open(src, "rt") as f:
        table = np.loadtxt(f, delimiter=",", dtype=np.int64)
    pixels = table[:, :784].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, 784]
    order = np.random.Generator(np.random.PCG64(args.seed)).permutation(len(labels))
    pixels, labels = pixels[order], labels[order]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    nv = args.n_val
    for stem, sl in (("train", slice(nv, None)), ("t10k", slice(0, nv))):
        (out / f"{stem}-images-idx3-ubyte").write_bytes(encode_idx_images(pixels[sl]))
        (out / f"{stem}-labels-idx1-ubyte").write_bytes(encode_idx_labels(labels[sl]))
        print(f"{stem}: {len(labels[sl])} images")


if __name__ == "__main__":
    main()
