"""Build a 10 000-digit MNIST subset in IDX format.

Source: the ``mnist`` npm package (MIT licensed), whose ``src/digits/<k>.json``
files hold 28x28 digits scaled to [0, 1].  Digits are quantized back to
bytes, shuffled with a fixed seed and split 9000 / 1000.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python scripts/build_mnist_subset.py package/src/digits data/mnist_subset
"""

import argparse
import json
from pathlib import Path

import numpy as np

from hsc.preprocess import write_idx


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--n-test", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    images, labels = [], []
    for k in range(10):
        flat = np.asarray(json.loads((args.digits_dir / f"{k}.json").read_text())["data"])
        imgs = np.rint(flat.reshape(-1, 28, 28) * 255).astype(np.uint8)
        images.append(imgs)
        labels.append(np.full(len(imgs), k, dtype=np.uint8))
    images, labels = np.concatenate(images), np.concatenate(labels)
    perm = np.random.default_rng(args.seed).permutation(len(images))
    images, labels = images[perm], labels[perm]
    n_train = len(images) - args.n_test

    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(args.out_dir / "train-images-idx3-ubyte.gz", images[:n_train])
    write_idx(args.out_dir / "train-labels-idx1-ubyte.gz", labels[:n_train])
    write_idx(args.out_dir / "t10k-images-idx3-ubyte.gz", images[n_train:])
    write_idx(args.out_dir / "t10k-labels-idx1-ubyte.gz", labels[n_train:])
    print(f"wrote {n_train} train / {args.n_test} test digits to {args.out_dir}")


if __name__ == "__main__":
    main()
