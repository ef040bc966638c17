"""Write a small MNIST set in IDX format from the 5000-image sample bundled with mlxtend.

The sample holds 500 training images per digit.  A stratified split keeps
``--test-per-class`` images of every digit as the test set:

    python tools/make_mnist_subset.py data/mnist5k
"""

import argparse
from pathlib import Path

import numpy as np

from vargp.data import MNIST_FILES, write_idx


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--test-per-class", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    from mlxtend.data import mnist_data

    X, y = mnist_data()
    X = X.astype(np.uint8).reshape(-1, 28, 28)
    y = y.astype(np.uint8)
    rng = np.random.default_rng(args.seed)
    test = np.zeros(len(y), dtype=bool)
    for c in range(10):
        test[rng.choice(np.flatnonzero(y == c), size=args.test_per_class, replace=False)] = True

    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(args.out_dir / MNIST_FILES["train_images"], X[~test])
    write_idx(args.out_dir / MNIST_FILES["train_labels"], y[~test])
    write_idx(args.out_dir / MNIST_FILES["test_images"], X[test])
    write_idx(args.out_dir / MNIST_FILES["test_labels"], y[test])
    print(f"wrote {(~test).sum()} train / {test.sum()} test images to {args.out_dir}")


if __name__ == "__main__":
    main()
