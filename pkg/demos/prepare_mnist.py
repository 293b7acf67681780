"""Build the MNIST IDX files used by the image experiments.

The official download hosts are often unreachable from build machines, so
this takes the 5000-digit subset bundled with mlxtend (``pip install
mlxtend``), shuffles it with a fixed seed and writes a 4000/1000 train/test
split in the standard IDX3 layout:

    python3 demos/prepare_mnist.py data/mnist

If you already have the full MNIST files, point ``--mnist-path`` at their
directory instead and skip this script.
"""
import sys
from pathlib import Path

import numpy as np
from mlxtend.data import mnist_data

from ecnp.tasks import SPLIT_STREAM, task_rng, write_idx_images

N_TRAIN = 4000


def main(out_dir="data/mnist", seed=0):
    X, _ = mnist_data()  # rows sorted by label, so shuffle before splitting
    images = X.reshape(-1, 28, 28).astype(np.uint8)
    images = images[task_rng(seed, SPLIT_STREAM).permutation(len(images))]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx_images(out / "train-images-idx3-ubyte", images[:N_TRAIN])
    write_idx_images(out / "t10k-images-idx3-ubyte", images[N_TRAIN:])
    print(f"wrote {N_TRAIN} train and {len(images) - N_TRAIN} test images to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:2])
