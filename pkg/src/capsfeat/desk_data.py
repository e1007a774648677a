"""Desk-scale stand-ins for the handwriting corpora.

``mnist_subset`` draws a class-balanced subset from the 5000-image MNIST
sample that ships inside the ``mlxtend`` wheel (500 images per digit) and
writes it as IDX files. ``blobs`` builds tiny synthetic image sets for
smoke tests and timing sweeps.
"""

from __future__ import annotations

import gzip
from pathlib import Path

import numpy as np

from .data import IDX_TEST, IDX_TRAIN, Dataset, permutation, write_idx
from .errors import IngestError


def _mnist_5k() -> tuple[np.ndarray, np.ndarray]:
    try:
        from importlib.resources import files
        source = files("mlxtend") / "data" / "data" / "mnist_5k.csv.gz"
        with gzip.open(source.open("rb"), "rt") as f:
            table = np.loadtxt(f, delimiter=",", dtype=np.float32)
    except (ModuleNotFoundError, FileNotFoundError, OSError) as exc:
        raise IngestError("the MNIST sample needs the 'mlxtend' package "
                          f"(pip install mlxtend): {exc}") from None
    return table[:, :784].reshape(-1, 28, 28), table[:, 784].astype(np.int64)


def mnist_subset(out_dir, train_per_class: int = 200, test_per_class: int = 100,
                 seed: int = 0) -> tuple[Dataset, Dataset]:
    """Write a balanced 10-class MNIST subset to ``out_dir`` as IDX files."""
    pixels, labels = _mnist_5k()
    images = pixels / np.float32(255.0)
    train_idx, test_idx = [], []
    for k in range(10):
        members = np.flatnonzero(labels == k)
        if members.size < train_per_class + test_per_class:
            raise IngestError(f"digit {k} has only {members.size} samples")
        order = members[permutation(members.size, seed, stream=k)]
        train_idx.append(order[:train_per_class])
        test_idx.append(order[train_per_class:train_per_class + test_per_class])
    full = Dataset(images[:, None], labels, 10, name="mnist")
    train = full.subset(np.sort(np.concatenate(train_idx)), "train")
    test = full.subset(np.sort(np.concatenate(test_idx)), "test")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(train, out / IDX_TRAIN[0], out / IDX_TRAIN[1])
    write_idx(test, out / IDX_TEST[0], out / IDX_TEST[1])
    return train, test


def blobs(n_per_class: int, n_class: int = 2, size: int = 28, seed: int = 0,
          noise: float = 0.05) -> Dataset:
    """One bright square per class at a class-specific position, plus noise.

    Linearly separable by construction; any working classifier fits it.
    """
    rng = np.random.default_rng(seed)
    images = rng.uniform(0, noise, size=(n_per_class * n_class, 1, size, size)).astype(np.float32)
    labels = np.repeat(np.arange(n_class), n_per_class)
    side = max(size // 4, 2)
    grid = int(np.ceil(np.sqrt(n_class)))
    step = max((size - side) // max(grid - 1, 1), 1)
    for k in range(n_class):
        r, c = (k // grid) * step, (k % grid) * step
        images[labels == k, 0, r:r + side, c:c + side] += 0.9
    np.clip(images, 0, 1, out=images)
    return Dataset(images, labels, n_class, name=f"blobs{n_class}")


def random_images(n: int, n_class: int, size: int = 28, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    images = rng.uniform(0, 1, size=(n, 1, size, size)).astype(np.float32)
    labels = rng.integers(0, n_class, size=n)
    return Dataset(images, labels, n_class, name=f"random{n_class}")
