"""Task streams: the 2-D toy problem, MNIST IDX ingestion, Split and Permuted MNIST."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

TOY_CENTERS = np.array([[-1.5, -1.5], [1.5, 1.5], [-1.5, 1.5], [1.5, -1.5]])
TOY_STD = 0.4
TOY_PER_CLASS = 100
TOY_BOX = 3.0


@dataclass
class TaskDataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    task_id: int
    permutation: Optional[np.ndarray] = None
    # row indices into the source arrays, for provenance and disjointness checks
    source_index: dict = field(default_factory=dict)

    def __post_init__(self):
        dims = {a.shape[1] for a in (self.X_train, self.X_val, self.X_test)}
        if len(dims) != 1:
            raise ValueError(f"feature dimension differs across splits: {sorted(dims)}")
        for X, y in ((self.X_train, self.y_train), (self.X_val, self.y_val), (self.X_test, self.y_test)):
            if X.shape[0] != y.shape[0]:
                raise ValueError("inputs and labels have different lengths")
        if self.permutation is not None:
            if not np.array_equal(np.sort(self.permutation), np.arange(self.input_dim)):
                raise ValueError("permutation is not a bijection on the input dimensions")

    @property
    def input_dim(self) -> int:
        return self.X_train.shape[1]

    @property
    def num_train(self) -> int:
        return self.X_train.shape[0]


@dataclass
class TaskStream:
    tasks: List[TaskDataset]
    num_classes: int
    name: str = ""

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    def __iter__(self):
        return iter(self.tasks)

    @property
    def input_dim(self) -> int:
        return self.tasks[0].input_dim


def _empty(dim):
    return np.zeros((0, dim)), np.zeros(0, dtype=np.int64)


def gen_toy(seed: int = 0) -> TaskStream:
    """Four Gaussian blobs in [-3, 3]^2; task 0 holds classes 0/1, task 1 classes 2/3."""
    rng = np.random.default_rng(seed)
    X = np.concatenate([c + TOY_STD * rng.standard_normal((TOY_PER_CLASS, 2)) for c in TOY_CENTERS])
    X = np.clip(X, -TOY_BOX, TOY_BOX)
    y = np.repeat(np.arange(len(TOY_CENTERS)), TOY_PER_CLASS)
    n_test = TOY_PER_CLASS // 5
    tasks = []
    for t, classes in enumerate(((0, 1), (2, 3))):
        train_idx, test_idx = [], []
        for c in classes:
            idx = rng.permutation(np.flatnonzero(y == c))
            test_idx.append(idx[:n_test])
            train_idx.append(idx[n_test:])
        train_idx, test_idx = np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(test_idx))
        tasks.append(TaskDataset(X[train_idx], y[train_idx], *_empty(2), X[test_idx], y[test_idx],
                                 task_id=t, source_index={"train": train_idx, "test": test_idx}))
    return TaskStream(tasks, num_classes=4, name="toy")


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated IDX header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(shape))
    if len(raw) - header < size:
        raise DataFormatError(f"{path}: truncated payload ({len(raw) - header} of {size} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(shape)


def load_idx(images_path, labels_path):
    """Read an IDX image/label pair (optionally gzip-compressed).

    Returns ``X`` of shape (N, rows*cols) scaled to [0, 1] and integer labels.
    """
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels in {images_path} / {labels_path}"
        )
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return X, labels.astype(np.int64)


def write_idx(path, array) -> None:
    """Write a uint8 array as an uncompressed IDX file (images 3-D, labels 1-D)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def find_mnist(data_dir) -> dict:
    """Locate the four standard MNIST files (plain or ``.gz``) in ``data_dir``."""
    data_dir = Path(data_dir)
    found = {}
    for key, stem in MNIST_FILES.items():
        for name in (stem, stem + ".gz"):
            if (data_dir / name).exists():
                found[key] = data_dir / name
                break
        else:
            raise FileNotFoundError(f"{stem}[.gz] not found in {data_dir}")
    return found


def load_mnist(data_dir):
    """``(X_train, y_train, X_test, y_test)`` from a directory of IDX files."""
    p = find_mnist(data_dir)
    return (*load_idx(p["train_images"], p["train_labels"]),
            *load_idx(p["test_images"], p["test_labels"]))


def _allocate(total: int, sizes) -> np.ndarray:
    """Split ``total`` proportionally to ``sizes`` by largest remainders."""
    sizes = np.asarray(sizes, dtype=float)
    exact = total * sizes / sizes.sum()
    out = np.floor(exact).astype(int)
    short = total - out.sum()
    out[np.argsort(-(exact - out), kind="stable")[:short]] += 1
    return out


def _cap(idx, cap, rng):
    if cap is None or len(idx) <= cap:
        return idx
    return np.sort(rng.choice(idx, size=cap, replace=False))


def make_split_tasks(X_train, y_train, X_test, y_test, val_total: int = 10000, seed: int = 0,
                     train_cap: Optional[int] = None, test_cap: Optional[int] = None) -> TaskStream:
    """Five tasks over digit pairs 0/1, 2/3, ..., 8/9 with a single 10-way head.

    ``val_total`` training examples are held out across all tasks in
    proportion to task size.  ``train_cap``/``test_cap`` uniformly subsample
    each task's training and test sets.
    """
    present = set(np.unique(y_train).tolist())
    if not set(range(10)) <= present:
        raise ValueError(f"labels 0-9 must all be present, found {sorted(present)}")
    if val_total < 0 or val_total >= len(y_train):
        raise ValueError(f"val_total={val_total} exceeds the {len(y_train)} available examples")
    rng = np.random.default_rng(seed)
    task_idx = [np.flatnonzero(np.isin(y_train, (2 * t, 2 * t + 1))) for t in range(5)]
    n_val = _allocate(val_total, [len(i) for i in task_idx])
    tasks = []
    for t, (idx, nv) in enumerate(zip(task_idx, n_val)):
        idx = rng.permutation(idx)
        val_idx, train_idx = np.sort(idx[:nv]), np.sort(idx[nv:])
        train_idx = _cap(train_idx, train_cap, rng)
        test_idx = _cap(np.flatnonzero(np.isin(y_test, (2 * t, 2 * t + 1))), test_cap, rng)
        tasks.append(TaskDataset(
            X_train[train_idx], y_train[train_idx], X_train[val_idx], y_train[val_idx],
            X_test[test_idx], y_test[test_idx], task_id=t,
            source_index={"train": train_idx, "val": val_idx, "test": test_idx},
        ))
    return TaskStream(tasks, num_classes=10, name="split_mnist")


def make_permuted_tasks(X_train, y_train, X_test, y_test, T: int = 10, val_total: int = 10000,
                        seed: int = 0, train_cap: Optional[int] = None,
                        test_cap: Optional[int] = None) -> TaskStream:
    """``T`` tasks applying fixed random pixel permutations; task 0 is unpermuted."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if val_total < 0 or val_total >= len(y_train):
        raise ValueError(f"val_total={val_total} exceeds the {len(y_train)} available examples")
    rng = np.random.default_rng(seed)
    D = X_train.shape[1]
    idx = rng.permutation(len(y_train))
    val_idx, pool = np.sort(idx[:val_total]), np.sort(idx[val_total:])
    tasks = []
    for t in range(T):
        perm = np.arange(D) if t == 0 else rng.permutation(D)
        train_idx = _cap(pool, train_cap, rng)
        test_idx = _cap(np.arange(len(y_test)), test_cap, rng)
        tasks.append(TaskDataset(
            X_train[train_idx][:, perm], y_train[train_idx], X_train[val_idx][:, perm],
            y_train[val_idx], X_test[test_idx][:, perm], y_test[test_idx], task_id=t,
            permutation=perm, source_index={"train": train_idx, "val": val_idx, "test": test_idx},
        ))
    return TaskStream(tasks, num_classes=10, name="permuted_mnist")


def data_dir_from_env(default=None):
    """Data directory, overridable through ``VARGP_DATA_DIR``."""
    return os.environ.get("VARGP_DATA_DIR", default)
