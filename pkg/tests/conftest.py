import os
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from vargp.data import MNIST_FILES, write_idx

torch.set_num_threads(1)

settings.register_profile(
    "vargp", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("vargp")


def random_chol(rng, n, scale=1.0, batch=()):
    """Well-conditioned lower-triangular factor with positive diagonal."""
    L = np.tril(rng.normal(size=batch + (n, n)), -1) * 0.5 * scale
    idx = np.arange(n)
    L[..., idx, idx] = rng.uniform(0.5, 1.5, size=batch + (n,)) * scale
    return L


def random_spd(rng, n):
    L = random_chol(rng, n)
    return L @ L.T


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def _build_mnist_subset(out_dir: Path, test_per_class=100, seed=0):
    mlxtend_data = pytest.importorskip("mlxtend.data")
    X, y = mlxtend_data.mnist_data()
    X = X.astype(np.uint8).reshape(-1, 28, 28)
    y = y.astype(np.uint8)
    rng = np.random.default_rng(seed)
    test = np.zeros(len(y), dtype=bool)
    for c in range(10):
        test[rng.choice(np.flatnonzero(y == c), size=test_per_class, replace=False)] = True
    out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(out_dir / MNIST_FILES["train_images"], X[~test])
    write_idx(out_dir / MNIST_FILES["train_labels"], y[~test])
    write_idx(out_dir / MNIST_FILES["test_images"], X[test])
    write_idx(out_dir / MNIST_FILES["test_labels"], y[test])
    return out_dir


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """Directory with the four MNIST IDX files.

    Uses ``VARGP_DATA_DIR`` when set; otherwise writes the 5000-image
    sample shipped with mlxtend (4000 train / 1000 test).
    """
    env = os.environ.get("VARGP_DATA_DIR")
    if env:
        return Path(env)
    return _build_mnist_subset(tmp_path_factory.mktemp("mnist"))


_ACCEPTANCE = {}


@pytest.fixture
def criterion(request):
    """Record a PASS/FAIL line for an acceptance criterion.

    Call it as ``criterion(number, passed, detail)``; the lines are printed
    together in the terminal summary.
    """

    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
