import gzip

import numpy as np
import pytest

from vargp.data import (
    MNIST_FILES,
    TaskDataset,
    data_dir_from_env,
    find_mnist,
    gen_toy,
    load_idx,
    load_mnist,
    make_permuted_tasks,
    make_split_tasks,
    write_idx,
)
from vargp.errors import DataFormatError


def fake_mnist(rng, n_train=600, n_test=200, side=4):
    ytr = np.tile(np.arange(10), n_train // 10)
    yte = np.tile(np.arange(10), n_test // 10)
    Xtr = rng.integers(0, 256, size=(n_train, side * side)) / 255.0
    Xte = rng.integers(0, 256, size=(n_test, side * side)) / 255.0
    return Xtr, ytr, Xte, yte


class TestToy:
    def test_shape_and_range(self):
        s = gen_toy(0)
        assert len(s) == 2 and s.num_classes == 4 and s.input_dim == 2
        for t in s:
            for X in (t.X_train, t.X_test):
                assert X.min() >= -3 and X.max() <= 3
            assert t.X_val.shape == (0, 2)

    def test_labels_per_task(self):
        s = gen_toy(0)
        assert set(s[0].y_train) | set(s[0].y_test) == {0, 1}
        assert set(s[1].y_train) | set(s[1].y_test) == {2, 3}

    def test_balanced_80_20(self):
        s = gen_toy(1)
        for t in s:
            assert np.unique(t.y_train, return_counts=True)[1].tolist() == [80, 80]
            assert np.unique(t.y_test, return_counts=True)[1].tolist() == [20, 20]

    def test_clusters_sit_at_corners(self):
        s = gen_toy(0)
        X = np.concatenate([s[0].X_train, s[1].X_train])
        y = np.concatenate([s[0].y_train, s[1].y_train])
        centers = [[-1.5, -1.5], [1.5, 1.5], [-1.5, 1.5], [1.5, -1.5]]
        for c, ref in enumerate(centers):
            np.testing.assert_allclose(X[y == c].mean(0), ref, atol=0.15)

    def test_deterministic(self):
        a, b = gen_toy(3), gen_toy(3)
        for ta, tb in zip(a, b):
            assert ta.X_train.tobytes() == tb.X_train.tobytes()

    def test_disjoint(self):
        for t in gen_toy(0):
            assert not set(t.source_index["train"]) & set(t.source_index["test"])


class TestIdx:
    def test_round_trip(self, tmp_path, rng):
        imgs = rng.integers(0, 256, size=(5, 3, 4)).astype(np.uint8)
        labels = np.array([0, 3, 9, 1, 1], dtype=np.uint8)
        write_idx(tmp_path / "i", imgs)
        write_idx(tmp_path / "l", labels)
        X, y = load_idx(tmp_path / "i", tmp_path / "l")
        assert X.shape == (5, 12)
        np.testing.assert_array_equal(X, imgs.reshape(5, -1) / 255.0)
        np.testing.assert_array_equal(y, labels)

    def test_gzip(self, tmp_path, rng):
        imgs = rng.integers(0, 256, size=(2, 2, 2)).astype(np.uint8)
        write_idx(tmp_path / "i", imgs)
        write_idx(tmp_path / "l", np.array([1, 2], dtype=np.uint8))
        (tmp_path / "i.gz").write_bytes(gzip.compress((tmp_path / "i").read_bytes()))
        X, _ = load_idx(tmp_path / "i.gz", tmp_path / "l")
        np.testing.assert_array_equal(X, imgs.reshape(2, -1) / 255.0)

    def test_zero_image_is_zero(self, tmp_path):
        write_idx(tmp_path / "i", np.zeros((1, 2, 2), dtype=np.uint8))
        write_idx(tmp_path / "l", np.array([0], dtype=np.uint8))
        X, _ = load_idx(tmp_path / "i", tmp_path / "l")
        assert np.all(X == 0)

    def test_bad_magic(self, tmp_path):
        write_idx(tmp_path / "i", np.zeros((1, 2, 2), dtype=np.uint8))
        # a 3-d (image) file passed as labels carries magic 0x00000803
        with pytest.raises(DataFormatError, match="magic"):
            load_idx(tmp_path / "i", tmp_path / "i")

    def test_truncated(self, tmp_path):
        write_idx(tmp_path / "i", np.zeros((3, 2, 2), dtype=np.uint8))
        write_idx(tmp_path / "l", np.zeros(3, dtype=np.uint8))
        raw = (tmp_path / "i").read_bytes()
        (tmp_path / "i").write_bytes(raw[:-3])
        with pytest.raises(DataFormatError, match="truncated"):
            load_idx(tmp_path / "i", tmp_path / "l")
        (tmp_path / "l").write_bytes(b"\x00\x00")
        with pytest.raises(DataFormatError):
            load_idx(tmp_path / "i", tmp_path / "l")

    def test_count_mismatch(self, tmp_path):
        write_idx(tmp_path / "i", np.zeros((3, 2, 2), dtype=np.uint8))
        write_idx(tmp_path / "l", np.zeros(2, dtype=np.uint8))
        with pytest.raises(DataFormatError):
            load_idx(tmp_path / "i", tmp_path / "l")

    def test_find_and_load_directory(self, tmp_path, rng):
        for key, name in MNIST_FILES.items():
            arr = rng.integers(0, 256, size=(4, 2, 2)) if "images" in key else np.arange(4)
            write_idx(tmp_path / name, arr)
        Xtr, ytr, Xte, yte = load_mnist(tmp_path)
        assert Xtr.shape == (4, 4) and yte.tolist() == [0, 1, 2, 3]
        (tmp_path / MNIST_FILES["test_labels"]).unlink()
        with pytest.raises(FileNotFoundError):
            find_mnist(tmp_path)

    def test_real_sample_header(self, mnist_dir):
        Xtr, ytr, Xte, yte = load_mnist(mnist_dir)
        assert Xtr.shape[1] == 784 and Xtr.min() >= 0 and Xtr.max() <= 1
        assert set(ytr.tolist()) == set(range(10))


class TestSplit:
    def test_labels_and_partition(self, rng):
        Xtr, ytr, Xte, yte = fake_mnist(rng)
        s = make_split_tasks(Xtr, ytr, Xte, yte, val_total=100, seed=0)
        assert len(s) == 5 and s.num_classes == 10
        assert set(s[2].y_train) <= {4, 5}
        used = np.concatenate([np.concatenate([t.source_index["train"], t.source_index["val"]]) for t in s])
        assert sorted(used.tolist()) == list(range(len(ytr)))
        assert sum(len(t.y_val) for t in s) == 100
        for t_id, t in enumerate(s):
            np.testing.assert_array_equal(t.source_index["test"], np.flatnonzero(np.isin(yte, (2 * t_id, 2 * t_id + 1))))
            assert not set(t.source_index["train"]) & set(t.source_index["val"])
        labels = [set(t.y_train) for t in s]
        assert set().union(*labels) == set(range(10))
        assert all(not (a & b) for i, a in enumerate(labels) for b in labels[i + 1:])

    def test_caps(self, rng):
        Xtr, ytr, Xte, yte = fake_mnist(rng)
        s = make_split_tasks(Xtr, ytr, Xte, yte, val_total=50, seed=0, train_cap=30, test_cap=10)
        assert all(t.num_train == 30 and len(t.y_test) == 10 for t in s)

    def test_deterministic(self, rng):
        data = fake_mnist(rng)
        a, b = make_split_tasks(*data, val_total=50, seed=4), make_split_tasks(*data, val_total=50, seed=4)
        assert all(x.X_train.tobytes() == y.X_train.tobytes() for x, y in zip(a, b))

    def test_missing_digit(self, rng):
        Xtr, ytr, Xte, yte = fake_mnist(rng)
        keep = ytr != 7
        with pytest.raises(ValueError):
            make_split_tasks(Xtr[keep], ytr[keep], Xte, yte, val_total=10)

    def test_val_too_large(self, rng):
        with pytest.raises(ValueError):
            make_split_tasks(*fake_mnist(rng), val_total=10_000)


class TestPermuted:
    def test_first_task_identity(self, rng):
        s = make_permuted_tasks(*fake_mnist(rng), T=3, val_total=50, seed=0)
        np.testing.assert_array_equal(s[0].permutation, np.arange(16))
        assert not np.array_equal(s[1].permutation, np.arange(16))

    def test_permutation_preserves_pixel_multiset(self, rng):
        Xtr, ytr, Xte, yte = fake_mnist(rng)
        s = make_permuted_tasks(Xtr, ytr, Xte, yte, T=3, val_total=50, seed=0)
        for t in s:
            np.testing.assert_array_equal(np.sort(t.X_train, 1), np.sort(Xtr[t.source_index["train"]], 1))
            inv = np.argsort(t.permutation)
            np.testing.assert_array_equal(t.X_test[:, inv], Xte[t.source_index["test"]])

    def test_splits_disjoint(self, rng):
        s = make_permuted_tasks(*fake_mnist(rng), T=2, val_total=50, seed=0)
        for t in s:
            assert not set(t.source_index["train"]) & set(t.source_index["val"])

    def test_bad_permutation_rejected(self):
        X = np.zeros((2, 3))
        y = np.zeros(2, dtype=int)
        with pytest.raises(ValueError):
            TaskDataset(X, y, X, y, X, y, 0, permutation=np.array([0, 0, 1]))


def test_env_override(monkeypatch):
    monkeypatch.setenv("VARGP_DATA_DIR", "/somewhere")
    assert data_dir_from_env("/default") == "/somewhere"
    monkeypatch.delenv("VARGP_DATA_DIR")
    assert data_dir_from_env("/default") == "/default"
