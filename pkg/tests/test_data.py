import gzip
import struct

import numpy as np
import pytest
from sklearn.cluster import KMeans

from infoclust.data import (
    BatchIterator,
    Dataset,
    _low_frequency_basis,
    data_dir,
    load_cifar10,
    load_dataset,
    load_idx_pair,
    load_mnist,
    load_svhn,
    read_cifar_batch,
    read_idx,
    read_raw,
    synth_blobs,
    write_raw,
)
from infoclust.evaluation import cluster_accuracy


def idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


# -- IDX / MNIST --------------------------------------------------------------------------


def test_hand_built_idx_file(tmp_path):
    path = tmp_path / "img"
    path.write_bytes(bytes([0, 0, 8, 3]) + struct.pack(">3I", 2, 1, 1) + bytes([0, 255]))
    arr = read_idx(path)
    assert arr.shape == (2, 1, 1)
    assert (arr.astype(np.float32) / 255).ravel().tolist() == [0.0, 1.0]


def test_wrong_magic_is_rejected(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(idx_bytes(0x00000802, (2,), [0, 1]))
    with pytest.raises(ValueError, match="magic"):
        read_idx(path)


@pytest.mark.parametrize("cut", [2, 9, 13])
def test_truncated_idx_is_rejected(tmp_path, cut):
    path = tmp_path / "short"
    path.write_bytes(idx_bytes(0x803, (2, 2, 2), range(8))[: 16 + 8 - cut])
    with pytest.raises(ValueError, match="truncated"):
        read_idx(path)


def test_gzipped_idx(tmp_path):
    (tmp_path / "lab.gz").write_bytes(gzip.compress(idx_bytes(0x801, (3,), [7, 8, 9])))
    assert read_idx(tmp_path / "lab").tolist() == [7, 8, 9]


def test_count_mismatch_is_rejected(tmp_path):
    (tmp_path / "i").write_bytes(idx_bytes(0x803, (2, 1, 1), [0, 1]))
    (tmp_path / "l").write_bytes(idx_bytes(0x801, (3,), [0, 1, 2]))
    with pytest.raises(ValueError, match="mismatch"):
        load_idx_pair(tmp_path / "i", tmp_path / "l")


def test_load_mnist_pools_train_and_test(tmp_path):
    files = {
        "train-images-idx3-ubyte": idx_bytes(0x803, (2, 2, 2), [0] * 4 + [255] * 4),
        "train-labels-idx1-ubyte": idx_bytes(0x801, (2,), [3, 4]),
        "t10k-images-idx3-ubyte": idx_bytes(0x803, (1, 2, 2), [51] * 4),
        "t10k-labels-idx1-ubyte": idx_bytes(0x801, (1,), [9]),
    }
    for name, data in files.items():
        (tmp_path / name).write_bytes(data)
    ds = load_mnist(tmp_path)
    assert ds.images.shape == (3, 1, 2, 2) and ds.images.dtype == np.float32
    assert ds.images[:, 0, 0, 0].tolist() == pytest.approx([0.0, 1.0, 0.2])
    assert ds.evaluation_labels().tolist() == [3, 4, 9]


def test_missing_mnist_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mnist(tmp_path)


def test_data_dir_honours_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("INFOCLUST_DATA_DIR", str(tmp_path))
    assert data_dir() == tmp_path
    assert data_dir("elsewhere").name == "elsewhere"


# -- CIFAR-10 ------------------------------------------------------------------------------


def test_two_record_cifar_file(tmp_path):
    rec = lambda label, value: bytes([label]) + bytes([value]) * 3072
    (tmp_path / "b.bin").write_bytes(rec(7, 0) + rec(2, 255))
    images, labels = read_cifar_batch(tmp_path / "b.bin")
    assert images.shape == (2, 3, 32, 32)
    assert labels.tolist() == [7, 2]
    assert images[1].min() == 255 and images[0].max() == 0


def test_truncated_cifar_record(tmp_path):
    (tmp_path / "b.bin").write_bytes(bytes(3073 + 100))
    with pytest.raises(ValueError):
        read_cifar_batch(tmp_path / "b.bin")


def test_cifar_channel_layout(tmp_path):
    # planes are stored R, G, B, each row-major
    rec = bytearray(3073)
    rec[0] = 1
    rec[1 + 1024 + 32 + 2] = 200  # green, row 1, column 2
    (tmp_path / "b.bin").write_bytes(bytes(rec))
    images, _ = read_cifar_batch(tmp_path / "b.bin")
    assert images[0, 1, 1, 2] == 200 and images.sum() == 200


def test_load_cifar10_pools_six_batches(tmp_path):
    for i, name in enumerate([f"data_batch_{j}.bin" for j in range(1, 6)] + ["test_batch.bin"]):
        (tmp_path / name).write_bytes(bytes([i]) + bytes(3072))
    ds = load_cifar10(tmp_path)
    assert len(ds) == 6 and ds.evaluation_labels().tolist() == list(range(6))


# -- raw container / SVHN ----------------------------------------------------------------------


def test_raw_round_trip(tmp_path):
    x = np.random.default_rng(0).random((3, 3, 4, 5)).astype(np.float32)
    write_raw(tmp_path / "x.raw", x)
    data = (tmp_path / "x.raw").read_bytes()
    assert struct.unpack(">4I", data[:16]) == (3, 3, 4, 5)
    assert np.frombuffer(data[16:20], "<f4")[0] == x.flat[0]
    assert np.array_equal(read_raw(tmp_path / "x.raw"), x)


def test_raw_payload_size_is_checked(tmp_path):
    write_raw(tmp_path / "x.raw", np.zeros((2, 1, 2, 2), np.float32))
    (tmp_path / "y.raw").write_bytes((tmp_path / "x.raw").read_bytes()[:-4])
    with pytest.raises(ValueError):
        read_raw(tmp_path / "y.raw")


def test_load_svhn(tmp_path):
    write_raw(tmp_path / "svhn.raw", np.full((2, 3, 4, 4), 0.5, np.float32))
    (tmp_path / "svhn-labels-idx1-ubyte").write_bytes(idx_bytes(0x801, (2,), [0, 9]))
    ds = load_svhn(tmp_path)
    assert ds.image_shape == (3, 4, 4) and ds.evaluation_labels().tolist() == [0, 9]


# -- Dataset -----------------------------------------------------------------------------------


def test_dataset_is_read_only():
    ds = synth_blobs(seed=0)
    with pytest.raises(ValueError):
        ds.images[0, 0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        ds.evaluation_labels()[0] = 1


def test_dataset_validates_labels():
    with pytest.raises(ValueError):
        Dataset("x", np.zeros((2, 1, 1, 1), np.float32), 2, np.array([0, 2]))
    with pytest.raises(ValueError):
        Dataset("x", np.zeros((2, 1, 1, 1), np.float32), 2, np.array([0]))


def test_unknown_dataset():
    with pytest.raises(KeyError):
        load_dataset("imagenet")


# -- synthetic blobs -------------------------------------------------------------------------


def test_blobs_are_deterministic():
    a, b = synth_blobs(seed=3), synth_blobs(seed=3)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.evaluation_labels(), b.evaluation_labels())
    assert not np.array_equal(a.images, synth_blobs(seed=4).images)


def test_blob_shape_range_and_balance():
    ds = synth_blobs(4, 50, image_shape=(2, 6, 6), seed=1)
    assert ds.images.shape == (200, 2, 6, 6)
    assert ds.images.min() == 0.0 and ds.images.max() == 1.0
    assert np.bincount(ds.evaluation_labels()).tolist() == [50] * 4


def test_class_means_span_an_orthonormal_low_frequency_frame():
    basis = _low_frequency_basis((1, 8, 8), 5)
    assert np.allclose(basis.T @ basis, np.eye(5), atol=1e-12)
    assert np.allclose(basis.sum(axis=0), 0, atol=1e-12)  # no constant component


@pytest.mark.parametrize("seed", range(3))
def test_nearest_centroid_oracle(seed):
    ds = synth_blobs(3, 200, separation=10, seed=seed)
    x, y = ds.images.reshape(len(ds), -1), ds.evaluation_labels()
    centroids = np.stack([x[y == k].mean(0) for k in range(3)])
    pred = ((x[:, None] - centroids[None]) ** 2).sum(-1).argmin(1)
    assert (pred == y).mean() >= 0.99


def test_kmeans_separates_blobs():
    ds = synth_blobs(3, 200, separation=10, seed=0)
    pred = KMeans(3, n_init=10, random_state=0).fit_predict(ds.images.reshape(len(ds), -1))
    assert cluster_accuracy(pred, ds.evaluation_labels(), 3).accuracy >= 0.99


def test_zero_separation_is_chance():
    ds = synth_blobs(3, 200, separation=0, seed=0)
    pred = KMeans(3, n_init=10, random_state=0).fit_predict(ds.images.reshape(len(ds), -1))
    assert cluster_accuracy(pred, ds.evaluation_labels(), 3).accuracy <= 1 / 3 + 0.08


def test_blob_argument_checks():
    with pytest.raises(ValueError):
        synth_blobs(classes=1)
    with pytest.raises(ValueError):
        synth_blobs(classes=5, image_shape=(1, 2, 2))


# -- batching -----------------------------------------------------------------------------------


@pytest.mark.parametrize("n,b", [(10, 3), (7, 7), (5, 8)])
def test_epoch_is_a_permutation(n, b):
    it = BatchIterator(n, b, seed=2)
    batches = list(it.batches(1))
    assert sorted(np.concatenate(batches).tolist()) == list(range(n))
    assert all(len(x) == b for x in batches[:-1])


def test_epochs_differ_and_repeat_given_seed():
    a, b = BatchIterator(50, 8, seed=1), BatchIterator(50, 8, seed=1)
    assert np.array_equal(a.permutation(3), b.permutation(3))
    assert not np.array_equal(a.permutation(3), a.permutation(4))


def test_iteration_advances_the_epoch_counter():
    it = BatchIterator(6, 4, seed=0)
    first = np.concatenate(list(it))
    second = np.concatenate(list(it))
    assert it.epoch == 2
    assert np.array_equal(first, it.permutation(0)) and np.array_equal(second, it.permutation(1))


def test_drop_last():
    assert [len(b) for b in BatchIterator(10, 4, drop_last=True).batches(0)] == [4, 4]


# -- real files, when present ------------------------------------------------------------------


def _available(loader):
    try:
        return loader()
    except (FileNotFoundError, OSError):
        return None


@pytest.mark.dataset
def test_real_mnist_structure():
    ds = _available(load_mnist)
    if ds is None:
        pytest.skip("MNIST IDX files not found under INFOCLUST_DATA_DIR")
    counts = np.bincount(ds.evaluation_labels(), minlength=10)
    assert len(ds) == 70_000 and counts.sum() == 70_000 and (counts > 0).sum() == 10
    assert ds.images.min() >= 0 and ds.images.max() <= 1


@pytest.mark.dataset
def test_real_cifar10_structure():
    ds = _available(load_cifar10)
    if ds is None:
        pytest.skip("CIFAR-10 binary batches not found under INFOCLUST_DATA_DIR")
    assert len(ds) == 60_000
    assert np.bincount(ds.evaluation_labels()).tolist() == [6000] * 10
