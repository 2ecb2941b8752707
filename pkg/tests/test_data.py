import gzip
import struct

import numpy as np
import pytest

from varprop import data


# ---------------------------------------------------------------------------
# CSV

def _write(tmp_path, text, name="t.csv"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_load_csv_header_autodetect(tmp_path):
    path = _write(tmp_path, "a,b,y\n1,2,3\n4,5,6\n")
    x, y = data.load_csv(path)
    np.testing.assert_array_equal(x, [[1.0, 2.0], [4.0, 5.0]])
    np.testing.assert_array_equal(y, [[3.0], [6.0]])


def test_load_csv_no_header_kept(tmp_path):
    path = _write(tmp_path, "1,2,3\n4,5,6\n")
    x, y = data.load_csv(path)
    assert x.shape == (2, 2)


def test_load_csv_target_column(tmp_path):
    path = _write(tmp_path, "1,2,3\n4,5,6\n")
    x, y = data.load_csv(path, target_column=0)
    np.testing.assert_array_equal(x, [[2.0, 3.0], [5.0, 6.0]])
    np.testing.assert_array_equal(y, [[1.0], [4.0]])


def test_load_csv_ragged_row_line_number(tmp_path):
    path = _write(tmp_path, "1,2,3\n4,5\n")
    with pytest.raises(ValueError, match=":2:"):
        data.load_csv(path)


def test_load_csv_non_numeric_line_number(tmp_path):
    path = _write(tmp_path, "h1,h2,h3\n1,2,3\n4,oops,6\n")
    with pytest.raises(ValueError, match=":3:"):
        data.load_csv(path)


def test_load_csv_empty_rejected(tmp_path):
    with pytest.raises(ValueError, match="no data rows"):
        data.load_csv(_write(tmp_path, "a,b\n"))


# ---------------------------------------------------------------------------
# Splitting and standardization

def test_split_ten_rows_gives_nine_one():
    x = np.arange(20.0).reshape(10, 2)
    y = np.arange(10.0).reshape(10, 1)
    x_tr, y_tr, x_te, y_te = data.split_90_10(x, y, seed=0)
    assert x_tr.shape == (9, 2) and x_te.shape == (1, 2)
    combined = np.vstack([x_tr, x_te])
    assert sorted(map(tuple, combined)) == sorted(map(tuple, x))
    # rows stay paired with their targets
    np.testing.assert_array_equal(x_tr[:, 0] / 2.0, y_tr[:, 0])


def test_split_deterministic_per_seed():
    x = np.arange(40.0).reshape(20, 2)
    y = np.arange(20.0).reshape(20, 1)
    a = data.split_90_10(x, y, seed=3)
    b = data.split_90_10(x, y, seed=3)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)
    c = data.split_90_10(x, y, seed=4)
    assert not np.array_equal(a[2], c[2])


def test_regression_dataset_standardizes_from_train_only():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 2.0, size=(200, 4))
    y = rng.normal(-5.0, 7.0, size=(200, 1))
    ds = data.make_regression_dataset(x, y, seed=1)
    assert ds.kind == "regression"
    np.testing.assert_allclose(ds.x_train.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(ds.x_train.std(axis=0), 1.0, atol=1e-12)
    np.testing.assert_allclose(ds.y_train.mean(), 0.0, atol=1e-12)
    assert ds.target_sd == ds.stats["y_sd"] > 0.0
    # test rows use train statistics, so they are close to but not exactly standard
    assert abs(ds.x_test.mean()) < 0.5
    raw = data.make_regression_dataset(x, y, seed=1, standardize=False)
    assert raw.target_sd == 1.0 and raw.stats == {}
    # untouched values: every raw training target appears in the source
    assert set(raw.y_train[:, 0]) <= set(y[:, 0])


def test_constant_column_does_not_divide_by_zero():
    x = np.ones((30, 2))
    x[:, 1] = np.arange(30.0)
    y = np.arange(30.0).reshape(-1, 1)
    ds = data.make_regression_dataset(x, y, seed=0)
    assert np.all(np.isfinite(ds.x_train))
    assert np.all(ds.x_train[:, 0] == 0.0)


def test_dataset_rejects_non_finite():
    bad = np.array([[np.nan]])
    with pytest.raises(ValueError, match="x_train"):
        data.Dataset(bad, bad, bad, bad, "regression")


# ---------------------------------------------------------------------------
# IDX containers

def _idx_images(arrays):
    n, h, w = arrays.shape
    return struct.pack(">IIII", 0x0803, n, h, w) + arrays.astype(np.uint8).tobytes()


def _idx_labels(labels):
    return struct.pack(">II", 0x0801, len(labels)) + bytes(labels)


def test_load_idx_round_trip(tmp_path):
    imgs = np.arange(2 * 3 * 3).reshape(2, 3, 3) * 10 % 256
    ip = tmp_path / "im.idx"
    lp = tmp_path / "lb.idx"
    ip.write_bytes(_idx_images(imgs))
    lp.write_bytes(_idx_labels([4, 9]))
    x, y = data.load_idx(str(ip), str(lp))
    assert x.shape == (2, 1, 3, 3) and x.dtype == np.float64
    assert x.min() >= 0.0 and x.max() <= 1.0
    np.testing.assert_allclose(x[0, 0], imgs[0] / 255.0)
    np.testing.assert_array_equal(y, [4, 9])


def test_load_idx_gzip_transparent(tmp_path):
    imgs = np.zeros((1, 2, 2), dtype=np.uint8)
    ip = tmp_path / "im.idx.gz"
    lp = tmp_path / "lb.idx.gz"
    ip.write_bytes(gzip.compress(_idx_images(imgs)))
    lp.write_bytes(gzip.compress(_idx_labels([7])))
    x, y = data.load_idx(str(ip), str(lp))
    assert x.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(y, [7])


def test_load_idx_validates(tmp_path):
    ip = tmp_path / "im.idx"
    lp = tmp_path / "lb.idx"
    ip.write_bytes(b"\x00\x00\x09\x03" + b"\x00" * 16)
    lp.write_bytes(_idx_labels([1]))
    with pytest.raises(ValueError, match="magic|unsigned-byte"):
        data.load_idx(str(ip), str(lp))

    ip.write_bytes(_idx_images(np.zeros((1, 2, 2))))
    lp.write_bytes(_idx_labels([1, 2]))
    with pytest.raises(ValueError, match="count"):
        data.load_idx(str(ip), str(lp))

    truncated = _idx_images(np.zeros((2, 2, 2)))[:-3]
    ip.write_bytes(truncated)
    lp.write_bytes(_idx_labels([1, 2]))
    with pytest.raises(ValueError, match="payload|truncat"):
        data.load_idx(str(ip), str(lp))


def test_idx_dataset_one_hot(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, size=(6, 4, 4))
    ip, lp = tmp_path / "a", tmp_path / "b"
    ip.write_bytes(_idx_images(imgs))
    lp.write_bytes(_idx_labels([0, 1, 2, 0, 1, 2]))
    ds = data.make_idx_dataset(str(ip), str(lp), str(ip), str(lp), num_classes=3)
    assert ds.kind == "classification" and ds.num_classes == 3
    assert ds.y_train.shape == (6, 3)
    np.testing.assert_array_equal(ds.y_train.sum(axis=1), np.ones(6))
    np.testing.assert_array_equal(np.argmax(ds.y_train, axis=1), [0, 1, 2, 0, 1, 2])


def test_one_hot_range_check():
    with pytest.raises(ValueError, match="label"):
        data.one_hot(np.array([0, 3]), num_classes=3)
    with pytest.raises(ValueError, match="label"):
        data.one_hot(np.array([-1]), num_classes=3)


# ---------------------------------------------------------------------------
# CIFAR binary batches

def _cifar_bytes(labels, pixel):
    out = b""
    for lab in labels:
        out += bytes([lab]) + bytes([pixel]) * 3072
    return out


def test_cifar_batch_shapes(tmp_path):
    p = tmp_path / "b.bin"
    p.write_bytes(_cifar_bytes([3, 5], 128))
    x, y = data.load_cifar_batch(str(p))
    assert x.shape == (2, 3, 32, 32)
    np.testing.assert_array_equal(y, [3, 5])
    np.testing.assert_allclose(x, 128 / 255.0)


def test_cifar_batch_rejects_partial_record(tmp_path):
    p = tmp_path / "b.bin"
    p.write_bytes(_cifar_bytes([1], 0) + b"\x00" * 100)
    with pytest.raises(ValueError, match="multiple"):
        data.load_cifar_batch(str(p))


def test_cifar_dataset_per_channel_standardization(tmp_path):
    rng = np.random.default_rng(0)
    recs = b""
    for i in range(8):
        img = rng.integers(0, 256, size=3072)
        recs += bytes([i % 10]) + bytes(img.tolist())
    tr = tmp_path / "tr.bin"
    te = tmp_path / "te.bin"
    tr.write_bytes(recs)
    te.write_bytes(recs[:3073 * 2])
    ds = data.make_cifar_dataset([str(tr)], str(te), num_classes=10)
    assert ds.x_train.shape == (8, 3, 32, 32)
    for ch in range(3):
        assert abs(ds.x_train[:, ch].mean()) < 1e-12
        assert abs(ds.x_train[:, ch].std() - 1.0) < 1e-12
    assert ds.y_train.shape == (8, 10)
