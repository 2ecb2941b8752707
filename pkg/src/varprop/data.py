"""Dataset ingestion: numeric CSV, IDX images, CIFAR binary batches.

Loaders are pure and strict: malformed input is rejected with the line or
byte position, never coerced. Standardization statistics always come from
the train split alone; the target scale is kept so test log-likelihoods
can be reported in the original units.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

from .seeding import substream


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    kind: str  # regression | classification
    num_classes: int | None = None
    target_sd: float = 1.0  # original-scale sd of the regression target
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("x_train", "y_train", "x_test", "y_test"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def n_train(self) -> int:
        return self.x_train.shape[0]

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x_train.shape[1:])


# ---------------------------------------------------------------------------
# CSV

def load_csv(path, target_column: int = -1, header: str = "auto"):
    """Read a rectangular numeric CSV into (features, targets).

    header: "auto" skips a first line that fails numeric parsing; True /
    False force the choice. Ragged rows and non-numeric cells raise with
    their 1-based line number.
    """
    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    start = 0
    if lines and header in ("auto", True):
        try:
            [float(c) for c in lines[0].split(",") if c.strip() != ""]
            skip = header is True
        except ValueError:
            skip = True
        if skip:
            start = 1
    for ln, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        cells = line.split(",")
        if width is None:
            width = len(cells)
        elif len(cells) != width:
            raise ValueError(f"{path}:{ln}: ragged row ({len(cells)} cells, expected {width})")
        try:
            rows.append([float(c) for c in cells])
        except ValueError:
            raise ValueError(f"{path}:{ln}: non-numeric cell") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    table = np.asarray(rows, dtype=np.float64)
    tc = target_column % table.shape[1]
    features = np.delete(table, tc, axis=1)
    targets = table[:, tc:tc + 1]
    return features, targets


def split_90_10(x, y, seed: int):
    """Deterministic shuffled 90/10 split; the test share is max(1, N/10)."""
    n = x.shape[0]
    order = substream(seed, "split").permutation(n)
    n_test = max(1, int(round(n / 10)))
    test, train = order[:n_test], order[n_test:]
    return x[train], y[train], x[test], y[test]


def make_regression_dataset(features, targets, seed: int, standardize: bool = True) -> Dataset:
    x_tr, y_tr, x_te, y_te = split_90_10(features, targets, seed)
    stats = {}
    target_sd = 1.0
    if standardize:
        mx, sx = x_tr.mean(axis=0), x_tr.std(axis=0)
        sx = np.where(sx > 0.0, sx, 1.0)
        my, sy = y_tr.mean(), y_tr.std()
        sy = sy if sy > 0.0 else 1.0
        x_tr, x_te = (x_tr - mx) / sx, (x_te - mx) / sx
        y_tr, y_te = (y_tr - my) / sy, (y_te - my) / sy
        stats = {"x_mean": mx, "x_sd": sx, "y_mean": float(my), "y_sd": float(sy)}
        target_sd = float(sy)
    return Dataset(x_tr, y_tr, x_te, y_te, "regression", target_sd=target_sd, stats=stats)


# ---------------------------------------------------------------------------
# IDX (big-endian image/label containers)

def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path):
    with _open_maybe_gzip(path) as fh:
        head = fh.read(4)
        if len(head) != 4 or head[0] != 0 or head[1] != 0:
            raise ValueError(f"{path}: bad IDX magic {head!r}")
        dtype_code, ndim = head[2], head[3]
        if dtype_code != 0x08:
            raise ValueError(f"{path}: only unsigned-byte IDX supported, got 0x{dtype_code:02x}")
        dims = struct.unpack(f">{ndim}I", fh.read(4 * ndim))
        data = fh.read()
    expect = int(np.prod(dims))
    if len(data) != expect:
        raise ValueError(f"{path}: payload {len(data)} bytes, header says {expect}")
    return np.frombuffer(data, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path):
    """Load an IDX image/label pair: images scaled to [0,1], shape (N,1,H,W)."""
    images = _read_idx(images_path)
    labels = _read_idx(labels_path)
    if images.ndim != 3:
        raise ValueError(f"{images_path}: expected 3-d image container, got {images.ndim}-d")
    if labels.ndim != 1:
        raise ValueError(f"{labels_path}: expected 1-d label container, got {labels.ndim}-d")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    x = (images.astype(np.float64) / 255.0)[:, None, :, :]
    return x, labels.astype(np.int64)


def make_idx_dataset(train_images, train_labels, test_images, test_labels,
                     num_classes: int = 10) -> Dataset:
    x_tr, y_tr = load_idx(train_images, train_labels)
    x_te, y_te = load_idx(test_images, test_labels)
    return Dataset(x_tr, one_hot(y_tr, num_classes), x_te, one_hot(y_te, num_classes),
                   "classification", num_classes=num_classes)


def one_hot(labels, num_classes: int):
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels outside [0, {num_classes})")
    return np.eye(num_classes, dtype=np.float64)[labels]


# ---------------------------------------------------------------------------
# CIFAR binary batches

def load_cifar_batch(path):
    """One CIFAR binary batch: records of 1 label byte + 3072 pixel bytes."""
    with _open_maybe_gzip(path) as fh:
        raw = fh.read()
    rec = 3073
    if len(raw) == 0 or len(raw) % rec:
        raise ValueError(f"{path}: size {len(raw)} is not a multiple of {rec}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, 0].astype(np.int64)
    images = arr[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def make_cifar_dataset(train_paths, test_path, num_classes: int = 10,
                       per_channel_standardize: bool = True) -> Dataset:
    parts = [load_cifar_batch(p) for p in train_paths]
    x_tr = np.concatenate([p[0] for p in parts])
    y_tr = np.concatenate([p[1] for p in parts])
    x_te, y_te = load_cifar_batch(test_path)
    stats = {}
    if per_channel_standardize:
        m = x_tr.mean(axis=(0, 2, 3), keepdims=True)
        s = x_tr.std(axis=(0, 2, 3), keepdims=True)
        s = np.where(s > 0.0, s, 1.0)
        x_tr, x_te = (x_tr - m) / s, (x_te - m) / s
        stats = {"channel_mean": m.ravel(), "channel_sd": s.ravel()}
    return Dataset(x_tr, one_hot(y_tr, num_classes), x_te, one_hot(y_te, num_classes),
                   "classification", num_classes=num_classes, stats=stats)
