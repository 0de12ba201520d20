"""Dataset loading, splitting and normalization.

Supports the IDX binary format (MNIST) and delimited numeric text (UCI HAR,
ISOLET). Labels are held 0-based internally.
"""
from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """Malformed input file; message names the file and the byte offset or line."""


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    class_count: int

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ValueError(f"X{self.X.shape} and y{self.y.shape} do not line up")
        if not np.isfinite(self.X).all():
            raise ValueError("features must be finite")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def feature_count(self) -> int:
        return self.X.shape[1]

    def subset(self, rows=None, features=None) -> "Dataset":
        X = self.X if rows is None else self.X[rows]
        y = self.y if rows is None else self.y[rows]
        if features is not None:
            X = X[:, features]
        return Dataset(X, y, self.class_count)


def _full_dataset(X, y) -> Dataset:
    y = np.asarray(y, dtype=np.int64)
    if y.size == 0:
        raise ValueError("dataset has no rows")
    C = int(y.max()) + 1
    missing = sorted(set(range(C)) - set(np.unique(y).tolist()))
    if missing:
        raise ValueError(f"classes {missing} never occur; labels must be contiguous")
    return Dataset(X, y, C)


@dataclass
class SplitDataset:
    train: Dataset
    val: Dataset
    test: Dataset
    warnings: tuple[str, ...] = ()

    @property
    def feature_count(self) -> int:
        return self.train.feature_count

    @property
    def class_count(self) -> int:
        return self.train.class_count

    def select_features(self, features) -> "SplitDataset":
        features = np.asarray(features, dtype=np.int64)
        return SplitDataset(
            self.train.subset(features=features),
            self.val.subset(features=features),
            self.test.subset(features=features),
            self.warnings,
        )


# -- IDX ---------------------------------------------------------------------

def _read_idx(path, magic, ndim_dims):
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim_dims
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header at byte offset {len(raw)}")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise DataFormatError(f"{path}: bad magic 0x{got:08x} at byte offset 0, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim_dims}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise DataFormatError(
            f"{path}: truncated data at byte offset {len(raw)}, expected {header + size} bytes"
        )
    data = np.frombuffer(raw, dtype=np.uint8, count=size, offset=header)
    return data.reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair; pixels are flattened and scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{labels_path}: {labels.shape[0]} labels for {images.shape[0]} images"
        )
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return _full_dataset(X, labels.astype(np.int64))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path):
    """Write uint8 images (n, rows, cols) and labels (n,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, r, c = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, r, c) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes())


# -- delimited text ------------------------------------------------------------

def _read_table(path, delimiter):
    rows = []
    width = None
    with open(path, newline="") as fh:
        if delimiter is None:
            lines = (line.split() for line in fh)
        else:
            lines = csv.reader(fh, delimiter=delimiter)
        for lineno, cells in enumerate(lines, start=1):
            cells = [c.strip() for c in cells]
            if delimiter is not None and cells and cells[-1] == "":
                cells = cells[:-1]  # ISOLET rows end with a trailing comma
            if not cells or all(c == "" for c in cells):
                continue
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise DataFormatError(f"{path}: line {lineno} has {len(cells)} fields, expected {width}")
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                raise DataFormatError(f"{path}: line {lineno} has a non-numeric cell") from None
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64)


def _labels_from_codes(codes, one_based, source):
    if not np.all(codes == np.round(codes)):
        raise DataFormatError(f"{source}: class codes must be integers")
    y = codes.astype(np.int64) - (1 if one_based else 0)
    if y.min() < 0:
        raise DataFormatError(f"{source}: class code below {1 if one_based else 0}")
    return y


def load_delimited(features_path, labels=None, delimiter=",", one_based=True) -> Dataset:
    """Load a numeric table.

    ``labels`` is either a path to a one-column label file (HAR layout) or
    None, in which case the last column holds the class code (ISOLET layout).
    ``delimiter=None`` splits on any whitespace.
    """
    table = _read_table(features_path, delimiter)
    if labels is None:
        if table.shape[1] < 2:
            raise DataFormatError(f"{features_path}: need at least one feature and a label column")
        X, codes, source = table[:, :-1], table[:, -1], features_path
    else:
        codes = _read_table(labels, delimiter)
        if codes.shape[1] != 1:
            raise DataFormatError(f"{labels}: expected a single label column")
        codes = codes[:, 0]
        if codes.shape[0] != table.shape[0]:
            raise DataFormatError(f"{labels}: {codes.shape[0]} labels for {table.shape[0]} rows")
        X, source = table, labels
    return _full_dataset(X, _labels_from_codes(codes, one_based, source))


def save_delimited(ds: Dataset, path, delimiter=",", one_based=True):
    """Write features plus a trailing label column; floats round-trip exactly."""
    offset = 1 if one_based else 0
    with open(path, "w", newline="") as fh:
        for row, label in zip(ds.X, ds.y):
            fh.write(delimiter.join([repr(float(v)) for v in row] + [str(int(label) + offset)]))
            fh.write("\n")


# -- splitting -------------------------------------------------------------

def split_sizes(n: int, ratios=(0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    """Validation and test sizes are rounded (half up); train takes the rest."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative fractions summing to 1: {ratios}")
    n_val, n_test = (
        int((Decimal(repr(r)) * n).quantize(Decimal(1), rounding=ROUND_HALF_UP)) for r in ratios[1:]
    )
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"{n} rows cannot fill three non-empty splits")
    return n_train, n_val, n_test


def split_indices(n: int, seed: int, ratios=(0.6, 0.2, 0.2)):
    n_train, n_val, _ = split_sizes(n, ratios)
    order = np.random.default_rng(seed).permutation(n)
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


def split(ds: Dataset, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> SplitDataset:
    """Seeded uniform shuffle, then contiguous train/val/test cuts."""
    tr, va, te = split_indices(ds.n, seed, ratios)
    notes = []
    absent = sorted(set(range(ds.class_count)) - set(np.unique(ds.y[tr]).tolist()))
    if absent:
        msg = f"classes {absent} are absent from the training split"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
    return SplitDataset(ds.subset(tr), ds.subset(va), ds.subset(te), tuple(notes))


def subsample(ds: Dataset, rows: int, seed: int) -> Dataset:
    if rows <= 0 or rows >= ds.n:
        return ds
    idx = np.sort(np.random.default_rng(seed).permutation(ds.n)[:rows])
    return ds.subset(idx)


NORMALIZE_MODES = ("none", "minmax", "zscore")


def normalize(splits: SplitDataset, mode: str = "none") -> SplitDataset:
    """Scale every split with statistics taken from the training split only."""
    if mode not in NORMALIZE_MODES:
        raise ValueError(f"unknown normalization {mode!r}")
    if mode == "none":
        return splits
    Xtr = splits.train.X
    if mode == "minmax":
        shift = Xtr.min(axis=0)
        scale = Xtr.max(axis=0) - shift
    else:
        shift = Xtr.mean(axis=0)
        scale = Xtr.std(axis=0)
    flat = scale == 0
    scale = np.where(flat, 1.0, scale)

    def tx(part: Dataset) -> Dataset:
        X = (part.X - shift) / scale
        X[:, flat] = 0.0
        return Dataset(X, part.y, part.class_count)

    return SplitDataset(tx(splits.train), tx(splits.val), tx(splits.test), splits.warnings)


def make_signal_noise(n: int, d: int, informative, seed: int) -> Dataset:
    """Standard-normal features; label is 1 when the informative columns sum above zero."""
    informative = np.asarray(informative, dtype=np.int64)
    if informative.size == 0 or informative.min() < 0 or informative.max() >= d:
        raise ValueError("informative indices must lie in [0, d)")
    X = np.random.default_rng(seed).standard_normal((n, d))
    y = (X[:, informative].sum(axis=1) > 0).astype(np.int64)
    return _full_dataset(X, y)
