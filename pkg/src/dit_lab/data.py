"""Datasets: CSV and IDX loaders, a two-Gaussian generator, label flipping."""

from __future__ import annotations

import csv
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, LoadError
from .numkit import Sample

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    """Ordered binary-labelled samples. A sample's identity is its row index."""

    X: np.ndarray
    y: np.ndarray
    name: str = "dataset"
    feature_names: tuple = field(default=(), compare=False)

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.float64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ContractError(f"inconsistent dataset shapes X={X.shape} y={y.shape}")
        if not np.all(np.isfinite(X)):
            raise ContractError("features must be finite")
        if not np.all((y == 0.0) | (y == 1.0)):
            raise ContractError("labels must be 0 or 1")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.X.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.name == other.name and np.array_equal(self.X, other.X)
                and np.array_equal(self.y, other.y))

    __hash__ = None

    def __getitem__(self, i) -> Sample:
        return Sample(self.X[i], float(self.y[i]))

    @property
    def feature_dim(self):
        return self.X.shape[1]

    @property
    def samples(self):
        return [self[i] for i in range(len(self))]

    def subset(self, indices, name=None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], name or self.name, self.feature_names)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.X.shape, dtype="<u8").tobytes())
        h.update(self.X.astype("<f8").tobytes())
        h.update(self.y.astype("<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class FlipRecord:
    flipped_indices: frozenset
    rate: float

    def __len__(self):
        return len(self.flipped_indices)


def _zscore(col, name):
    mean = col.mean()
    std = col.std(ddof=1) if col.shape[0] > 1 else 0.0
    if std == 0.0:
        log.warning("numeric column %r is constant; mapped to zeros", name)
        return np.zeros_like(col)
    return (col - mean) / std


def standardize(X):
    """Column-wise z-score with sample std; constant columns become zeros."""
    X = np.asarray(X, dtype=np.float64)
    return np.column_stack([_zscore(X[:, k], k) for k in range(X.shape[1])]) if X.size else X


def _label_map(values, positive_label):
    levels = sorted(set(values))
    if len(levels) > 2:
        raise LoadError(f"label column is not binary: levels {levels[:5]}")
    if positive_label is not None:
        return {v: float(v == str(positive_label)) for v in levels}
    if set(levels) <= {"0", "1"}:
        return {v: float(v) for v in levels}
    return {v: float(i) for i, v in enumerate(levels)}


def load_csv(path, label_column, numeric_columns=(), categorical_columns=(),
             positive_label=None, standardize_numeric=True) -> Dataset:
    """Read a header-first CSV into a binary Dataset.

    Numeric columns are z-scored, categorical columns one-hot encoded with
    levels in sorted order. The label is mapped to {0, 1}; with two string
    levels the lexicographically larger one is class 1 unless
    ``positive_label`` names it.
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError) as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise LoadError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    if not body:
        raise LoadError(f"{path} has no data rows")
    col = {name: i for i, name in enumerate(header)}
    for name in [label_column, *numeric_columns, *categorical_columns]:
        if name not in col:
            raise LoadError(f"column {name!r} missing from {path}")
    for lineno, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise LoadError(f"{path}:{lineno}: expected {len(header)} fields, got {len(r)}")

    labels = [r[col[label_column]].strip() for r in body]
    mapping = _label_map(labels, positive_label)
    y = np.array([mapping[v] for v in labels])

    blocks, names = [], []
    for name in numeric_columns:
        try:
            values = np.array([float(r[col[name]]) for r in body])
        except ValueError as exc:
            raise LoadError(f"column {name!r}: {exc}") from exc
        if not np.all(np.isfinite(values)):
            raise LoadError(f"column {name!r} has non-finite values")
        blocks.append((_zscore(values, name) if standardize_numeric else values)[:, None])
        names.append(name)
    for name in categorical_columns:
        values = [r[col[name]].strip() for r in body]
        levels = sorted(set(values))
        blocks.append(np.array([[float(v == lv) for lv in levels] for v in values]))
        names.extend(f"{name}={lv}" for lv in levels)
    X = np.hstack(blocks) if blocks else np.zeros((len(body), 0))
    return Dataset(X, y, path.stem, tuple(names))


def write_csv(dataset: Dataset, path, label_column="label"):
    """Serialize a dataset as CSV (feature columns x0.., then the label)."""
    names = list(dataset.feature_names) or [f"x{k}" for k in range(dataset.feature_dim)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names + [label_column])
        for x, y in zip(dataset.X, dataset.y):
            w.writerow([repr(float(v)) for v in x] + [str(int(y))])
    return names


def _read_idx(path, magic):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 8:
        raise LoadError(f"{path}: truncated header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise LoadError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = raw[3]
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    offset = 4 + 4 * ndim
    expected = int(np.prod(dims))
    data = np.frombuffer(raw, dtype=">u1", offset=offset)
    if data.size != expected:
        raise LoadError(f"{path}: expected {expected} bytes of data, found {data.size}")
    return data.reshape(dims)


def load_idx(images_path, labels_path, class_a, class_b) -> Dataset:
    """Two-class subset of an IDX image set; ``class_a`` maps to 0, ``class_b`` to 1."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise LoadError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    keep = (labels == class_a) | (labels == class_b)
    if not keep.any():
        raise LoadError(f"no samples of class {class_a} or {class_b}")
    X = images[keep].reshape(int(keep.sum()), -1).astype(np.float64) / 255.0
    y = (labels[keep] == class_b).astype(np.float64)
    return Dataset(X, y, f"{Path(images_path).stem}_{class_a}v{class_b}")


def write_idx(path, array):
    """Write a uint8 array in IDX format (images: 3-D, labels: 1-D)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with Path(path).open("wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def make_synthetic(seed, N, d, class_separation, name="synthetic") -> Dataset:
    """Two unit-variance spherical Gaussians at +/- (separation/2) u.

    Labels alternate 0, 1, 0, ... so every prefix is balanced. The direction
    ``u`` depends only on ``(seed, d)``; draw train and test rows from one
    call and split with :meth:`Dataset.subset` to share it.
    """
    if N < 2 or d < 1:
        raise ContractError("make_synthetic needs N >= 2 and d >= 1")
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    y = (np.arange(N) % 2).astype(np.float64)
    centers = np.where(y[:, None] == 1.0, 1.0, -1.0) * (class_separation / 2.0) * u
    X = centers + rng.standard_normal((N, d))
    return Dataset(X, y, name)


def flip_labels(dataset: Dataset, rate, seed):
    """Toggle ``round(rate * N)`` labels chosen uniformly without replacement."""
    if not 0.0 <= rate < 1.0:
        raise ContractError("flip rate must lie in [0, 1)")
    n = len(dataset)
    k = int(round(rate * n))
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=k, replace=False)) if k else np.array([], dtype=np.int64)
    y = dataset.y.copy()
    y[idx] = 1.0 - y[idx]
    flipped = Dataset(dataset.X, y, f"{dataset.name}_flip{rate:g}", dataset.feature_names)
    return flipped, FlipRecord(frozenset(int(i) for i in idx), float(rate))


def split(dataset: Dataset, n_first):
    """First ``n_first`` rows and the remainder as two datasets."""
    n = len(dataset)
    if not 0 < n_first < n:
        raise ContractError(f"split point {n_first} must lie strictly inside (0, {n})")
    return dataset.subset(np.arange(n_first)), dataset.subset(np.arange(n_first, n))
