"""Datasets: synthetic latent-factor generator, feature CSVs, class splits, batch sampler."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray                 # (N, input_dim)
    labels: np.ndarray                   # (N,) contiguous from 0
    surrogate: np.ndarray | None = None  # (N,) current surrogate labels
    shared: np.ndarray | None = None     # (N,) hidden shared factor, synthetic only
    class_names: np.ndarray | None = None
    index: dict[int, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise DataError("features must be (N, d) with one label per row")
        if len(self.labels) == 0:
            raise DataError("empty dataset")
        if not np.all(np.isfinite(self.features)):
            raise DataError("non-finite feature values")
        k = int(self.labels.max()) + 1
        if self.labels.min() < 0 or len(np.unique(self.labels)) != k:
            raise DataError("class labels must be contiguous from 0")
        self.index = {c: np.flatnonzero(self.labels == c) for c in range(k)}
        if self.surrogate is None:
            self.surrogate = np.zeros(len(self.labels), dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.index)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def set_surrogate(self, labels) -> None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != self.labels.shape:
            raise DataError("surrogate labels must have one entry per sample")
        # swap the whole column at once; readers see old or new, never a mix
        self.surrogate = labels.copy()

    def subset(self, rows) -> "Dataset":
        """Rows as a new dataset with class labels re-indexed to 0..k-1."""
        rows = np.asarray(rows)
        old = self.labels[rows]
        names = self.class_names if self.class_names is not None else np.arange(self.num_classes)
        uniq, new = np.unique(old, return_inverse=True)
        return Dataset(self.features[rows], new, self.surrogate[rows].copy(),
                       None if self.shared is None else self.shared[rows], names[uniq])


@dataclass(frozen=True)
class SplitSpec:
    train_classes: tuple[int, ...]
    test_classes: tuple[int, ...]

    def __post_init__(self):
        if set(self.train_classes) & set(self.test_classes):
            raise DataError("train and test classes overlap")


@dataclass(frozen=True)
class BatchSpec:
    batch_size: int = 112
    per_class: int = 4

    def __post_init__(self):
        if self.per_class < 1 or self.batch_size < 1 or self.batch_size % self.per_class:
            raise DataError("batch_size must be a positive multiple of per_class")

    @property
    def classes_per_batch(self) -> int:
        return self.batch_size // self.per_class


def generate_synthetic(num_classes: int = 40, per_class: int = 30, num_shared: int = 4,
                       input_dim: int = 64, noise_std: float = 0.1, seed: int = 0,
                       class_rank: int | None = 16, class_scale: float = 0.7,
                       shared_scale: float = 3.0) -> Dataset:
    """x = class_atom[y] + shared_atom[s] + noise, s uniform and independent of y.

    A random orthonormal basis is split into a class subspace of dimension
    ``class_rank`` and ``num_shared`` shared directions.  Shared atoms are the
    shared directions (times ``shared_scale``).  Class atoms are random unit
    vectors inside the class subspace (times ``class_scale``), so classes
    unseen in training still live where training happened.  With
    ``class_rank=None`` every class gets its own basis direction.
    """
    if min(num_classes, per_class, num_shared, input_dim) < 1 or noise_std < 0:
        raise DataError("counts must be >= 1 and noise_std >= 0")
    rank = num_classes if class_rank is None else class_rank
    if rank < 1:
        raise DataError("class_rank must be >= 1")
    if input_dim < rank + num_shared:
        raise DataError(f"input_dim={input_dim} < class dims + num_shared = {rank + num_shared}")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((input_dim, input_dim)))
    basis = q.T
    shared_atoms = shared_scale * basis[rank:rank + num_shared]
    if class_rank is None:
        class_atoms = basis[:num_classes]
    else:
        coef = rng.standard_normal((num_classes, rank))
        coef /= np.linalg.norm(coef, axis=1, keepdims=True)
        class_atoms = coef @ basis[:rank]
    class_atoms = class_scale * class_atoms
    y = np.repeat(np.arange(num_classes), per_class)
    s = rng.integers(num_shared, size=len(y))
    x = class_atoms[y] + shared_atoms[s] + noise_std * rng.standard_normal((len(y), input_dim))
    return Dataset(x, y, shared=s)


def zero_shot_split(dataset: Dataset, num_train_classes: int | None = None):
    """First half of the classes for training, the rest for testing."""
    k = dataset.num_classes
    n_train = k // 2 if num_train_classes is None else num_train_classes
    if not 1 <= n_train < k:
        raise DataError("need at least one train and one test class")
    spec = SplitSpec(tuple(range(n_train)), tuple(range(n_train, k)))
    train_rows = np.flatnonzero(dataset.labels < n_train)
    test_rows = np.flatnonzero(dataset.labels >= n_train)
    return dataset.subset(train_rows), dataset.subset(test_rows), spec


def next_batch(dataset: Dataset, spec: BatchSpec, rng: np.random.Generator) -> np.ndarray:
    """Pick batch_size/per_class distinct classes, then per_class samples from each.

    Classes smaller than ``per_class`` are sampled with replacement.
    """
    k = spec.classes_per_batch
    if dataset.num_classes == 0:
        raise DataError("no eligible class")
    if k > dataset.num_classes:
        raise DataError(f"batch needs {k} classes, dataset has {dataset.num_classes}")
    classes = rng.choice(dataset.num_classes, size=k, replace=False)
    out = []
    for c in classes:
        rows = dataset.index[int(c)]
        replace = len(rows) < spec.per_class
        out.append(rng.choice(rows, size=spec.per_class, replace=replace))
    return np.concatenate(out)


# --- CSV ---------------------------------------------------------------------
#
# UTF-8, comma separated, one sample per row: class label first, then the
# feature values.  An optional header row is skipped with ``header=True``.
# Labels may be any strings/ints; they are mapped to 0..k-1 in sorted order.

def load_features_csv(path, header: bool = False) -> Dataset:
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    raw_labels, rows = [], []
    width = None
    with fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if header and lineno == 1:
                continue
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) < 2:
                raise DataError(f"{path}:{lineno}: need a label and at least one feature")
            if width is None:
                width = len(rec)
            elif len(rec) != width:
                raise DataError(f"{path}:{lineno}: expected {width} columns, got {len(rec)}")
            try:
                vals = [float(c) for c in rec[1:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
            raw_labels.append(rec[0].strip())
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    raw = np.array(raw_labels)
    try:
        keys = raw.astype(np.int64)
    except ValueError:
        keys = raw
    names, labels = np.unique(keys, return_inverse=True)
    return Dataset(np.array(rows), labels, class_names=names)


def save_features_csv(dataset: Dataset, path, header: bool = False, precision: int = 17) -> Path:
    path = Path(path)
    names = dataset.class_names if dataset.class_names is not None else np.arange(dataset.num_classes)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(["label"] + [f"x{j}" for j in range(dataset.input_dim)])
        for y, row in zip(dataset.labels, dataset.features):
            w.writerow([names[y]] + [f"{v:.{precision}g}" for v in row])
    return path
