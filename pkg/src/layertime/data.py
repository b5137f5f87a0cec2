"""Datasets: the synthetic peaks problem, CSV tables, seeded splits.

Random draws use numpy's ``default_rng`` (PCG64) seeded with the given
integer, so every generated dataset and split is a pure function of its
parameters and seed.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .network import Batch

PEAKS_DOMAIN = (-3.0, 3.0)
PEAKS_GRID = 201
PEAKS_CLASSES = 5

# Quintile boundaries of peaks_value on the 201 x 201 grid over [-3, 3]^2.
# Regenerate with scripts/peaks_thresholds.py (checked by the test suite).
PEAKS_THRESHOLDS = (
    -0.2969669138832424,
    0.001505012984500929,
    0.14550863043375975,
    1.2911633881653015,
)


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_names: tuple | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 2:
            raise ValueError("features and labels must be 2-d arrays")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels have different row counts")
        if not np.isfinite(self.features).all():
            raise ValueError("non-finite feature values")
        if self.labels.size and not (
            np.all((self.labels == 0) | (self.labels == 1))
            and np.all(self.labels.sum(axis=1) == 1)
        ):
            raise ValueError("labels must be one-hot rows")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_f(self) -> int:
        return self.features.shape[1]

    @property
    def n_c(self) -> int:
        return self.labels.shape[1]

    def batch(self) -> Batch:
        return Batch(self.features, self.labels.astype(float))

    def subset(self, idx, note=None) -> "Dataset":
        prov = dict(self.provenance)
        if note:
            prov["subset"] = note
        return Dataset(self.features[idx], self.labels[idx], self.class_names, prov)


def one_hot(index, n_c: int) -> np.ndarray:
    index = np.asarray(index, dtype=int)
    out = np.zeros((index.size, n_c))
    out[np.arange(index.size), index] = 1.0
    return out


# -- peaks -------------------------------------------------------------------

def peaks_value(x, y):
    """The classical "peaks" surface (scalar or array inputs)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    v = (3.0 * (1.0 - x) ** 2 * np.exp(-x ** 2 - (y + 1.0) ** 2)
         - 10.0 * (x / 5.0 - x ** 3 - y ** 5) * np.exp(-x ** 2 - y ** 2)
         - np.exp(-(x + 1.0) ** 2 - y ** 2) / 3.0)
    return v if v.ndim else float(v)


def compute_peaks_thresholds(grid: int = PEAKS_GRID, n_classes: int = PEAKS_CLASSES):
    """Empirical class boundaries of peaks_value on a uniform grid.

    Sorts the grid values and returns ``sorted[k * M // n_classes]`` for
    ``k = 1 .. n_classes - 1``, where ``M`` is the number of grid points.
    """
    lo, hi = PEAKS_DOMAIN
    axis = np.linspace(lo, hi, grid)
    X, Y = np.meshgrid(axis, axis, indexing="ij")
    vals = np.sort(peaks_value(X, Y).ravel())
    M = vals.size
    return tuple(float(vals[k * M // n_classes]) for k in range(1, n_classes))


def peaks_thresholds():
    return PEAKS_THRESHOLDS


def peaks_class(values, thresholds=PEAKS_THRESHOLDS) -> np.ndarray:
    """Class index: number of boundaries at or below the value."""
    return np.searchsorted(np.asarray(thresholds), np.asarray(values), side="right")


def generate_peaks(s: int, seed: int) -> Dataset:
    """``s`` uniform points on [-3, 3]^2 labelled by their peaks quintile."""
    if s < 1:
        raise ValueError("s must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = PEAKS_DOMAIN
    pts = rng.uniform(lo, hi, size=(s, 2))
    labels = one_hot(peaks_class(peaks_value(pts[:, 0], pts[:, 1])), PEAKS_CLASSES)
    return Dataset(pts, labels, tuple(f"q{k}" for k in range(PEAKS_CLASSES)),
                   {"generated": {"problem": "peaks", "s": s, "seed": seed}})


# -- CSV -----------------------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def save_csv(ds: Dataset, path, label_mode: str = "index"):
    """Write ``ds`` with full round-trip float precision."""
    n_f, n_c = ds.n_f, ds.n_c
    header = [f"f{i}" for i in range(n_f)]
    header += ["label"] if label_mode == "index" else [f"c{j}" for j in range(n_c)]
    idx = np.argmax(ds.labels, axis=1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for k in range(len(ds)):
            row = [repr(float(v)) for v in ds.features[k]]
            if label_mode == "index":
                row.append(str(int(idx[k])))
            else:
                row += [str(int(v)) for v in ds.labels[k]]
            wr.writerow(row)


def load_csv(path, n_f: int, n_c: int, label_mode: str = "index",
             normalize: bool = False) -> Dataset:
    """Read a feature table with a class-index column or one-hot columns.

    Rows are numbered from 1 for the header in error messages.
    """
    if label_mode not in ("index", "onehot"):
        raise ValueError(f"unknown label_mode {label_mode!r}")
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"{path}: no such file")
    width = n_f + (1 if label_mode == "index" else n_c)
    feats, labels = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataFormatError(f"{path}: empty file", row=1)
        if len(header) != width:
            raise DataFormatError(
                f"{path}: header has {len(header)} fields, expected {width}", row=1)
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataFormatError(
                    f"{path}: row {rowno} has {len(row)} fields, expected {width}", row=rowno)
            try:
                vals = [float(v) for v in row[:n_f]]
            except ValueError:
                raise DataFormatError(f"{path}: row {rowno}: non-numeric feature", row=rowno)
            if not all(math.isfinite(v) for v in vals):
                raise DataFormatError(f"{path}: row {rowno}: non-finite feature", row=rowno)
            rest = row[n_f:]
            try:
                if label_mode == "index":
                    k = int(rest[0])
                    if not 0 <= k < n_c:
                        raise DataFormatError(
                            f"{path}: row {rowno}: class index {k} out of range [0, {n_c})",
                            row=rowno)
                    lab = [0.0] * n_c
                    lab[k] = 1.0
                else:
                    lab = [float(v) for v in rest]
                    if sorted(lab) != [0.0] * (n_c - 1) + [1.0]:
                        raise DataFormatError(f"{path}: row {rowno}: label is not one-hot",
                                              row=rowno)
            except ValueError as exc:
                if isinstance(exc, DataFormatError):
                    raise
                raise DataFormatError(f"{path}: row {rowno}: non-numeric label", row=rowno)
            feats.append(vals)
            labels.append(lab)
    if not feats:
        raise DataFormatError(f"{path}: no data rows")
    X = np.array(feats)
    if normalize:
        lo, hi = X.min(axis=0), X.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        X = (X - lo) / span
    return Dataset(X, np.array(labels), None,
                   {"loaded": {"path": str(path), "sha256": _sha256(path)}})


def split(ds: Dataset, train_count: int, val_count: int, seed: int):
    """Seeded disjoint train/validation split; returns ``(train, validation)``."""
    if train_count < 0 or val_count < 0 or train_count + val_count > len(ds):
        raise ValueError(
            f"cannot take {train_count} + {val_count} rows from a dataset of {len(ds)}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    tr = perm[:train_count]
    va = perm[train_count : train_count + val_count]
    return ds.subset(tr, f"train:{seed}"), ds.subset(va, f"validation:{seed}")
