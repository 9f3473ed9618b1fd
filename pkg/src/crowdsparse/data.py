"""Datasets of features, expert votes and (optionally) true labels."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

ABSENT = -1


class DataError(ValueError):
    """Raised when input data violates a dataset invariant."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Units with features, a vote matrix with an availability mask, and optional truth.

    ``votes`` holds 0/1 where an expert labeled the unit and ``ABSENT`` (-1)
    elsewhere; ``available`` is the matching boolean mask.  Arrays are made
    read-only on construction.
    """

    features: np.ndarray
    votes: np.ndarray
    true_labels: Optional[np.ndarray] = None
    available: np.ndarray = field(init=False)

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64, ndmin=2)
        v = np.array(self.votes, dtype=np.int8, ndmin=2)
        if x.ndim != 2 or v.ndim != 2:
            raise DataError("features and votes must be 2-d")
        if x.shape[0] != v.shape[0]:
            raise DataError(
                f"dimension mismatch: {x.shape[0]} feature rows vs {v.shape[0]} vote rows")
        if x.shape[0] == 0:
            raise DataError("dataset has no units")
        if not np.all(np.isfinite(x)):
            raise DataError("features must be finite")
        bad = ~np.isin(v, (0, 1, ABSENT))
        if bad.any():
            i, r = np.argwhere(bad)[0]
            raise DataError(f"non-binary vote at unit {i}, expert {r}")
        avail = v != ABSENT
        empty = ~avail.any(axis=1)
        if empty.any():
            raise DataError(f"unit {int(np.argmax(empty))} has no available votes")
        z = None
        if self.true_labels is not None:
            z = np.array(self.true_labels, dtype=np.int8).ravel()
            if z.shape[0] != x.shape[0]:
                raise DataError(
                    f"dimension mismatch: {z.shape[0]} labels vs {x.shape[0]} units")
            if not np.isin(z, (0, 1)).all():
                raise DataError("true labels must be 0 or 1")
            z = _frozen(z)
        object.__setattr__(self, "features", _frozen(x))
        object.__setattr__(self, "votes", _frozen(v))
        object.__setattr__(self, "available", _frozen(avail))
        object.__setattr__(self, "true_labels", z)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.votes.shape[1]

    @property
    def k(self) -> int:
        return self.features.shape[1]

    @property
    def has_labels(self) -> bool:
        return self.true_labels is not None

    def subset(self, rows: Sequence[int]) -> "Dataset":
        rows = np.asarray(rows, dtype=np.intp)
        z = None if self.true_labels is None else self.true_labels[rows]
        return Dataset(self.features[rows], self.votes[rows], z)

    def with_features(self, features: np.ndarray) -> "Dataset":
        return Dataset(features, self.votes, self.true_labels)

    def with_votes(self, votes: np.ndarray) -> "Dataset":
        return Dataset(self.features, votes, self.true_labels)


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.3
    seed: int = 0
    stratify: bool = False

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise DataError("test_fraction must lie in (0, 1)")
        if self.seed < 0:
            raise DataError("seed must be non-negative")


@dataclass(frozen=True)
class StandardizationRecord:
    """Per-column location and scale used to map raw features to z-scores."""

    mean: np.ndarray
    scale: np.ndarray

    def transform(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.mean) / self.scale

    def inverse(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) * self.scale + self.mean


# -- CSV ingestion -----------------------------------------------------------


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def _read_rows(path) -> list[list[str]]:
    with open(path, newline="") as fh:
        rows = [[c.strip() for c in row] for row in csv.reader(fh)]
    return [r for r in rows if any(r)]


def _drop_header(rows: list[list[str]], numeric_ok=("",)) -> list[list[str]]:
    # a header is a first row holding any cell that is neither numeric nor allowed
    if rows and any(c not in numeric_ok and not _is_number(c) for c in rows[0]):
        return rows[1:]
    return rows


def _parse_features(path) -> np.ndarray:
    rows = _drop_header(_read_rows(path), numeric_ok=())
    if not rows:
        raise DataError(f"{path}: no feature rows")
    width = len(rows[0])
    out = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        if len(row) != width:
            raise DataError(f"{path}: row {i + 1} has {len(row)} cells, expected {width}")
        for j, cell in enumerate(row):
            try:
                out[i, j] = float(cell)
            except ValueError:
                raise DataError(f"{path}: non-numeric feature cell {cell!r} at row {i + 1}") from None
    return out


def _parse_votes(path) -> np.ndarray:
    # read raw: an empty line is a unit with no votes, reported by Dataset
    with open(path, newline="") as fh:
        rows = [[c.strip() for c in row] for row in csv.reader(fh)]
    while rows and not rows[-1]:
        rows.pop()
    rows = _drop_header(rows)
    if not rows:
        raise DataError(f"{path}: no vote rows")
    width = len(rows[0])
    out = np.full((len(rows), width), ABSENT, dtype=np.int8)
    for i, row in enumerate(rows):
        if any(row[width:]):
            raise DataError(f"{path}: row {i + 1} has more than {width} vote cells")
        for r, cell in enumerate(row[:width]):
            if cell == "":
                continue
            if cell not in ("0", "1"):
                raise DataError(f"{path}: non-binary vote {cell!r} at row {i + 1}")
            out[i, r] = int(cell)
    return out


def _parse_labels(path) -> np.ndarray:
    rows = _drop_header(_read_rows(path), numeric_ok=())
    out = []
    for i, row in enumerate(rows):
        if len(row) != 1 or row[0] not in ("0", "1"):
            raise DataError(f"{path}: label row {i + 1} must be a single 0 or 1")
        out.append(int(row[0]))
    return np.array(out, dtype=np.int8)


def load_csv(features_path, votes_path, labels_path=None) -> Dataset:
    """Read a dataset from CSV files with one row per unit.

    Vote cells are ``0``, ``1`` or empty (the expert did not label the unit).
    A first row containing non-numeric cells is treated as a header.
    """
    x = _parse_features(features_path)
    v = _parse_votes(votes_path)
    z = None if labels_path is None else _parse_labels(labels_path)
    return Dataset(x, v, z)


def load_features_csv(path) -> np.ndarray:
    return _parse_features(path)


def load_votes_csv(path) -> np.ndarray:
    """Vote matrix with ``ABSENT`` cells; unlike a Dataset, all-absent rows are allowed."""
    return _parse_votes(path)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_csv(ds: Dataset, out_dir, prefix: str = "") -> dict[str, Path]:
    """Write ``features.csv``, ``votes.csv`` and (if present) ``labels.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"features": out_dir / f"{prefix}features.csv",
             "votes": out_dir / f"{prefix}votes.csv"}
    with open(paths["features"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j + 1}" for j in range(ds.k)])
        for row in ds.features:
            w.writerow([_fmt(c) for c in row])
    with open(paths["votes"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"expert{r + 1}" for r in range(ds.d)])
        for row in ds.votes:
            w.writerow(["" if c == ABSENT else str(int(c)) for c in row])
    if ds.true_labels is not None:
        paths["labels"] = out_dir / f"{prefix}labels.csv"
        with open(paths["labels"], "w", newline="") as fh:
            fh.write("label\n")
            fh.writelines(f"{int(z)}\n" for z in ds.true_labels)
    return paths


# -- splitting and scaling -------------------------------------------------------


def _test_count(n: int, fraction: float) -> int:
    if n < 2:
        raise DataError("cannot split fewer than 2 units")
    return int(min(max(round(fraction * n), 1), n - 1))


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Partition units into (train, test); deterministic given ``spec.seed``.

    Each part keeps at least one unit.  With ``stratify`` the test part draws
    from each majority-vote class in proportion to its size.
    """
    n_test = _test_count(ds.n, spec.test_fraction)
    rng = np.random.default_rng(spec.seed)
    if spec.stratify:
        from .baselines import majority_vote

        labels = majority_vote(ds).labels
        test = []
        for c in (0, 1):
            idx = np.flatnonzero(labels == c)
            take = int(round(len(idx) * n_test / ds.n))
            test.extend(rng.permutation(idx)[:take])
        test = np.array(sorted(test), dtype=np.intp)
        if len(test) == 0:
            test = np.sort(rng.permutation(ds.n)[:1])
        elif len(test) == ds.n:
            test = test[1:]
    else:
        test = np.sort(rng.permutation(ds.n)[:n_test])
    mask = np.zeros(ds.n, dtype=bool)
    mask[test] = True
    return ds.subset(np.flatnonzero(~mask)), ds.subset(np.flatnonzero(mask))


def kfold_indices(n: int, folds: int, seed: int) -> list[np.ndarray]:
    if folds < 2 or folds > n:
        raise DataError(f"folds must lie in [2, {n}], got {folds}")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds)]


def standardize(ds: Dataset) -> tuple[Dataset, StandardizationRecord]:
    """Center each feature column and scale it to unit sample standard deviation."""
    if ds.n < 2:
        raise DataError("standardization needs at least 2 units")
    mean = ds.features.mean(axis=0)
    scale = ds.features.std(axis=0, ddof=1)
    const = np.flatnonzero(scale == 0)
    if const.size:
        raise DataError(f"feature column {int(const[0])} is constant")
    rec = StandardizationRecord(mean, scale)
    return ds.with_features(rec.transform(ds.features)), rec
