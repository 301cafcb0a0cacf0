"""Tabular data containers, party partitioning and quantile binning."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

ACTIVE = "active"
PASSIVE = "passive"
PEER = "peer"


class DataError(ValueError):
    """Raised for malformed input data or invalid partition requests."""


@dataclass
class DataMatrix:
    """Feature columns with an optional binary label.

    ``X`` is stored row-major as ``(n_rows, n_features)`` float64.
    """

    feature_names: list[str]
    X: np.ndarray
    label: np.ndarray | None = None
    row_ids: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise DataError("X must be two-dimensional")
        n = self.X.shape[0]
        if self.X.shape[1] != len(self.feature_names):
            raise DataError(
                f"{self.X.shape[1]} columns but {len(self.feature_names)} feature names"
            )
        if len(set(self.feature_names)) != len(self.feature_names):
            raise DataError("duplicate feature names")
        if not np.all(np.isfinite(self.X)):
            r, c = np.argwhere(~np.isfinite(self.X))[0]
            raise DataError(
                f"non-finite value at row {r}, column {self.feature_names[c]}"
            )
        if self.row_ids is None:
            self.row_ids = np.arange(n, dtype=np.int64)
        self.row_ids = np.asarray(self.row_ids, dtype=np.int64)
        if len(self.row_ids) != n:
            raise DataError("row_ids length does not match n_rows")
        if len(np.unique(self.row_ids)) != n:
            raise DataError("row_ids must be unique")
        if self.label is not None:
            self.label = np.asarray(self.label, dtype=np.float64)
            if self.label.shape != (n,):
                raise DataError("label length does not match n_rows")
            if not np.all((self.label == 0) | (self.label == 1)):
                raise DataError("label values must be 0 or 1")

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.feature_names.index(name)]

    def select_columns(self, names: Sequence[str], keep_label: bool) -> DataMatrix:
        idx = [self.feature_names.index(n) for n in names]
        return DataMatrix(
            list(names),
            self.X[:, idx],
            self.label if keep_label else None,
            self.row_ids.copy(),
        )

    def select_rows(self, rows: slice | np.ndarray) -> DataMatrix:
        return DataMatrix(
            list(self.feature_names),
            self.X[rows],
            None if self.label is None else self.label[rows],
            self.row_ids[rows],
        )

    def equals(self, other: DataMatrix) -> bool:
        same_label = (self.label is None and other.label is None) or (
            self.label is not None
            and other.label is not None
            and np.array_equal(self.label, other.label)
        )
        return (
            self.feature_names == other.feature_names
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.row_ids, other.row_ids)
            and same_label
        )


@dataclass
class PartyShard:
    """The slice of a dataset held by one party."""

    party_id: int
    role: str
    data: DataMatrix
    # positions of this shard's columns in the original column order
    feature_indices: list[int] = field(default_factory=list)

    @property
    def owned_feature_names(self) -> list[str]:
        return list(self.data.feature_names)

    @property
    def has_label(self) -> bool:
        return self.data.label is not None


def load_csv(path: str | os.PathLike, label_column: str | None = None) -> DataMatrix:
    """Read a headered numeric CSV file into a :class:`DataMatrix`.

    Every cell must parse as a finite float. When *label_column* is given it
    is split off as the label and must hold only 0/1 values.
    """
    if not os.path.exists(path):
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = []
        for r, record in enumerate(reader):
            if not record:
                continue
            if len(record) != len(header):
                raise DataError(
                    f"row {r} has {len(record)} cells, header has {len(header)}"
                )
            values = []
            for c, cell in enumerate(record):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"non-numeric value {cell!r} at row {r}, column {header[c]}"
                    ) from None
                if not math.isfinite(v):
                    raise DataError(f"non-finite value at row {r}, column {header[c]}")
                values.append(v)
            rows.append(values)

    table = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header))
    label = None
    names = list(header)
    if label_column is not None:
        if label_column not in header:
            raise DataError(f"unknown label column {label_column!r}")
        li = header.index(label_column)
        label = table[:, li]
        if not np.all((label == 0) | (label == 1)):
            bad = int(np.argmax((label != 0) & (label != 1)))
            raise DataError(f"label value {label[bad]!r} at row {bad} is not 0 or 1")
        table = np.delete(table, li, axis=1)
        names.pop(li)
    return DataMatrix(names, table, label)


def save_csv(data: DataMatrix, path: str | os.PathLike, label_column: str = "label"):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = list(data.feature_names)
        if data.label is not None:
            header.append(label_column)
        writer.writerow(header)
        for i in range(data.n_rows):
            row = [repr(float(v)) for v in data.X[i]]
            if data.label is not None:
                row.append(str(int(data.label[i])))
            writer.writerow(row)


def split_vertical(
    data: DataMatrix,
    feature_assignment: Mapping[int, Sequence[str]],
    active_party: int,
) -> list[PartyShard]:
    """Give each party a column subset of *data*; only the active party keeps the label.

    Shards are returned in ascending party id. Within a shard, columns keep
    their original relative order.
    """
    if active_party not in feature_assignment:
        raise DataError(f"active party {active_party} has no feature assignment")
    if data.label is None:
        raise DataError("vertical split needs a labelled dataset")
    seen: dict[str, int] = {}
    for pid, names in feature_assignment.items():
        for name in names:
            if name not in data.feature_names:
                raise DataError(f"unknown feature {name!r} assigned to party {pid}")
            if name in seen:
                raise DataError(
                    f"feature {name!r} assigned to both party {seen[name]} and {pid}"
                )
            seen[name] = pid
    missing = [n for n in data.feature_names if n not in seen]
    if missing:
        raise DataError(f"features not assigned to any party: {missing}")

    shards = []
    for pid in sorted(feature_assignment):
        owned = set(feature_assignment[pid])
        idx = [i for i, n in enumerate(data.feature_names) if n in owned]
        names = [data.feature_names[i] for i in idx]
        is_active = pid == active_party
        shards.append(
            PartyShard(
                pid,
                ACTIVE if is_active else PASSIVE,
                data.select_columns(names, keep_label=is_active),
                idx,
            )
        )
    return shards


def split_horizontal(data: DataMatrix, n_parties: int) -> list[PartyShard]:
    """Contiguous row blocks of ``n_rows // n_parties``; leftover rows go to the last block."""
    if n_parties < 2:
        raise DataError("horizontal split needs at least 2 parties")
    if n_parties > data.n_rows:
        raise DataError(f"cannot split {data.n_rows} rows across {n_parties} parties")
    size = data.n_rows // n_parties
    shards = []
    all_idx = list(range(data.n_features))
    for pid in range(n_parties):
        stop = data.n_rows if pid == n_parties - 1 else (pid + 1) * size
        shards.append(PartyShard(pid, PEER, data.select_rows(slice(pid * size, stop)), all_idx))
    return shards


def join_vertical(shards: Sequence[PartyShard]) -> DataMatrix:
    """Reassemble column shards into the original column order."""
    cols: dict[int, tuple[str, np.ndarray]] = {}
    label = None
    for s in shards:
        if not np.array_equal(s.data.row_ids, shards[0].data.row_ids):
            raise DataError("vertical shards must share identical row ids")
        for j, gi in enumerate(s.feature_indices):
            cols[gi] = (s.data.feature_names[j], s.data.X[:, j])
        if s.data.label is not None:
            label = s.data.label
    order = sorted(cols)
    return DataMatrix(
        [cols[i][0] for i in order],
        np.column_stack([cols[i][1] for i in order]),
        label,
        shards[0].data.row_ids.copy(),
    )


def join_horizontal(shards: Sequence[PartyShard]) -> DataMatrix:
    first = shards[0].data
    return DataMatrix(
        list(first.feature_names),
        np.vstack([s.data.X for s in shards]),
        None if first.label is None else np.concatenate([s.data.label for s in shards]),
        np.concatenate([s.data.row_ids for s in shards]),
    )


def compute_cuts(values: np.ndarray, max_bin: int) -> np.ndarray:
    """Exact quantile thresholds for one feature column.

    Candidates are midpoints between consecutive distinct values. For each
    target quantile ``i / max_bin`` the candidate whose cumulative row fraction
    is nearest (lower candidate on ties) is selected.
    """
    if max_bin < 2:
        raise DataError("max_bin must be >= 2")
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DataError("cannot compute cuts of an empty column")
    uniq, counts = np.unique(values, return_counts=True)
    if uniq.size < 2:
        return np.empty(0, dtype=np.float64)
    mids = uniq[:-1] + (uniq[1:] - uniq[:-1]) / 2.0
    frac = np.cumsum(counts)[:-1] / values.size
    targets = np.arange(1, max_bin) / max_bin
    hi = np.clip(np.searchsorted(frac, targets, side="left"), 0, frac.size - 1)
    lo = np.clip(hi - 1, 0, frac.size - 1)
    pick = np.where(np.abs(frac[lo] - targets) <= np.abs(frac[hi] - targets), lo, hi)
    return np.unique(mids[pick])


def merge_cut_candidates(local_cut_lists: Sequence[np.ndarray], max_bin: int) -> np.ndarray:
    """Union of per-party cuts for one feature, evenly thinned to ``max_bin - 1``."""
    merged = np.unique(np.concatenate([np.asarray(c, dtype=np.float64) for c in local_cut_lists]))
    cap = max_bin - 1
    if merged.size <= cap:
        return merged
    keep = (np.arange(cap) * merged.size) // cap
    return merged[keep]


def bin_column(values: np.ndarray, cuts: np.ndarray) -> np.ndarray:
    """Bin index of each value: the number of thresholds ``<= value``."""
    return np.searchsorted(np.asarray(cuts, dtype=np.float64), values, side="right").astype(np.int32)


def make_synthetic(
    n_rows: int = 500,
    n_features: int = 8,
    seed: int = 0,
    positive_rate: float = 0.2,
    noise: float = 0.5,
    integer_features: int = 0,
) -> DataMatrix:
    """Seeded binary-classification table with a nonlinear decision boundary.

    The label is the top ``positive_rate`` fraction of a noisy score built
    from a few linear terms and one pairwise interaction. The first
    ``integer_features`` columns are rounded so they carry repeated values.
    """
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n_rows, n_features))
    X[:, :integer_features] = np.round(X[:, :integer_features] * 2.0)
    w = rng.normal(size=n_features) * (rng.random(n_features) < 0.6)
    score = X @ w
    if n_features >= 2:
        score = score + 1.5 * X[:, 0] * X[:, 1]
    score = score + noise * rng.normal(size=n_rows)
    threshold = np.quantile(score, 1.0 - positive_rate)
    label = (score > threshold).astype(np.float64)
    names = [f"f{i}" for i in range(n_features)]
    return DataMatrix(names, X, label)
