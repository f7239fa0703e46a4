"""Vertically partitioned datasets and the synthetic generators used by tests.

A dataset is a list of per-client feature tables keyed by sample id plus a
label table held by the label owner. Tables are immutable once built.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SampleId = int

CLASSIFICATION = "classification"
REGRESSION = "regression"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Task:
    kind: str = CLASSIFICATION
    n_classes: int = 2

    def __post_init__(self):
        if self.kind not in (CLASSIFICATION, REGRESSION):
            raise DatasetError(f"unknown task kind {self.kind!r}")
        if self.kind == CLASSIFICATION and self.n_classes < 2:
            raise DatasetError("classification needs at least 2 classes")

    @property
    def is_classification(self) -> bool:
        return self.kind == CLASSIFICATION

    @classmethod
    def regression(cls) -> "Task":
        return cls(REGRESSION, 0)


def _index_of(ids: np.ndarray) -> dict[int, int]:
    index = {int(s): i for i, s in enumerate(ids)}
    if len(index) != len(ids):
        raise DatasetError("duplicate sample ids")
    return index


@dataclass(frozen=True)
class ClientTable:
    """Features of one client; row ``i`` of ``features`` belongs to ``ids[i]``."""

    client_id: int
    ids: np.ndarray
    features: np.ndarray
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.uint64)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != ids.shape[0]:
            raise DatasetError(f"client {self.client_id}: features shape {feats.shape} "
                               f"does not match {ids.shape[0]} ids")
        if not np.all(np.isfinite(feats)):
            raise DatasetError(f"client {self.client_id}: non-finite feature values")
        ids.setflags(write=False)
        feats.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "_index", _index_of(ids))

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def id_set(self) -> set[int]:
        return set(self._index)

    def row(self, sample_id: SampleId) -> np.ndarray:
        return self.features[self._index[int(sample_id)]]

    def rows(self, sample_ids: Iterable[SampleId]) -> np.ndarray:
        try:
            idx = [self._index[int(s)] for s in sample_ids]
        except KeyError as exc:
            raise DatasetError(f"client {self.client_id} has no sample {exc.args[0]}") from None
        return self.features[idx]

    def restrict(self, sample_ids: Sequence[SampleId]) -> "ClientTable":
        return ClientTable(self.client_id, np.asarray(sample_ids, dtype=np.uint64),
                           self.rows(sample_ids))


@dataclass(frozen=True)
class LabelTable:
    ids: np.ndarray
    values: np.ndarray
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.uint64)
        values = np.asarray(self.values)
        if values.shape != ids.shape:
            raise DatasetError("label count does not match id count")
        ids.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_index", _index_of(ids))

    def __len__(self) -> int:
        return len(self.ids)

    def get(self, sample_ids: Iterable[SampleId]) -> np.ndarray:
        try:
            return self.values[[self._index[int(s)] for s in sample_ids]]
        except KeyError as exc:
            raise DatasetError(f"no label for sample {exc.args[0]}") from None

    def restrict(self, sample_ids: Sequence[SampleId]) -> "LabelTable":
        return LabelTable(np.asarray(sample_ids, dtype=np.uint64), self.get(sample_ids))


@dataclass(frozen=True)
class VerticalDataset:
    clients: tuple[ClientTable, ...]
    labels: LabelTable
    task: Task

    def __post_init__(self):
        object.__setattr__(self, "clients", tuple(self.clients))
        if not self.clients:
            raise DatasetError("dataset needs at least one client")

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    @property
    def dims(self) -> list[int]:
        return [c.dim for c in self.clients]

    @property
    def d(self) -> int:
        return sum(self.dims)

    def restrict(self, sample_ids: Sequence[SampleId]) -> "VerticalDataset":
        """Every table restricted to ``sample_ids``, rows in that order."""
        ids = list(sample_ids)
        return VerticalDataset(tuple(c.restrict(ids) for c in self.clients),
                               self.labels.restrict(ids), self.task)

    def concatenated(self, sample_ids: Sequence[SampleId]) -> np.ndarray:
        return np.hstack([c.rows(sample_ids) for c in self.clients])

    def dump_csv(self, path: str | Path) -> None:
        """Write a deterministic debug dump: one row per label-table id, ascending."""
        ids = sorted(int(s) for s in self.labels.ids)
        header = ["sample_id"]
        for c in self.clients:
            header += [f"c{c.client_id}_f{j}" for j in range(c.dim)]
        header.append("label")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            feats = self.concatenated(ids)
            labels = self.labels.get(ids)
            for sid, row, y in zip(ids, feats, labels):
                w.writerow([sid, *(repr(float(v)) for v in row), y.item()])


def load_csv_dataset(path: str | Path, label_column: str, task: Task) -> VerticalDataset:
    """Read a header-row CSV into a single-client dataset.

    Sample ids are the 0-based data-row numbers. Classification labels must
    already be integers in ``[0, n_classes)``.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header, body = rows[0], [r for r in rows[1:] if r]
    if label_column not in header:
        raise DatasetError(f"{path}: missing label column {label_column!r}")
    if not body:
        raise DatasetError(f"{path}: no data rows")
    label_at = header.index(label_column)
    feature_cols = [j for j in range(len(header)) if j != label_at]

    feats = np.empty((len(body), len(feature_cols)))
    labels = []
    for i, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise DatasetError(f"{path}: row {i} has {len(row)} cells, expected {len(header)}")
        for k, j in enumerate(feature_cols):
            try:
                feats[i - 1, k] = float(row[j])
            except ValueError:
                raise DatasetError(f"{path}: row {i}, column {header[j]!r}: "
                                   f"cannot parse {row[j]!r} as a number") from None
        labels.append(row[label_at])

    try:
        if task.is_classification:
            values = np.array([int(v) for v in labels], dtype=np.int64)
            if values.min() < 0 or values.max() >= task.n_classes:
                raise DatasetError(f"{path}: labels outside [0, {task.n_classes})")
        else:
            values = np.array([float(v) for v in labels])
    except ValueError as exc:
        raise DatasetError(f"{path}: bad label value ({exc})") from None

    ids = np.arange(len(body), dtype=np.uint64)
    return VerticalDataset((ClientTable(1, ids, feats),), LabelTable(ids, values), task)


def block_sizes(d: int, m: int) -> list[int]:
    """Contiguous block widths: the first ``d % m`` blocks get one extra column."""
    base, extra = divmod(d, m)
    return [base + 1 if i < extra else base for i in range(m)]


def vertical_partition(ds: VerticalDataset, m: int, seed: int | None = None) -> VerticalDataset:
    """Split a single-client dataset's columns into ``m`` contiguous blocks.

    ``seed`` is accepted for interface symmetry; the split itself is
    deterministic.
    """
    if ds.n_clients != 1:
        raise DatasetError("vertical_partition expects a single-client dataset")
    table = ds.clients[0]
    if m < 1:
        raise DatasetError("client count must be >= 1")
    if m > table.dim:
        raise DatasetError(f"cannot split {table.dim} features over {m} clients")
    clients, start = [], 0
    for k, width in enumerate(block_sizes(table.dim, m), start=1):
        clients.append(ClientTable(k, table.ids, table.features[:, start:start + width]))
        start += width
    return VerticalDataset(tuple(clients), ds.labels, ds.task)


def _distinct_ids(rng: np.random.Generator, count: int) -> np.ndarray:
    # 63-bit space keeps ids representable as signed ints on every platform.
    out = np.unique(rng.integers(0, 2**63 - 1, size=count, dtype=np.int64))
    while len(out) < count:
        more = rng.integers(0, 2**63 - 1, size=count - len(out), dtype=np.int64)
        out = np.unique(np.concatenate([out, more]))
    return rng.permutation(out)[:count]


def synthesize_sized_id_sets(sizes: Sequence[int], common: int, seed: int) -> list[list[int]]:
    """Id lists of the given sizes sharing exactly ``common`` ids, rest private."""
    if common < 0 or any(s < common for s in sizes):
        raise DatasetError("every set must be at least as large as the common part")
    rng = np.random.default_rng(seed)
    pool = _distinct_ids(rng, common + sum(s - common for s in sizes))
    shared = pool[:common]
    out, at = [], common
    for s in sizes:
        private = pool[at:at + s - common]
        at += s - common
        out.append([int(v) for v in rng.permutation(np.concatenate([shared, private]))])
    return out


def synthesize_id_sets(n_base: int, m: int, overlap: float, seed: int) -> list[list[int]]:
    """``m`` shuffled id lists of length ``n_base`` with ``ceil(overlap*n_base)`` in common."""
    if not 0 < overlap <= 1:
        raise DatasetError("overlap must lie in (0, 1]")
    common = math.ceil(overlap * n_base - 1e-9)
    if common < 1:
        raise DatasetError("overlap * n_base must be >= 1")
    return synthesize_sized_id_sets([n_base] * m, common, seed)


def _split_labels(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % n_classes
    return rng.permutation(labels)


def generate_blobs(n: int, d: int, m: int, n_classes: int, separation: float,
                   seed: int) -> VerticalDataset:
    """One unit-variance Gaussian blob per class, centers ``separation`` apart.

    Class centers are orthogonal directions scaled so every pair of centers is
    exactly ``separation`` apart (when ``n_classes <= d``).
    """
    if n < n_classes:
        raise DatasetError("need at least one sample per class")
    if d < m:
        raise DatasetError(f"cannot split {d} features over {m} clients")
    rng = np.random.default_rng(seed)
    if n_classes <= d:
        basis, _ = np.linalg.qr(rng.standard_normal((d, n_classes)))
        centers = basis.T * (separation / math.sqrt(2))
    else:
        centers = rng.standard_normal((n_classes, d)) * separation
    labels = _split_labels(n, n_classes, rng)
    x = centers[labels] + rng.standard_normal((n, d))
    ids = np.arange(n, dtype=np.uint64)
    single = VerticalDataset((ClientTable(1, ids, x),), LabelTable(ids, labels.astype(np.int64)),
                             Task(CLASSIFICATION, n_classes))
    return vertical_partition(single, m)


def generate_planted_clusters(n: int, m: int, dim_per_client: int, clusters: int,
                              n_classes: int, seed: int, spread: float = 10.0,
                              noise: float = 0.3) -> VerticalDataset:
    """Each client's features come from exactly ``clusters`` tight, far-apart groups.

    Cluster memberships are drawn independently per client; the label is a
    fixed random function of the full cluster tuple.
    """
    rng = np.random.default_rng(seed)
    ids = np.arange(n, dtype=np.uint64)
    memberships = rng.integers(0, clusters, size=(n, m))
    tables = []
    for k in range(m):
        centers = rng.standard_normal((clusters, dim_per_client)) * spread
        x = centers[memberships[:, k]] + noise * rng.standard_normal((n, dim_per_client))
        tables.append(ClientTable(k + 1, ids, x))
    label_of = rng.integers(0, n_classes, size=(clusters,) * m)
    labels = label_of[tuple(memberships.T)]
    # guarantee every class appears
    labels[:n_classes] = np.arange(n_classes)
    return VerticalDataset(tuple(tables), LabelTable(ids, labels.astype(np.int64)),
                           Task(CLASSIFICATION, n_classes))


def train_test_split(ids: Sequence[SampleId], test_fraction: float,
                     seed: int) -> tuple[list[int], list[int]]:
    """Shuffle and split ids; both parts are returned ascending."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    n_test = int(round(test_fraction * len(ids)))
    arr = np.asarray(ids, dtype=np.uint64)
    test = sorted(int(v) for v in arr[order[:n_test]])
    train = sorted(int(v) for v in arr[order[n_test:]])
    return train, test
