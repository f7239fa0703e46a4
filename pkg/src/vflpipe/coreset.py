"""Cluster-based coreset construction over aligned, vertically split samples.

Flow: every client runs K-Means on its own features and ranks each cluster's
members by distance to the centroid (closest gets weight 1). Clients seal a
fixed-width record (weight, cluster index, distance) per sample and send it
through the aggregation server, which regroups the records by sample
position for the label owner. The label owner keys samples by their tuple of
cluster indices, splits each group by label, keeps the member with the least
summed distance, and broadcasts the chosen ids back through the server.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import crypto
from .core import LabelTable, Task, VerticalDataset
from .federation import Federation
from .transport import AGGREGATOR, LABEL_OWNER, CommStats, Kind, PartyId
from .wire import pack_ids, pack_sections, unpack_ids, unpack_sections, unpack_u32, pack_u32

DEFAULT_MAX_ITER = 100
DEFAULT_TOL = 1e-4
DEFAULT_REGRESSION_BINS = 10


class CoresetError(ValueError):
    pass


# -- K-Means ------------------------------------------------------------------

@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    distances: np.ndarray
    inertia_history: list
    n_iter: int

    @property
    def inertia(self) -> float:
        return float(np.sum(self.distances ** 2))


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (x ** 2).sum(1)[:, None] - 2 * x @ centroids.T + (centroids ** 2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(x: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    closest = ((x - x[chosen[0]]) ** 2).sum(1)
    for _ in range(1, c):
        total = closest.sum()
        if total <= 0:
            # Fewer distinct points than clusters: any unused row will do.
            unused = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(unused))
        else:
            nxt = int(rng.choice(n, p=closest / total))
        chosen.append(nxt)
        closest = np.minimum(closest, ((x - x[nxt]) ** 2).sum(1))
    return x[chosen].copy()


def kmeans(x: np.ndarray, c: int, seed: int | np.random.SeedSequence,
           max_iter: int = DEFAULT_MAX_ITER, tol: float = DEFAULT_TOL) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds.

    Stops after ``max_iter`` updates or once no centroid moves by ``tol`` or
    more. Returned distances are measured against the returned centroids.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if c < 1:
        raise CoresetError("need at least one cluster")
    if c > n:
        raise CoresetError(f"cannot form {c} clusters from {n} samples")
    rng = np.random.default_rng(seed)
    centroids = kmeans_plusplus(x, c, rng)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        sq = _sq_dists(x, centroids)
        labels = sq.argmin(1)
        history.append(float(((x - centroids[labels]) ** 2).sum()))
        new = centroids.copy()
        counts = np.bincount(labels, minlength=c)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        for k in np.flatnonzero(~filled):
            # Re-seed an empty cluster at the worst-served point.
            far = int(((x - new[labels]) ** 2).sum(1).argmax())
            new[k] = x[far]
            labels[far] = k
        shift = np.sqrt(((new - centroids) ** 2).sum(1)).max()
        centroids = new
        if shift < tol:
            break
    labels = _sq_dists(x, centroids).argmin(1)
    distances = np.linalg.norm(x - centroids[labels], axis=1)
    history.append(float((distances ** 2).sum()))
    return KMeansResult(centroids, labels, distances, history, n_iter)


# -- local clustering and weights --------------------------------------------

@dataclass
class LocalClustering:
    client: PartyId
    ids: np.ndarray
    assignments: np.ndarray
    centroids: np.ndarray
    distances: np.ndarray
    inertia_history: list = field(default_factory=list)


@dataclass
class LocalWeighting:
    client: PartyId
    ids: np.ndarray
    weights: np.ndarray


def local_clustering(client: PartyId, ids: Sequence[int], features: np.ndarray, c: int,
                     seed, max_iter: int = DEFAULT_MAX_ITER, tol: float = DEFAULT_TOL) -> LocalClustering:
    km = kmeans(features, c, seed, max_iter, tol)
    return LocalClustering(client, np.asarray(ids, dtype=np.uint64), km.labels, km.centroids,
                           km.distances, km.inertia_history)


def compute_local_weights(lc: LocalClustering) -> LocalWeighting:
    """Rank weights ``pos / |cluster|`` with members sorted by distance, farthest first.

    Equal distances are ordered by ascending sample id.
    """
    weights = np.empty(len(lc.ids))
    for k in np.unique(lc.assignments):
        members = np.flatnonzero(lc.assignments == k)
        # lexsort: last key is primary -> distance descending, then id ascending
        order = members[np.lexsort((lc.ids[members], -lc.distances[members]))]
        weights[order] = np.arange(1, len(members) + 1) / len(members)
    return LocalWeighting(lc.client, lc.ids, weights)


# -- cluster tuples at the label owner ---------------------------------------

_RECORD = struct.Struct("<dId")  # weight, cluster index, distance
_TAG = struct.Struct("<I")


@dataclass
class ClusterRecord:
    sample_id: int
    ct: tuple
    distances: np.ndarray
    weights: np.ndarray

    @property
    def total_distance(self) -> float:
        return float(self.distances.sum())


def _client_message(fed: Federation, lc: LocalClustering, lw: LocalWeighting) -> bytes:
    records = [_RECORD.pack(float(w), int(k), float(d))
               for w, k, d in zip(lw.weights, lc.assignments, lc.distances)]
    tags = [_TAG.pack(i) for i in range(len(records))]
    header, sealed = crypto.seal_records(records, tags, fed.public_key())
    return pack_sections(header, pack_u32(len(sealed)) + b"".join(sealed))


_SEALED_RECORD = _RECORD.size + 16


def send_cluster_messages(fed: Federation, session: int, clusterings: Sequence[LocalClustering],
                          weightings: Sequence[LocalWeighting]) -> None:
    for lc, lw in zip(clusterings, weightings):
        fed.clients[lc.client].send(AGGREGATOR, session, Kind.CT_MESSAGE, _client_message(fed, lc, lw))


def aggregate_cluster_messages(fed: Federation, session: int, m: int) -> None:
    """Aggregation server: concatenate the sealed records of each sample.

    The forwarded batch carries the client headers, each client's record
    count, then for each sample position its M sealed records in client
    order (zero-filled where a client sent nothing for that position).
    """
    by_client = {}
    for _ in range(m):
        env = fed.aggregator.expect(session, Kind.CT_MESSAGE)
        by_client[env.src] = env.payload
    headers, columns = [], []
    for party in sorted(by_client):
        header, body = unpack_sections(by_client[party])
        count, at = unpack_u32(body)
        headers.append(header)
        columns.append([body[at + i * _SEALED_RECORD: at + (i + 1) * _SEALED_RECORD] for i in range(count)])
    n = max((len(col) for col in columns), default=0)
    blank = bytes(_SEALED_RECORD)
    rows = b"".join(col[pos] if pos < len(col) else blank for pos in range(n) for col in columns)
    counts = b"".join(pack_u32(len(col)) for col in columns)
    fed.aggregator.send(LABEL_OWNER, session, Kind.CT_BATCH,
                        pack_sections(b"".join(headers), counts, pack_u32(n) + rows))


def build_cluster_tuples(fed: Federation, session: int, aligned_ids: Sequence[int],
                         m: int) -> list[ClusterRecord]:
    """Label owner: open the regrouped batch and assemble one record per sample."""
    env = fed.label_owner.expect(session, Kind.CT_BATCH, AGGREGATOR)
    header_blob, count_blob, body = unpack_sections(env.payload)
    hsize = crypto.BATCH_HEADER_BYTES
    if len(header_blob) != m * hsize:
        raise CoresetError(f"expected records from {m} clients, got {len(header_blob) // hsize}")
    counts = [unpack_u32(count_blob, 4 * j)[0] for j in range(m)]
    for j, count in enumerate(counts):
        if count < len(aligned_ids):
            raise CoresetError(f"sample {aligned_ids[count]}: no record from client {j + 1}")
    n, at = unpack_u32(body)
    if n != len(aligned_ids) or len(body) != at + n * m * _SEALED_RECORD:
        raise CoresetError(f"got records for {n} samples, expected {len(aligned_ids)}")
    keys = fed.keys[LABEL_OWNER]
    table = np.empty((n, m, 3))
    for j in range(m):
        sealed = [(pos, _TAG.pack(pos), body[at + (pos * m + j) * _SEALED_RECORD:
                                             at + (pos * m + j + 1) * _SEALED_RECORD])
                  for pos in range(n)]
        try:
            plain = crypto.open_records(header_blob[j * hsize:(j + 1) * hsize], sealed, keys)
        except crypto.CryptoError as exc:
            raise CoresetError(f"client {j + 1}: {exc}") from None
        table[:, j] = [_RECORD.unpack(raw) for raw in plain]
    return [ClusterRecord(int(sid), tuple(int(k) for k in table[pos, :, 1]),
                          table[pos, :, 2].copy(), table[pos, :, 0].copy())
            for pos, sid in enumerate(aligned_ids)]


# -- selection ----------------------------------------------------------------

def label_keys(values: np.ndarray, task: Task, bins: int = DEFAULT_REGRESSION_BINS) -> np.ndarray:
    """Class labels as-is; regression targets mapped to quantile bins."""
    if task.is_classification:
        return np.asarray(values, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    edges = np.quantile(values, np.linspace(0, 1, bins + 1)[1:-1])
    return np.searchsorted(edges, values, side="right")


def select_representatives(records: Sequence[ClusterRecord], labels: LabelTable, task: Task,
                           bins: int = DEFAULT_REGRESSION_BINS) -> list[int]:
    """One sample per (cluster tuple, label) cell: the least total distance,
    ties to the smaller id. Returned ascending."""
    if not records:
        raise CoresetError("no aligned samples to select from")
    keys = label_keys(labels.get([r.sample_id for r in records]), task, bins)
    best: dict[tuple, ClusterRecord] = {}
    for rec, y in zip(records, keys):
        cell = (rec.ct, int(y))
        cur = best.get(cell)
        if cur is None or (rec.total_distance, rec.sample_id) < (cur.total_distance, cur.sample_id):
            best[cell] = rec
    return sorted(r.sample_id for r in best.values())


@dataclass
class CoresetSelection:
    ids: list
    weights: dict

    def weight_array(self, ids: Sequence[int] | None = None) -> np.ndarray:
        return np.array([self.weights[int(i)] for i in (self.ids if ids is None else ids)])

    def dump_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "global_weight"])
            for sid in self.ids:
                w.writerow([sid, repr(float(self.weights[sid]))])

    @classmethod
    def load_csv(cls, path: str | Path) -> "CoresetSelection":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        ids = [int(r["sample_id"]) for r in rows]
        return cls(ids, {int(r["sample_id"]): float(r["global_weight"]) for r in rows})


def assemble_coreset(selected: Sequence[int], records: Sequence[ClusterRecord]) -> CoresetSelection:
    """Global weight of a chosen sample is the sum of its per-client weights."""
    by_id = {r.sample_id: r for r in records}
    ids = sorted(int(i) for i in selected)
    return CoresetSelection(ids, {i: float(by_id[i].weights.sum()) for i in ids})


def broadcast_selection(fed: Federation, session: int, selection: CoresetSelection) -> dict:
    """Label owner seals the chosen ids; the aggregation server forwards them."""
    sealed = crypto.envelope_seal(pack_ids(selection.ids), fed.public_key())
    fed.label_owner.send(AGGREGATOR, session, Kind.CORESET_IDS, sealed.to_bytes())
    blob = fed.aggregator.expect(session, Kind.CORESET_IDS, LABEL_OWNER).payload
    for party in fed.client_ids:
        fed.aggregator.send(party, session, Kind.CORESET_IDS, blob)
    received = {}
    for party in fed.client_ids:
        env = fed.clients[party].expect(session, Kind.CORESET_IDS, AGGREGATOR)
        plain = crypto.envelope_open(crypto.SealedEnvelope.from_bytes(env.payload), fed.keys[party])
        received[party] = unpack_ids(plain)[0]
    return received


# -- full construction --------------------------------------------------------

@dataclass
class CoresetOutcome:
    selection: CoresetSelection
    records: list
    clusterings: list
    weightings: list
    stats: CommStats
    n_align: int
    c: int

    @property
    def distinct_ct(self) -> int:
        return len({r.ct for r in self.records})

    def report(self) -> dict:
        size = len(self.selection.ids)
        return {
            "N_align": self.n_align,
            "c": self.c,
            "distinct_ct": self.distinct_ct,
            "coreset_size": size,
            # fraction of aligned samples removed
            "compression_ratio": 1 - size / self.n_align if self.n_align else 0.0,
        }

    def report_json(self) -> str:
        return json.dumps(self.report(), sort_keys=True)


def build_coreset(fed: Federation, data: VerticalDataset, aligned_ids: Sequence[int], c: int,
                  seed: int, bins: int = DEFAULT_REGRESSION_BINS, max_iter: int = DEFAULT_MAX_ITER,
                  tol: float = DEFAULT_TOL) -> CoresetOutcome:
    """Run the whole construction over the federation's bus.

    ``data.clients[k-1]`` is client ``k``'s table; labels belong to the label
    owner. ``aligned_ids`` is the agreed (ascending) alignment result.
    """
    aligned = [int(i) for i in aligned_ids]
    if not aligned:
        raise CoresetError("no aligned samples to build a coreset from")
    fed.distribute_keys()
    before = fed.bus.snapshot_stats()
    seeds = np.random.SeedSequence(seed).spawn(data.n_clients)
    clusterings, weightings = [], []
    for table, ss in zip(data.clients, seeds):
        party = PartyId.client(table.client_id)
        lc = local_clustering(party, aligned, table.rows(aligned), c, ss, max_iter, tol)
        clusterings.append(lc)
        weightings.append(compute_local_weights(lc))

    session = fed.bus.open_session()
    send_cluster_messages(fed, session, clusterings, weightings)
    aggregate_cluster_messages(fed, session, data.n_clients)
    records = build_cluster_tuples(fed, session, aligned, data.n_clients)
    chosen = select_representatives(records, data.labels, data.task, bins)
    selection = assemble_coreset(chosen, records)
    received = broadcast_selection(fed, session, selection)
    fed.bus.close_session(session)
    for party, ids in received.items():
        if ids != selection.ids:
            raise CoresetError(f"{party} decrypted a different coreset id list")
    return CoresetOutcome(selection, records, clusterings, weightings,
                          fed.bus.snapshot_stats() - before, len(aligned), c)
