"""Experiment runner and command-line entry point.

A run is alignment, then an optional coreset, then training, all on one bus
so per-phase byte ledgers add up to the run total. Records are appended as
JSON lines; ``report`` turns a pile of them into a comparison table.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import core
from .core import Task, VerticalDataset
from .coreset import CoresetSelection, build_coreset
from .federation import Federation
from .mpsi import Policy, Topology, run_mpsi
from .tpsi import TpsiConfig, TpsiProtocol
from .train import ModelKind, TrainConfig, knn_predict, metric_name, score, train_until_converged
from .transport import CommStats

PHASES = ("psi", "coreset", "train")
KNN = "knn"


# -- specs and records --------------------------------------------------------

@dataclass
class DatasetSpec:
    kind: str = "blobs"  # blobs | planted | csv
    n: int = 10_000
    d: int = 12
    n_classes: int = 2
    separation: float = 4.0
    clusters: int = 4
    csv_path: str | None = None
    label_column: str = "label"
    task: str = core.CLASSIFICATION

    @property
    def name(self) -> str:
        if self.kind == "csv":
            return Path(self.csv_path or "").stem
        return f"{self.kind}-n{self.n}"

    def load(self, m: int, seed: int) -> VerticalDataset:
        if self.kind == "blobs":
            return core.generate_blobs(self.n, self.d, m, self.n_classes, self.separation, seed)
        if self.kind == "planted":
            per = max(1, self.d // m)
            return core.generate_planted_clusters(self.n, m, per, self.clusters, self.n_classes, seed)
        if self.kind == "csv":
            if not self.csv_path:
                raise ValueError("csv dataset needs a path")
            task = Task.regression() if self.task == core.REGRESSION else Task(core.CLASSIFICATION, self.n_classes)
            return core.vertical_partition(core.load_csv_dataset(self.csv_path, self.label_column, task), m)
        raise ValueError(f"unknown dataset kind {self.kind!r}")


@dataclass
class ExperimentSpec:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    m: int = 3
    topology: str = Topology.TREE.value
    policy: str = Policy.VOLUME_AWARE.value
    protocol: str = TpsiProtocol.OPRF.value
    use_coreset: bool = True
    c: int = 8
    model: str = ModelKind.LR.value
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    rsa_bits: int = 2048
    test_fraction: float = 0.3
    psi_extra: float = 0.1  # per-client share of ids that are not shared
    knn_k: int = 5

    def __post_init__(self):
        Topology(self.topology), Policy(self.policy), TpsiProtocol(self.protocol)
        if self.model != KNN:
            ModelKind(self.model)
        if self.m < 2:
            raise ValueError("need at least two clients")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test fraction must lie in (0, 1)")

    @property
    def label(self) -> str:
        return self.topology.capitalize() + ("CSS" if self.use_coreset else "ALL")

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["train"]["lr_grid"] = list(self.train.lr_grid)
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentSpec":
        obj = dict(obj)
        obj["dataset"] = DatasetSpec(**obj["dataset"])
        tr = dict(obj["train"])
        tr["lr_grid"] = tuple(tr["lr_grid"])
        obj["train"] = TrainConfig(**tr)
        return cls(**obj)


@dataclass
class RunRecord:
    spec: dict
    label: str
    dataset: str
    align_size: int | None = None
    coreset_size: int | None = None
    train_data: int | None = None
    phases: dict = field(default_factory=dict)  # phase -> CommStats json
    report: dict | None = None
    bus_bytes: int = 0  # everything the run put on the bus
    wall_s: dict = field(default_factory=dict)
    error: dict | None = None

    def phase_bytes(self, phase: str) -> int:
        return CommStats.from_json(self.phases[phase]).total_bytes if phase in self.phases else 0

    @property
    def total_bytes(self) -> int:
        return sum(self.phase_bytes(p) for p in self.phases)

    @property
    def metric(self) -> float | None:
        return None if self.report is None else self.report.get("test_metric")

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def from_json(cls, obj: dict) -> "RunRecord":
        return cls(**obj)

    def without_timing(self) -> dict:
        """Everything except wall-clock fields, for determinism checks."""
        obj = json.loads(self.dumps())
        obj.pop("wall_s")
        for ph in obj["phases"].values():
            ph.pop("wall_ns")
        if obj["report"]:
            obj["report"].pop("wall_s", None)
        return obj


# -- running --------------------------------------------------------------------

def client_id_sets(data: VerticalDataset, extra: float, seed: int) -> list[list[int]]:
    """Each client's ids: the dataset ids plus a private tail of ids nobody else holds."""
    rng = np.random.default_rng([seed, 7])
    base = [int(i) for i in data.labels.ids]
    n_extra = int(round(extra * len(base)))
    taken = set(base)
    sets = []
    for _ in range(data.n_clients):
        tail = []
        while len(tail) < n_extra:
            v = int(rng.integers(1 << 40, 1 << 62))
            if v not in taken:
                taken.add(v)
                tail.append(v)
        ids = base + tail
        sets.append([ids[i] for i in rng.permutation(len(ids))])
    return sets


def _knn_report(fed: Federation, data: VerticalDataset, refs: Sequence[int], weights,
                test_ids: Sequence[int], k: int) -> dict:
    t0 = time.perf_counter()
    preds = knn_predict(fed, data, test_ids, refs, min(k, len(refs)), weights)
    metric = score(data.task, preds, data.labels.get(test_ids))
    return {"model": KNN, "metric": metric_name(data.task), "test_metric": metric,
            "epochs": 0, "samples_used": len(refs), "samples_processed": len(refs) * len(test_ids),
            "wall_s": time.perf_counter() - t0, "loss_curve": []}


def run_experiment(spec: ExperimentSpec, out: str | Path | None = None) -> RunRecord:
    """Align, optionally build a coreset, train; phase failures land in ``error``."""
    record = RunRecord(spec.to_json(), spec.label, spec.dataset.name)
    fed = Federation.create(spec.m)
    phase = "load"
    try:
        data = spec.dataset.load(spec.m, spec.seed)

        phase = "psi"
        t0 = time.perf_counter()
        sets = client_id_sets(data, spec.psi_extra, spec.seed)
        before = fed.bus.snapshot_stats()
        outcome = run_mpsi(spec.topology, spec.policy, spec.protocol, sets, fed,
                           TpsiConfig(rsa_bits=spec.rsa_bits))
        aligned = list(outcome.result.ids)
        record.align_size = len(aligned)
        # includes key distribution, which precedes the alignment proper
        record.phases["psi"] = (fed.bus.snapshot_stats() - before).to_json()
        record.wall_s["psi"] = time.perf_counter() - t0

        train_ids, test_ids = core.train_test_split(aligned, spec.test_fraction, spec.seed)
        weights = None
        if spec.use_coreset:
            phase = "coreset"
            t0 = time.perf_counter()
            co = build_coreset(fed, data, train_ids, spec.c, spec.seed)
            train_ids, weights = co.selection.ids, co.selection.weights
            record.coreset_size = len(train_ids)
            record.phases["coreset"] = co.stats.to_json()
            record.wall_s["coreset"] = time.perf_counter() - t0

        phase = "train"
        t0 = time.perf_counter()
        before = fed.bus.snapshot_stats()
        record.train_data = len(train_ids)
        if spec.model == KNN:
            record.report = _knn_report(fed, data, train_ids, weights, test_ids, spec.knn_k)
        else:
            _, rep = train_until_converged(fed, spec.model, data, train_ids, spec.train, spec.seed,
                                           weights=weights, test_ids=test_ids)
            record.report = rep.to_json()
        record.phases["train"] = (fed.bus.snapshot_stats() - before).to_json()
        record.wall_s["train"] = time.perf_counter() - t0
    except Exception as exc:  # recorded, not swallowed silently
        record.error = {"phase": phase, "message": f"{type(exc).__name__}: {exc}",
                        "trace": traceback.format_exc(limit=5)}
    record.bus_bytes = fed.bus.snapshot_stats().total_bytes
    if out is not None:
        append_records(out, [record])
    return record


def append_records(path: str | Path, records: Iterable[RunRecord]) -> None:
    with open(path, "a") as fh:
        for r in records:
            fh.write(r.dumps() + "\n")


def load_records(path: str | Path) -> list[RunRecord]:
    with open(path) as fh:
        return [RunRecord.from_json(json.loads(line)) for line in fh if line.strip()]


# -- reporting ------------------------------------------------------------------

def _wall(r: RunRecord) -> float:
    return float(sum(r.wall_s.values()))


def emit_report(records: Sequence[RunRecord]) -> tuple[str, dict]:
    """Comparison table, one group per (dataset, model).

    A speedup column (StarALL wall time over the row's) appears only in
    groups that contain a StarALL row.
    """
    if not records:
        raise ValueError("no records to report")
    groups: dict[tuple, list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.dataset, r.spec.get("model", "?")), []).append(r)

    out_groups, lines = [], []
    for (dataset, model), rows in groups.items():
        base = next((r for r in rows if r.label == "StarALL" and not r.error), None)
        metric = next((r.report["metric"] for r in rows if r.report), "metric")
        table_rows = []
        for r in rows:
            row = {"config": r.label, metric: r.metric, "wall_s": round(_wall(r), 3),
                   "train_data": r.train_data, "bytes": r.total_bytes}
            if base is not None:
                row["speedup"] = round(_wall(base) / _wall(r), 3) if _wall(r) > 0 else None
            if r.error:
                row["error"] = f"{r.error['phase']}: {r.error['message']}"
            table_rows.append(row)
        out_groups.append({"dataset": dataset, "model": model, "rows": table_rows})

        cols = list(table_rows[0])
        for row in table_rows[1:]:
            cols += [c for c in row if c not in cols]
        cells = [[_fmt(row.get(c)) for c in cols] for row in table_rows]
        widths = [max(len(c), *(len(r[i]) for r in cells)) for i, c in enumerate(cols)]
        lines.append(f"== {dataset} / {model} ==")
        lines.append("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
        lines.extend("  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in cells)
        lines.append("")
    return "\n".join(lines).rstrip() + "\n", {"groups": out_groups}


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


# -- CLI ------------------------------------------------------------------------

def _add_dataset_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", choices=["blobs", "planted", "csv"], default="blobs")
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--d", type=int, default=12)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--planted-clusters", type=int, default=4)
    p.add_argument("--csv", dest="csv_path")
    p.add_argument("--label-column", default="label")
    p.add_argument("--task", choices=[core.CLASSIFICATION, core.REGRESSION], default=core.CLASSIFICATION)
    p.add_argument("--m", type=int, default=3)


def _add_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", choices=[k.value for k in ModelKind] + [KNN], default="lr")
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--batch-fraction", type=float, default=0.01)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--activation", default="tanh")
    p.add_argument("--lr", type=float, nargs="+", default=None, help="learning-rate grid")
    p.add_argument("--knn-k", type=int, default=5)


def _dataset_spec(a) -> DatasetSpec:
    return DatasetSpec(a.dataset, a.n, a.d, a.classes, a.separation, a.planted_clusters,
                       a.csv_path, a.label_column, a.task)


def _train_cfg(a) -> TrainConfig:
    kw = dict(max_epochs=a.max_epochs, batch_fraction=a.batch_fraction, hidden=a.hidden,
              activation=a.activation)
    if a.lr:
        kw["lr_grid"] = tuple(a.lr)
    return TrainConfig(**kw)


def _cmd_psi_bench(a) -> int:
    rows = []
    for m in a.m:
        sets = core.synthesize_id_sets(a.n_base, m, a.overlap, a.seed)
        truth = sorted(set.intersection(*map(set, sets)))
        for topo in a.topologies:
            for pol in a.policies:
                for proto in a.protocols:
                    t0 = time.perf_counter()
                    res = run_mpsi(topo, pol, proto, sets, cfg=TpsiConfig(rsa_bits=a.rsa_bits))
                    rows.append({"kind": "psi-bench", "M": m, "topology": topo, "policy": pol,
                                 "protocol": proto, "bytes": res.stats.total_bytes,
                                 "rounds": res.rounds, "tpsi_runs": res.tpsi_runs,
                                 "result_size": len(res.result), "correct": list(res.result.ids) == truth,
                                 "wall_s": time.perf_counter() - t0})
                    print(json.dumps(rows[-1], sort_keys=True))
    if a.out:
        with open(a.out, "a") as fh:
            fh.writelines(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    return 0 if all(r["correct"] for r in rows) else 1


def _cmd_coreset(a) -> int:
    data = _dataset_spec(a).load(a.m, a.seed)
    ids = sorted(int(i) for i in data.labels.ids)
    fed = Federation.create(a.m)
    co = build_coreset(fed, data, ids, a.c, a.seed)
    if a.out_csv:
        co.selection.dump_csv(a.out_csv)
    rep = co.report()
    rep["bytes"] = co.stats.total_bytes
    print(json.dumps(rep, sort_keys=True))
    return 0


def _cmd_train(a) -> int:
    data = _dataset_spec(a).load(a.m, a.seed)
    ids = sorted(int(i) for i in data.labels.ids)
    train_ids, test_ids = core.train_test_split(ids, a.test_fraction, a.seed)
    weights = None
    if a.coreset:
        sel = CoresetSelection.load_csv(a.coreset)
        allowed = set(train_ids)
        train_ids = [i for i in sel.ids if i in allowed]
        weights = sel.weights
    fed = Federation.create(a.m)
    if a.model == KNN:
        rep = _knn_report(fed, data, train_ids, weights, test_ids, a.knn_k)
    else:
        _, tr = train_until_converged(fed, a.model, data, train_ids, _train_cfg(a), a.seed,
                                      weights=weights, test_ids=test_ids)
        rep = tr.to_json()
    print(json.dumps(rep, sort_keys=True))
    return 0


def _cmd_e2e(a) -> int:
    configs = [(t, u) for t in a.topologies for u in a.coreset_modes]
    status = 0
    for topo, use in configs:
        spec = ExperimentSpec(_dataset_spec(a), a.m, topo, a.policy, a.protocol, use, a.c, a.model,
                              _train_cfg(a), a.seed, a.rsa_bits, a.test_fraction, a.psi_extra, a.knn_k)
        rec = run_experiment(spec, a.out)
        summary = {"config": rec.label, "align": rec.align_size, "coreset": rec.coreset_size,
                   "metric": rec.metric, "bytes": rec.total_bytes, "error": rec.error and rec.error["message"]}
        print(json.dumps(summary, sort_keys=True))
        status |= rec.error is not None
    return status


def _cmd_report(a) -> int:
    records = [r for path in a.records for r in load_records(path)]
    text, obj = emit_report(records)
    print(json.dumps(obj, sort_keys=True, indent=2) if a.json else text, end="" if not a.json else "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vflpipe", description="VFL alignment / coreset / training runner")
    sub = p.add_subparsers(dest="cmd", required=True)

    b = sub.add_parser("psi-bench", help="sweep MPSI topology/policy/protocol")
    b.add_argument("--m", type=int, nargs="+", default=[2, 3, 5, 8])
    b.add_argument("--n-base", type=int, default=1000)
    b.add_argument("--overlap", type=float, default=0.7)
    b.add_argument("--topologies", nargs="+", default=[t.value for t in Topology])
    b.add_argument("--policies", nargs="+", default=[p_.value for p_ in Policy])
    b.add_argument("--protocols", nargs="+", default=[t.value for t in TpsiProtocol])
    b.add_argument("--rsa-bits", type=int, default=2048)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(fn=_cmd_psi_bench)

    c = sub.add_parser("coreset", help="build a coreset over all samples")
    _add_dataset_args(c)
    c.add_argument("--c", type=int, default=8)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out-csv")
    c.set_defaults(fn=_cmd_coreset)

    t = sub.add_parser("train", help="train on full data or a coreset file")
    _add_dataset_args(t)
    _add_train_args(t)
    t.add_argument("--coreset", help="CSV written by the coreset command")
    t.add_argument("--test-fraction", type=float, default=0.3)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("e2e", help="alignment, coreset and training in one run")
    _add_dataset_args(e)
    _add_train_args(e)
    e.add_argument("--topologies", nargs="+", default=["star", "tree"], choices=[t_.value for t_ in Topology])
    e.add_argument("--coreset-modes", nargs="+", type=lambda s: s.lower() in ("1", "true", "css", "yes"),
                   default=[False, True], help="true/css for coreset, false/all for full data")
    e.add_argument("--policy", default=Policy.VOLUME_AWARE.value, choices=[p_.value for p_ in Policy])
    e.add_argument("--protocol", default=TpsiProtocol.OPRF.value, choices=[t_.value for t_ in TpsiProtocol])
    e.add_argument("--c", type=int, default=8)
    e.add_argument("--rsa-bits", type=int, default=2048)
    e.add_argument("--test-fraction", type=float, default=0.3)
    e.add_argument("--psi-extra", type=float, default=0.1)
    e.add_argument("--seed", type=int, required=True)
    e.add_argument("--out", default="records.jsonl")
    e.set_defaults(fn=_cmd_e2e)

    r = sub.add_parser("report", help="comparison table from JSON-lines records")
    r.add_argument("records", nargs="+")
    r.add_argument("--json", action="store_true")
    r.set_defaults(fn=_cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return int(args.fn(args))


if __name__ == "__main__":
    sys.exit(main())
