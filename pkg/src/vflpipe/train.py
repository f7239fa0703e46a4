"""Split-model training: client bottoms, server top, label-owner loss.

One training step moves over the bus as

    clients      -> aggregator   ACTIVATIONS   bottom outputs for the batch
    aggregator   -> label owner  TOP_OUTPUT    merged model outputs
    label owner  -> aggregator   GRAD_TOP      d(weighted loss)/d(outputs)
    aggregator   -> clients      GRAD_BOTTOM   d(weighted loss)/d(bottom outputs)

and every party applies Adam to its own parameters. The objective is the
weighted sum ``sum_i w_i * loss_i``; with unit weights it is the plain
sample-wise loss.
"""

from __future__ import annotations

import enum
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import Task, VerticalDataset
from .federation import Federation
from .transport import AGGREGATOR, LABEL_OWNER, Kind, PartyId
from .wire import pack_ids, pack_matrix, unpack_ids, unpack_matrix

LR_GRID = (1.0, 0.1, 0.01, 0.001)
DIVERGENCE_LIMIT = 1e10


class TrainingError(RuntimeError):
    pass


class ModelKind(str, enum.Enum):
    LR = "lr"
    LINREG = "linreg"
    MLP = "mlp"


@dataclass
class TrainConfig:
    lr_grid: tuple = LR_GRID
    batch_fraction: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tol: float = 1e-4
    patience: int = 5
    max_epochs: int = 100
    validation_fraction: float = 0.1
    hidden: int = 16
    activation: str = "tanh"

    def __post_init__(self):
        if not all(lr > 0 for lr in self.lr_grid) or not self.lr_grid:
            raise ValueError("learning rates must be positive")
        if not 0 < self.batch_fraction <= 1:
            raise ValueError("batch fraction must lie in (0, 1]")
        if self.max_epochs < 0 or self.patience < 1 or self.hidden < 1:
            raise ValueError("max_epochs >= 0, patience >= 1, hidden >= 1")

    def batch_size(self, n: int) -> int:
        return max(1, int(round(self.batch_fraction * n)))


# -- model pieces -------------------------------------------------------------

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda u, a: 1.0 - a * a),
    "relu": (lambda u: np.maximum(u, 0.0), lambda u, a: (u > 0).astype(np.float64)),
    "sigmoid": (lambda u: 1.0 / (1.0 + np.exp(-u)), lambda u, a: a * (1.0 - a)),
}


class Adam:
    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params, self.lr, self.beta1, self.beta2, self.eps = params, lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            self.params[k] -= (self.lr / c1) * m / (np.sqrt(v) / math.sqrt(c2) + self.eps)


@dataclass
class BottomModel:
    client: PartyId
    params: dict  # "W": (d_m, h), optional "b": (h,)

    def forward(self, x: np.ndarray) -> np.ndarray:
        z = x @ self.params["W"]
        if "b" in self.params:
            z = z + self.params["b"]
        return z

    def backward(self, x: np.ndarray, gz: np.ndarray) -> dict:
        grads = {"W": x.T @ gz}
        if "b" in self.params:
            grads["b"] = gz.sum(0)
        return grads


@dataclass
class TopModel:
    kind: str  # "sum" or "mlp"
    params: dict
    activation: str = "tanh"

    def forward(self, zs: Sequence[np.ndarray]) -> tuple[np.ndarray, tuple]:
        if self.kind == "sum":
            out = zs[0].copy()
            for z in zs[1:]:
                out += z
            return out + self.params["b"], ()
        u = np.hstack(zs)
        a = _ACTIVATIONS[self.activation][0](u)
        return a @ self.params["V"] + self.params["c"], (u, a)

    def backward(self, zs: Sequence[np.ndarray], cache: tuple, g_out: np.ndarray) -> tuple[dict, list]:
        if self.kind == "sum":
            return {"b": g_out.sum(0)}, [g_out] * len(zs)
        u, a = cache
        grads = {"V": a.T @ g_out, "c": g_out.sum(0)}
        g_u = (g_out @ self.params["V"].T) * _ACTIVATIONS[self.activation][1](u, a)
        splits = np.cumsum([z.shape[1] for z in zs])[:-1]
        return grads, np.split(g_u, splits, axis=1)


@dataclass
class LossHead:
    task: Task
    out_dim: int

    def loss_and_grad(self, out: np.ndarray, y: np.ndarray, w: np.ndarray) -> tuple[float, np.ndarray]:
        """Weighted summed loss and its gradient w.r.t. the model outputs."""
        if not self.task.is_classification:
            r = out[:, 0] - y
            return float(np.sum(w * 0.5 * r * r)), (w * r)[:, None]
        if self.out_dim == 1:
            o = out[:, 0]
            per = np.logaddexp(0.0, o) - y * o
            p = 0.5 * (1.0 + np.tanh(0.5 * o))
            return float(np.sum(w * per)), (w * (p - y))[:, None]
        shift = out - out.max(1, keepdims=True)
        lse = np.log(np.exp(shift).sum(1))
        yi = y.astype(np.int64)
        per = lse - shift[np.arange(len(y)), yi]
        p = np.exp(shift - lse[:, None])
        p[np.arange(len(y)), yi] -= 1.0
        return float(np.sum(w * per)), w[:, None] * p

    def predict(self, out: np.ndarray) -> np.ndarray:
        if not self.task.is_classification:
            return out[:, 0]
        if self.out_dim == 1:
            return (out[:, 0] > 0).astype(np.int64)
        return out.argmax(1)


@dataclass
class SplitModel:
    kind: ModelKind
    bottoms: list
    top: TopModel
    head: LossHead

    def param_groups(self) -> dict:
        groups = {str(b.client): b.params for b in self.bottoms}
        groups[str(AGGREGATOR)] = self.top.params
        return groups

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for group in self.param_groups().values()
                               for _, p in sorted(group.items())])

    def dump_params(self) -> dict:
        """Flat float arrays with a shape manifest."""
        manifest, values = [], []
        for owner, group in self.param_groups().items():
            for name, p in sorted(group.items()):
                manifest.append({"owner": owner, "name": name, "shape": list(p.shape)})
                values.append(p.ravel().tolist())
        return {"manifest": manifest, "values": values}

    def load_params(self, dump: Mapping) -> None:
        groups = self.param_groups()
        for entry, vals in zip(dump["manifest"], dump["values"]):
            target = groups[entry["owner"]][entry["name"]]
            target[...] = np.asarray(vals, dtype=np.float64).reshape(entry["shape"])

    def copy(self) -> "SplitModel":
        return SplitModel(self.kind,
                          [BottomModel(b.client, {k: v.copy() for k, v in b.params.items()}) for b in self.bottoms],
                          TopModel(self.top.kind, {k: v.copy() for k, v in self.top.params.items()},
                                   self.top.activation),
                          self.head)


def output_dim(task: Task) -> int:
    if not task.is_classification or task.n_classes == 2:
        return 1
    return task.n_classes


def build_model(kind: ModelKind, dims: Sequence[int], task: Task, seed: int = 0,
                hidden: int = 16, activation: str = "tanh") -> SplitModel:
    """Fresh model: linear kinds start at zero, MLP from a seeded Glorot draw."""
    kind = ModelKind(kind)
    if kind is ModelKind.LINREG and task.is_classification:
        raise TrainingError("linear regression needs a regression task")
    if kind is ModelKind.LR and not task.is_classification:
        raise TrainingError("logistic regression needs a classification task")
    if activation not in _ACTIVATIONS:
        raise TrainingError(f"unknown activation {activation!r}")
    out = output_dim(task)
    clients = [PartyId.client(k) for k in range(1, len(dims) + 1)]
    head = LossHead(task, out)
    if kind is not ModelKind.MLP:
        bottoms = [BottomModel(c, {"W": np.zeros((d, out))}) for c, d in zip(clients, dims)]
        return SplitModel(kind, bottoms, TopModel("sum", {"b": np.zeros(out)}), head)
    rng = np.random.default_rng(seed)
    bottoms = []
    for c, d in zip(clients, dims):
        scale = math.sqrt(2.0 / (d + hidden))
        bottoms.append(BottomModel(c, {"W": rng.normal(0, scale, (d, hidden)), "b": np.zeros(hidden)}))
    width = hidden * len(dims)
    top = TopModel("mlp", {"V": rng.normal(0, math.sqrt(2.0 / (width + out)), (width, out)),
                           "c": np.zeros(out)}, activation)
    return SplitModel(kind, bottoms, top, head)


# -- the split step over the bus ----------------------------------------------

@dataclass
class PartyData:
    """Each party's local slice for a fixed id list, in a shared row order."""
    ids: list
    features: list  # per client, aligned with ids
    labels: np.ndarray
    weights: np.ndarray

    @classmethod
    def materialize(cls, data: VerticalDataset, ids: Sequence[int],
                    weights: Mapping[int, float] | Sequence[float] | None = None) -> "PartyData":
        ids = [int(i) for i in ids]
        if weights is None:
            w = np.ones(len(ids))
        elif isinstance(weights, Mapping):
            w = np.array([weights[i] for i in ids], dtype=np.float64)
        else:
            w = np.asarray(weights, dtype=np.float64)
        y = data.labels.get(ids)
        y = y.astype(np.float64) if data.task.is_classification else np.asarray(y, dtype=np.float64)
        return cls(ids, [c.rows(ids) for c in data.clients], y, w)

    def __len__(self) -> int:
        return len(self.ids)


def _forward_over_bus(fed: Federation, session: int, model: SplitModel, data: PartyData,
                      rows: np.ndarray) -> tuple[list, np.ndarray, tuple]:
    for bottom, x in zip(model.bottoms, data.features):
        fed.clients[bottom.client].send(AGGREGATOR, session, Kind.ACTIVATIONS,
                                        pack_matrix(bottom.forward(x[rows])))
    zs = []
    for bottom in model.bottoms:
        env = fed.aggregator.expect(session, Kind.ACTIVATIONS, bottom.client)
        zs.append(unpack_matrix(env.payload)[0])
    out, cache = model.top.forward(zs)
    return zs, out, cache


@dataclass
class StepResult:
    loss: float
    grads: dict  # owner -> {name: grad}


def compute_step(fed: Federation, session: int, model: SplitModel, data: PartyData,
                 rows: np.ndarray) -> StepResult:
    """One forward/backward exchange; returns the loss and every party's gradients."""
    zs, out, cache = _forward_over_bus(fed, session, model, data, rows)
    fed.aggregator.send(LABEL_OWNER, session, Kind.TOP_OUTPUT, pack_matrix(out))

    out_lo = unpack_matrix(fed.label_owner.expect(session, Kind.TOP_OUTPUT, AGGREGATOR).payload)[0]
    loss, g_out = model.head.loss_and_grad(out_lo, data.labels[rows], data.weights[rows])
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss} on a batch of {len(rows)}")
    fed.label_owner.send(AGGREGATOR, session, Kind.GRAD_TOP, pack_matrix(g_out))

    g_out_srv = unpack_matrix(fed.aggregator.expect(session, Kind.GRAD_TOP, LABEL_OWNER).payload)[0]
    top_grads, gzs = model.top.backward(zs, cache, g_out_srv)
    grads = {str(AGGREGATOR): top_grads}
    for bottom, gz in zip(model.bottoms, gzs):
        fed.aggregator.send(bottom.client, session, Kind.GRAD_BOTTOM, pack_matrix(gz))
    for bottom, x in zip(model.bottoms, data.features):
        gz = unpack_matrix(fed.clients[bottom.client].expect(session, Kind.GRAD_BOTTOM, AGGREGATOR).payload)[0]
        grads[str(bottom.client)] = bottom.backward(x[rows], gz)
    return StepResult(loss, grads)


class Optimizers:
    """One Adam instance per party, each touching only that party's parameters."""

    def __init__(self, model: SplitModel, lr: float, cfg: TrainConfig):
        self.by_owner = {owner: Adam(params, lr, cfg.beta1, cfg.beta2, cfg.eps)
                         for owner, params in model.param_groups().items()}

    def apply(self, grads: dict) -> None:
        for owner, g in grads.items():
            self.by_owner[owner].step(g)


def split_step(fed: Federation, session: int, model: SplitModel, opt: Optimizers,
               data: PartyData, rows: np.ndarray) -> float:
    res = compute_step(fed, session, model, data, rows)
    opt.apply(res.grads)
    return res.loss


def predict_outputs(fed: Federation, model: SplitModel, data: PartyData,
                    batch: int = 4096) -> np.ndarray:
    """Forward pass over the bus; outputs land at the label owner."""
    session = fed.bus.open_session()
    outs = []
    for start in range(0, len(data), batch):
        rows = np.arange(start, min(start + batch, len(data)))
        _, out, _ = _forward_over_bus(fed, session, model, data, rows)
        fed.aggregator.send(LABEL_OWNER, session, Kind.TOP_OUTPUT, pack_matrix(out))
        outs.append(unpack_matrix(fed.label_owner.expect(session, Kind.TOP_OUTPUT, AGGREGATOR).payload)[0])
    fed.bus.close_session(session)
    return np.vstack(outs) if outs else np.empty((0, model.head.out_dim))


# -- metrics --------------------------------------------------------------------

def metric_name(task: Task) -> str:
    return "accuracy" if task.is_classification else "mse"


def score(task: Task, predictions: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise TrainingError("cannot evaluate on an empty split")
    if task.is_classification:
        return float(np.mean(np.asarray(predictions) == np.asarray(labels)))
    diff = np.asarray(predictions, dtype=np.float64) - np.asarray(labels, dtype=np.float64)
    return float(np.mean(diff * diff))


def better(task: Task, a: float, b: float) -> bool:
    return a > b if task.is_classification else a < b


def evaluate(fed: Federation, model: SplitModel, data: VerticalDataset, ids: Sequence[int]) -> float:
    """Accuracy (classification) or mean squared error (regression)."""
    if not len(ids):
        raise TrainingError("cannot evaluate on an empty split")
    pd = PartyData.materialize(data, ids)
    preds = model.head.predict(predict_outputs(fed, model, pd))
    return score(data.task, preds, data.labels.get(ids))


# -- training loops -------------------------------------------------------------

@dataclass
class TrainReport:
    model: str
    metric: str
    lr: float
    train_metric: float
    test_metric: float | None
    epochs: int
    wall_s: float
    loss_curve: list
    samples_used: int
    samples_processed: int
    grid: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainReport":
        return cls(**obj)


@dataclass
class FitResult:
    model: SplitModel
    loss_curve: list
    epochs: int
    samples_processed: int


def fit(fed: Federation, model: SplitModel, data: PartyData, lr: float, cfg: TrainConfig,
        seed: int) -> FitResult:
    """Shuffled mini-batch epochs until the loss settles or ``max_epochs``.

    The per-epoch loss is the weighted loss per unit weight; training stops
    once it moved by less than ``tol`` over the last ``patience`` epochs.
    """
    if len(data) == 0:
        raise TrainingError("empty training set")
    rng = np.random.default_rng(seed)
    opt = Optimizers(model, lr, cfg)
    bs = cfg.batch_size(len(data))
    total_w = float(data.weights.sum())
    curve: list[float] = []
    processed = 0
    session = fed.bus.open_session()
    try:
        for _ in range(cfg.max_epochs):
            order = rng.permutation(len(data))
            epoch_loss = 0.0
            for start in range(0, len(order), bs):
                rows = order[start:start + bs]
                epoch_loss += split_step(fed, session, model, opt, data, rows)
                processed += len(rows)
            epoch_loss /= total_w
            if not math.isfinite(epoch_loss) or epoch_loss > DIVERGENCE_LIMIT:
                raise TrainingError(f"training diverged at lr={lr} (epoch loss {epoch_loss})")
            curve.append(epoch_loss)
            if len(curve) > cfg.patience and abs(curve[-1] - curve[-1 - cfg.patience]) < cfg.tol:
                break
    except TrainingError as exc:
        if f"lr={lr}" not in str(exc):
            raise TrainingError(f"lr={lr}: {exc}") from exc
        raise
    finally:
        fed.bus.close_session(session)
    return FitResult(model, curve, len(curve), processed)


def train_until_converged(fed: Federation, kind: ModelKind, data: VerticalDataset,
                          train_ids: Sequence[int], cfg: TrainConfig, seed: int,
                          weights: Mapping[int, float] | None = None,
                          test_ids: Sequence[int] | None = None) -> tuple[SplitModel, TrainReport]:
    """Grid-search the learning rate on a held-out slice, then refit on all of ``train_ids``.

    A learning rate whose run diverges is dropped from the search; if every
    one diverges the error propagates.
    """
    train_ids = [int(i) for i in train_ids]
    if not train_ids:
        raise TrainingError("empty training set")
    t0 = time.perf_counter()
    kind = ModelKind(kind)
    task = data.task

    def fresh() -> SplitModel:
        return build_model(kind, data.dims, task, seed, cfg.hidden, cfg.activation)

    processed = 0
    grid: dict = {}
    if len(cfg.lr_grid) == 1:
        best_lr = cfg.lr_grid[0]
    else:
        rng = np.random.default_rng([seed, 1])
        order = rng.permutation(len(train_ids))
        n_val = max(1, int(round(cfg.validation_fraction * len(train_ids))))
        if n_val >= len(train_ids):
            n_val = len(train_ids) // 2
        val_ids = [train_ids[i] for i in sorted(order[:n_val])]
        fit_ids = [train_ids[i] for i in sorted(order[n_val:])]
        fit_data = PartyData.materialize(data, fit_ids, weights)
        best_lr, best_metric, failures = None, None, []
        for lr in cfg.lr_grid:
            try:
                res = fit(fed, fresh(), fit_data, lr, cfg, seed)
            except TrainingError as exc:
                failures.append(str(exc))
                grid[str(lr)] = None
                continue
            processed += res.samples_processed
            metric = evaluate(fed, res.model, data, val_ids)
            grid[str(lr)] = metric
            if best_metric is None or better(task, metric, best_metric):
                best_lr, best_metric = lr, metric
        if best_lr is None:
            raise TrainingError("every learning rate diverged: " + "; ".join(failures))

    full = PartyData.materialize(data, train_ids, weights)
    res = fit(fed, fresh(), full, best_lr, cfg, seed)
    processed += res.samples_processed
    train_metric = evaluate(fed, res.model, data, train_ids)
    test_metric = evaluate(fed, res.model, data, test_ids) if test_ids else None
    report = TrainReport(kind.value, metric_name(task), best_lr, train_metric, test_metric,
                         res.epochs, time.perf_counter() - t0, res.loss_curve, len(train_ids),
                         processed, grid)
    return res.model, report


# -- weighted KNN -----------------------------------------------------------------

def knn_predict(fed: Federation, data: VerticalDataset, query_ids: Sequence[int],
                reference_ids: Sequence[int], k: int,
                weights: Mapping[int, float] | None = None) -> np.ndarray:
    """Weighted KNN where each client only reveals partial squared distances.

    Neighbors are the ``k`` smallest summed distances (ties to the smaller
    id); the label owner returns the label with the largest neighbor-weight
    total (ties to the smaller label), or the weighted mean for regression.
    """
    refs = sorted(int(i) for i in reference_ids)
    queries = [int(q) for q in query_ids]
    if not refs:
        raise TrainingError("empty reference set")
    if not 1 <= k <= len(refs):
        raise TrainingError(f"k={k} must lie in [1, {len(refs)}]")
    session = fed.bus.open_session()
    for c in fed.client_ids:
        fed.aggregator.send(c, session, Kind.KNN_QUERY, pack_ids(queries) + pack_ids(refs))
    for table in data.clients:
        party = PartyId.client(table.client_id)
        env = fed.clients[party].expect(session, Kind.KNN_QUERY, AGGREGATOR)
        q_ids, at = unpack_ids(env.payload)
        r_ids, _ = unpack_ids(env.payload, at)
        xq, xr = table.rows(q_ids), table.rows(r_ids)
        partial = ((xq[:, None, :] - xr[None, :, :]) ** 2).sum(-1)
        fed.clients[party].send(AGGREGATOR, session, Kind.KNN_PARTIAL, pack_matrix(partial))
    total = np.zeros((len(queries), len(refs)))
    for table in data.clients:
        env = fed.aggregator.expect(session, Kind.KNN_PARTIAL, PartyId.client(table.client_id))
        total += unpack_matrix(env.payload)[0]
    ref_arr = np.array(refs, dtype=np.uint64)
    # stable sort on distance keeps ascending-id order among equal distances
    neighbors = np.argsort(total, axis=1, kind="stable")[:, :k]
    fed.aggregator.send(LABEL_OWNER, session, Kind.KNN_PARTIAL,
                        pack_ids(ref_arr[neighbors].ravel()))
    env = fed.label_owner.expect(session, Kind.KNN_PARTIAL, AGGREGATOR)
    flat, _ = unpack_ids(env.payload)
    fed.bus.close_session(session)

    chosen = np.array(flat, dtype=np.int64).reshape(len(queries), k)
    y = data.labels.get(chosen.ravel()).reshape(chosen.shape)
    w = np.ones(chosen.shape) if weights is None else \
        np.array([weights[int(i)] for i in chosen.ravel()]).reshape(chosen.shape)
    if not data.task.is_classification:
        return (w * y).sum(1) / w.sum(1)
    n_labels = data.task.n_classes
    votes = np.zeros((len(queries), n_labels))
    for j in range(k):
        np.add.at(votes, (np.arange(len(queries)), y[:, j].astype(np.int64)), w[:, j])
    return votes.argmax(1)
