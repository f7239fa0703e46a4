import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vflpipe import core
from vflpipe.core import LabelTable, Task, VerticalDataset
from vflpipe.federation import Federation
from vflpipe.train import (ModelKind, Optimizers, PartyData, TrainConfig, TrainingError,
                           build_model, compute_step, evaluate, fit, knn_predict, score,
                           split_step, train_until_converged)
from vflpipe.transport import AGGREGATOR, Bus, Kind, PartyId

torch.set_default_dtype(torch.float64)


def make_data(n=50, dims=(3, 2, 4), task=Task(), seed=0):
    rng = np.random.default_rng(seed)
    ids = np.arange(n, dtype=np.uint64)
    tables = tuple(core.ClientTable(k + 1, ids, rng.standard_normal((n, d))) for k, d in enumerate(dims))
    if task.is_classification:
        y = rng.integers(0, task.n_classes, n)
    else:
        y = rng.standard_normal(n)
    return VerticalDataset(tables, LabelTable(ids, y), task)


def randomize(model, seed):
    rng = np.random.default_rng(seed)
    for group in model.param_groups().values():
        for p in group.values():
            p[...] = rng.normal(0, 0.5, p.shape)


CASES = [
    ("lr", Task()),
    ("lr", Task("classification", 3)),
    ("linreg", Task.regression()),
    ("mlp", Task()),
    ("mlp", Task("classification", 4)),
    ("mlp", Task.regression()),
]


# -- independent numpy forward for finite differences -------------------------

def oracle_loss(model, data: PartyData, kind, task):
    xs = data.features
    if kind == "mlp":
        u = np.hstack([x @ b.params["W"] + b.params["b"] for x, b in zip(xs, model.bottoms)])
        out = np.tanh(u) @ model.top.params["V"] + model.top.params["c"]
    else:
        out = sum(x @ b.params["W"] for x, b in zip(xs, model.bottoms)) + model.top.params["b"]
    y, w = data.labels, data.weights
    if not task.is_classification:
        return float(np.sum(w * 0.5 * (out[:, 0] - y) ** 2))
    if out.shape[1] == 1:
        o = out[:, 0]
        p = 1 / (1 + np.exp(-o))
        return float(np.sum(w * -(y * np.log(p) + (1 - y) * np.log(1 - p))))
    logp = out - np.log(np.exp(out).sum(1, keepdims=True))
    return float(np.sum(w * -logp[np.arange(len(y)), y.astype(int)]))


@pytest.mark.parametrize("kind,task", CASES)
def test_gradients_match_finite_differences(kind, task):
    ds = make_data(task=task, seed=3)
    pd = PartyData.materialize(ds, list(range(50)), np.random.default_rng(1).uniform(0.2, 2.0, 50))
    model = build_model(kind, ds.dims, task, seed=0)
    randomize(model, 7)
    fed = Federation.create(3)
    sid = fed.bus.open_session()
    res = compute_step(fed, sid, model, pd, np.arange(50))
    assert abs(res.loss - oracle_loss(model, pd, kind, task)) < 1e-9
    h = 1e-5
    for owner, group in model.param_groups().items():
        for name, p in group.items():
            analytic = res.grads[owner][name]
            numeric = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                orig = p[idx]
                p[idx] = orig + h
                up = oracle_loss(model, pd, kind, task)
                p[idx] = orig - h
                down = oracle_loss(model, pd, kind, task)
                p[idx] = orig
                numeric[idx] = (up - down) / (2 * h)
            rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
            assert rel.max() < 1e-5, (owner, name, rel.max())


def test_zero_lr_loss_is_ln2_sum_w():
    ds = make_data(n=40, seed=1)
    y = np.array([0, 1] * 20)
    ds = VerticalDataset(ds.clients, LabelTable(ds.labels.ids, y), ds.task)
    w = np.random.default_rng(0).uniform(0.1, 3.0, 40)
    pd = PartyData.materialize(ds, list(range(40)), w)
    model = build_model("lr", ds.dims, ds.task)
    fed = Federation.create(3)
    res = compute_step(fed, fed.bus.open_session(), model, pd, np.arange(40))
    assert abs(res.loss - math.log(2) * w.sum()) < 1e-12


def test_unit_weights_equal_unweighted():
    ds = make_data(seed=2)
    a = PartyData.materialize(ds, list(range(50)))
    b = PartyData.materialize(ds, list(range(50)), {i: 1.0 for i in range(50)})
    m1 = build_model("mlp", ds.dims, ds.task, seed=1)
    m2 = build_model("mlp", ds.dims, ds.task, seed=1)
    cfg = TrainConfig()
    fed = Federation.create(3)
    sid = fed.bus.open_session()
    o1, o2 = Optimizers(m1, 0.01, cfg), Optimizers(m2, 0.01, cfg)
    for step in range(5):
        rows = np.arange(step * 10, step * 10 + 10)
        assert split_step(fed, sid, m1, o1, a, rows) == split_step(fed, sid, m2, o2, b, rows)
    assert m1.flat_params().tobytes() == m2.flat_params().tobytes()


@pytest.mark.parametrize("kind,task", CASES)
def test_weighted_loss_linearity(kind, task):
    ds = make_data(task=task, seed=4)
    w = np.random.default_rng(2).uniform(0.1, 1.0, 50)
    model = build_model(kind, ds.dims, task, seed=0)
    randomize(model, 1)
    fed = Federation.create(3)
    sid = fed.bus.open_session()
    r1 = compute_step(fed, sid, model, PartyData.materialize(ds, list(range(50)), w), np.arange(50))
    r2 = compute_step(fed, sid, model, PartyData.materialize(ds, list(range(50)), 2 * w), np.arange(50))
    assert abs(r2.loss - 2 * r1.loss) <= 1e-12 * abs(r1.loss)
    for owner in r1.grads:
        for name in r1.grads[owner]:
            np.testing.assert_allclose(r2.grads[owner][name], 2 * r1.grads[owner][name], rtol=1e-12, atol=1e-14)


# -- split vs. single-machine torch -------------------------------------------

def torch_mirror(model, ds, pd, kind, task, lr, steps):
    x = torch.tensor(np.hstack(pd.features))
    y = torch.tensor(pd.labels)
    w = torch.tensor(pd.weights)
    dims = ds.dims
    bounds = np.cumsum([0] + dims)
    params = []
    if kind == "mlp":
        Ws = [torch.tensor(b.params["W"].copy(), requires_grad=True) for b in model.bottoms]
        bs = [torch.tensor(b.params["b"].copy(), requires_grad=True) for b in model.bottoms]
        V = torch.tensor(model.top.params["V"].copy(), requires_grad=True)
        c = torch.tensor(model.top.params["c"].copy(), requires_grad=True)
        params = Ws + bs + [V, c]

        def forward(xb):
            u = torch.cat([xb[:, bounds[k]:bounds[k + 1]] @ Ws[k] + bs[k] for k in range(len(dims))], 1)
            return torch.tanh(u) @ V + c
    else:
        W = torch.tensor(np.vstack([b.params["W"] for b in model.bottoms]), requires_grad=True)
        b0 = torch.tensor(model.top.params["b"].copy(), requires_grad=True)
        params = [W, b0]

        def forward(xb):
            return xb @ W + b0

    opt = torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)
    losses = []
    for rows in steps:
        rows = torch.tensor(rows)
        out = forward(x[rows])
        yb, wb = y[rows], w[rows]
        if not task.is_classification:
            per = 0.5 * (out[:, 0] - yb) ** 2
        elif out.shape[1] == 1:
            per = torch.nn.functional.binary_cross_entropy_with_logits(out[:, 0], yb, reduction="none")
        else:
            per = torch.nn.functional.cross_entropy(out, yb.long(), reduction="none")
        loss = (wb * per).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    if kind == "mlp":
        flat = {str(PartyId.client(k + 1)): {"W": Ws[k], "b": bs[k]} for k in range(len(dims))}
        flat[str(AGGREGATOR)] = {"V": V, "c": c}
    else:
        flat = {str(PartyId.client(k + 1)): {"W": W[bounds[k]:bounds[k + 1]]} for k in range(len(dims))}
        flat[str(AGGREGATOR)] = {"b": b0}
    return losses, {o: {n: t.detach().numpy() for n, t in g.items()} for o, g in flat.items()}


@pytest.mark.parametrize("kind,task", CASES)
def test_split_equals_central(kind, task):
    ds = make_data(n=80, task=task, seed=5)
    pd = PartyData.materialize(ds, list(range(80)), np.random.default_rng(3).uniform(0.5, 1.5, 80))
    model = build_model(kind, ds.dims, task, seed=2)
    randomize(model, 9)
    ref = model.copy()
    rng = np.random.default_rng(0)
    steps = [rng.choice(80, 8, replace=False) for _ in range(10)]
    fed = Federation.create(3)
    sid = fed.bus.open_session()
    opt = Optimizers(model, 0.05, TrainConfig())
    losses = [split_step(fed, sid, model, opt, pd, rows) for rows in steps]
    t_losses, t_params = torch_mirror(ref, ds, pd, kind, task, 0.05, steps)
    np.testing.assert_allclose(losses, t_losses, rtol=0, atol=1e-9)
    for owner, group in model.param_groups().items():
        for name, p in group.items():
            assert np.abs(p - t_params[owner][name]).max() <= 1e-9


def test_split_bitwise_reproducible():
    ds = make_data(seed=6)
    pd = PartyData.materialize(ds, list(range(50)))
    runs = []
    for _ in range(2):
        model = build_model("mlp", ds.dims, ds.task, seed=4)
        fed = Federation.create(3)
        fit(fed, model, pd, 0.01, TrainConfig(max_epochs=3), seed=1)
        runs.append(model.flat_params().tobytes())
    assert runs[0] == runs[1]


def test_step_bytes_linear_in_batch():
    ds = make_data(n=60, seed=7)
    pd = PartyData.materialize(ds, list(range(60)))
    model = build_model("mlp", ds.dims, ds.task, seed=0, hidden=5)
    fed = Federation.create(3)
    sid = fed.bus.open_session()
    sizes, costs = [4, 8, 16, 32], []
    for b in sizes:
        before = fed.bus.snapshot_stats().total_bytes
        compute_step(fed, sid, model, pd, np.arange(b))
        costs.append(fed.bus.snapshot_stats().total_bytes - before)
    per_row = (costs[1] - costs[0]) / 4
    # 3 clients x 5 activations out + back, plus one output and one gradient, 8 bytes each
    assert per_row == 8 * (2 * 3 * 5 + 2)
    for b, cost in zip(sizes, costs):
        assert cost == costs[0] + per_row * (b - sizes[0])


def test_epoch_bytes_scale_with_samples():
    ds = make_data(n=200, seed=8)
    fed = Federation.create(3)
    cfg = TrainConfig(max_epochs=1, batch_fraction=0.05)
    spent = []
    for n in (100, 200):
        pd = PartyData.materialize(ds, list(range(n)))
        before = fed.bus.snapshot_stats().total_bytes
        fit(fed, build_model("lr", ds.dims, ds.task), pd, 0.1, cfg, seed=0)
        spent.append(fed.bus.snapshot_stats().total_bytes - before)
    # 20 steps per epoch either way; the extra 100 rows each cost 8 bytes for every
    # activation and gradient value (3 clients, h=1) plus the output and its gradient
    assert spent[1] - spent[0] == 100 * 8 * (2 * 3 + 2)


def test_blobs_separation_six_train_accuracy():
    ds = core.generate_blobs(2000, 8, 2, 2, 6.0, seed=0)
    ids = list(range(2000))
    _, rep = train_until_converged(Federation.create(2), "lr", ds, ids, TrainConfig(max_epochs=40), seed=0)
    assert rep.train_metric >= 0.99
    assert len(rep.loss_curve) == rep.epochs


def test_coreset_weights_exercised():
    from vflpipe.coreset import build_coreset
    ds = core.generate_blobs(3000, 6, 3, 2, 4.0, seed=1)
    fed = Federation.create(3)
    sel = build_coreset(fed, ds, list(range(3000)), 5, seed=0).selection
    cfg = TrainConfig(max_epochs=30, lr_grid=(0.1,))
    _, weighted = train_until_converged(fed, "lr", ds, sel.ids, cfg, seed=0, weights=sel.weights)
    _, plain = train_until_converged(fed, "lr", ds, sel.ids, cfg, seed=0)
    assert weighted.epochs >= 1 and plain.epochs >= 1
    assert all(np.isfinite(weighted.loss_curve)) and all(np.isfinite(plain.loss_curve))
    assert weighted.loss_curve != plain.loss_curve


def test_max_epochs_zero():
    ds = make_data(n=50, seed=2)
    ids = list(range(50))
    _, rep = train_until_converged(Federation.create(3), "lr", ds, ids,
                                   TrainConfig(max_epochs=0, lr_grid=(0.1,)), seed=0)
    assert rep.epochs == 0 and rep.loss_curve == []
    # zero parameters predict class 0 everywhere
    assert rep.train_metric == np.mean(ds.labels.get(ids) == 0)


def test_report_determinism():
    ds = core.generate_blobs(600, 6, 3, 2, 3.0, seed=3)
    ids = list(range(600))
    reps = []
    for _ in range(2):
        _, rep = train_until_converged(Federation.create(3), "mlp", ds, ids[:400], TrainConfig(max_epochs=5),
                                       seed=2, test_ids=ids[400:])
        obj = rep.to_json()
        obj.pop("wall_s")
        reps.append(obj)
    assert reps[0] == reps[1]


def test_divergence_names_lr():
    ds = make_data(task=Task.regression(), seed=1)
    big = VerticalDataset(ds.clients, LabelTable(ds.labels.ids, ds.labels.get(range(50)) * 1e7), ds.task)
    pd = PartyData.materialize(big, list(range(50)))
    with pytest.raises(TrainingError, match="lr=0.001"):
        fit(Federation.create(3), build_model("linreg", big.dims, big.task), pd, 0.001,
            TrainConfig(max_epochs=2), seed=0)


def test_nonfinite_loss_aborts():
    ds = make_data(seed=1)
    w = np.ones(50)
    w[3] = np.nan
    pd = PartyData.materialize(ds, list(range(50)), w)
    fed = Federation.create(3)
    with pytest.raises(TrainingError, match="non-finite"):
        compute_step(fed, fed.bus.open_session(), build_model("lr", ds.dims, ds.task), pd, np.arange(50))


def test_empty_inputs_rejected():
    ds = make_data(seed=1)
    fed = Federation.create(3)
    with pytest.raises(TrainingError):
        train_until_converged(fed, "lr", ds, [], TrainConfig(), seed=0)
    with pytest.raises(TrainingError):
        evaluate(fed, build_model("lr", ds.dims, ds.task), ds, [])
    with pytest.raises(TrainingError):
        knn_predict(fed, ds, [1], [], 1)


def test_missing_id_rejected():
    ds = make_data(seed=1)
    with pytest.raises(Exception):
        PartyData.materialize(ds, [0, 999])


def test_model_kind_task_mismatch():
    with pytest.raises(TrainingError):
        build_model("linreg", [2, 2], Task())
    with pytest.raises(TrainingError):
        build_model("lr", [2, 2], Task.regression())


def test_param_dump_roundtrip_and_offline_metric():
    ds = core.generate_blobs(800, 6, 3, 2, 3.0, seed=4)
    ids = list(range(800))
    fed = Federation.create(3)
    model, rep = train_until_converged(fed, "lr", ds, ids[:560], TrainConfig(max_epochs=10), seed=0,
                                       test_ids=ids[560:])
    dump = model.dump_params()
    # offline oracle: rebuild the global linear model from the dump
    W = np.vstack([np.array(v).reshape(e["shape"]) for e, v in zip(dump["manifest"], dump["values"])
                   if e["owner"].startswith("client")])
    b = next(np.array(v) for e, v in zip(dump["manifest"], dump["values"]) if e["owner"] == "aggregator")
    preds = ((ds.concatenated(ids[560:]) @ W + b)[:, 0] > 0).astype(int)
    assert np.mean(preds == ds.labels.get(ids[560:])) == rep.test_metric
    other = build_model("lr", ds.dims, ds.task)
    other.load_params(dump)
    assert other.flat_params().tobytes() == model.flat_params().tobytes()


def test_score_definitions():
    y = np.array([0, 1, 2, 1])
    assert score(Task("classification", 3), y, y) == 1.0
    t = np.array([1.0, 2.0, 4.0, 9.0])
    assert abs(score(Task.regression(), np.full(4, t.mean()), t) - t.var()) < 1e-12


# -- KNN ------------------------------------------------------------------------

def knn_oracle(ds, queries, refs, k, weights=None):
    xq, xr = ds.concatenated(queries), ds.concatenated(refs)
    y = ds.labels.get(refs)
    out = []
    for q in xq:
        d = ((xr - q) ** 2).sum(1)
        order = sorted(range(len(refs)), key=lambda j: (d[j], refs[j]))[:k]
        votes = {}
        for j in order:
            votes[int(y[j])] = votes.get(int(y[j]), 0.0) + (1.0 if weights is None else weights[refs[j]])
        best = max(votes.values())
        out.append(min(lbl for lbl, v in votes.items() if v == best))
    return np.array(out)


def test_knn_self_query():
    ds = make_data(n=30, seed=2)
    refs = list(range(30))
    preds = knn_predict(Federation.create(3), ds, refs, refs, 1)
    np.testing.assert_array_equal(preds, ds.labels.get(refs))


def test_knn_global_majority():
    ds = make_data(n=31, seed=3)
    refs = list(range(31))
    y = ds.labels.get(refs)
    majority = int(np.argmax(np.bincount(y, minlength=2)))
    preds = knn_predict(Federation.create(3), ds, [0, 5, 9], refs, 31)
    assert list(preds) == [majority] * 3


def test_knn_tie_smaller_label():
    ids = np.arange(2, dtype=np.uint64)
    ds = VerticalDataset((core.ClientTable(1, ids, np.array([[-1.0], [1.0]])),),
                         LabelTable(ids, np.array([1, 0])), Task())
    assert list(knn_predict(Federation.create(1), ds, [0], [0, 1], 2)) == [0]


def test_knn_fifty_point_oracle():
    ds = make_data(n=50, seed=10)
    refs = list(range(50))
    preds = knn_predict(Federation.create(3), ds, refs, refs, 5)
    np.testing.assert_array_equal(preds, knn_oracle(ds, refs, refs, 5))


@settings(max_examples=10)
@given(st.integers(0, 1000), st.integers(1, 9))
def test_knn_weighted_oracle(seed, k):
    ds = make_data(n=60, task=Task("classification", 3), seed=seed)
    rng = np.random.default_rng(seed)
    refs = sorted(rng.choice(60, 30, replace=False).tolist())
    queries = [i for i in range(60) if i not in refs]
    weights = {r: float(rng.uniform(0.1, 3)) for r in refs}
    preds = knn_predict(Federation.create(3), ds, queries, refs, k, weights)
    np.testing.assert_array_equal(preds, knn_oracle(ds, queries, refs, k, weights))


def test_knn_only_scalars_leave_clients():
    ds = make_data(n=20, seed=1)
    bus = Bus(record=True)
    knn_predict(Federation.create(3, bus), ds, [0, 1], list(range(2, 20)), 3)
    partials = [e for e in bus.transcript if e.kind is Kind.KNN_PARTIAL and e.dst == AGGREGATOR]
    # one scalar per (query, reference) pair from each client
    assert all(len(e.payload) == 8 + 8 * 2 * 18 for e in partials)
    feats = {v.tobytes() for t in ds.clients for v in t.features.ravel()}
    for e in bus.transcript:
        assert not any(f in e.payload for f in list(feats)[:50])


def test_knn_k_bounds():
    ds = make_data(n=10, seed=1)
    with pytest.raises(TrainingError):
        knn_predict(Federation.create(3), ds, [0], [1, 2], 3)
