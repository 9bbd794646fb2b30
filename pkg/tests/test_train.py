import json
import math

import numpy as np
import pytest
from sklearn.base import clone

from osrgnn.datagen import NoiseConfig, build_base_case, sample_context
from osrgnn.h2mg import make_grid, toy_grid
from osrgnn.powerlp import exchange_capacity
from osrgnn.train import (
    SwitchingPolicy, TrainConfig, decide, ensemble_choice, ensemble_decide, evaluate, histograms, mean_capacity,
    train,
)

FOUR = build_base_case("four_substations")


def contexts(n, stream, prefix):
    return [sample_context(FOUR, NoiseConfig(), np.random.default_rng([5, stream, i]), f"{prefix}{i}")
            for i in range(n)]


@pytest.fixture(scope="module")
def data():
    return contexts(6, 0, "tr"), contexts(3, 1, "va")


def quick(estimator="mt", **kw):
    base = dict(max_iter=4, val_period=2, n_samples=4, batch_size=2, n_knots=10, seed=0)
    return TrainConfig.preset(estimator, **{**base, **kw})


def strip_time(history):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in history]


# -- config -------------------------------------------------------------------------


def test_presets():
    assert TrainConfig.preset("fmc").tau == 20.0 and TrainConfig.preset("fmc").beta == 0.1
    assert TrainConfig.preset("mt").beta == 1.0
    assert TrainConfig.preset("mt").n_samples == 32 and TrainConfig.preset("mt").batch_size == 8
    assert TrainConfig.preset("mt").sampling.mode == "perturb"


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(estimator="sgd")
    with pytest.raises(ValueError):
        TrainConfig(estimator="fmc", tau=None)
    with pytest.raises(ValueError):
        TrainConfig(n_samples=0)
    with pytest.raises(ValueError):
        TrainConfig.preset("adam")


# -- training loop -----------------------------------------------------------------


@pytest.mark.parametrize("estimator", ["mt", "fmc", "mc"])
def test_same_seed_same_log(data, estimator):
    tr, va = data
    a = train(quick(estimator), tr, va)
    b = train(quick(estimator), tr, va)
    assert strip_time(a.history) == strip_time(b.history)
    for k in a.model.params:
        assert np.array_equal(a.model.params[k], b.model.params[k])


def test_single_validation_when_period_exceeds_run(data):
    tr, va = data
    res = train(quick(val_period=100), tr, va)
    assert [it for it, _ in res.validations] == [4]
    assert res.best_iteration == 4


def test_best_validation_is_retained(data):
    tr, va = data
    res = train(quick(max_iter=6, val_period=1), tr, va)
    assert res.best_val_capacity == max(c for _, c in res.validations)
    first_best = next(it for it, c in res.validations if c == res.best_val_capacity)
    assert res.best_iteration == first_best
    dec = [decide(res, g) for g in va]
    assert mean_capacity(va, dec) == pytest.approx(res.best_val_capacity)


def test_outputs_written(data, tmp_path):
    tr, va = data
    res = train(quick(), tr, va, out_dir=tmp_path)
    lines = (tmp_path / "train_log.ndjson").read_text().splitlines()
    assert len(lines) == 4
    assert {"iteration", "mean_best_f", "entropy", "val_capacity", "wall_time"} <= set(json.loads(lines[0]))
    assert (tmp_path / "best.npz").exists() and (tmp_path / "memory.json").exists()
    assert decide(tmp_path / "best.npz", va[0]).tolist() == decide(res, va[0]).tolist()


def test_memory_table_holds_sampled_best(data):
    tr, va = data
    res = train(quick(max_iter=3), tr, va)
    for cid, y, f in res.memory.items():
        g = next(g for g in tr if g.context_id == cid)
        closed = exchange_capacity(g).objective
        assert f <= closed + 1e-9
        assert exchange_capacity(g, y).objective == pytest.approx(f)


def test_empty_sets_rejected(data):
    tr, va = data
    with pytest.raises(ValueError):
        train(quick(), [], va)
    with pytest.raises(ValueError):
        train(quick(), tr + tr[:1], va)


def test_estimator_wrapper(data, tmp_path):
    tr, va = data
    est = SwitchingPolicy(max_iter=2, val_period=1, n_samples=4, batch_size=2, n_knots=10)
    assert clone(est).get_params()["max_iter"] == 2
    est.fit(tr, X_val=va)
    pred = est.predict(va)
    assert len(pred) == 3 and all(len(y) == FOUR.grid.n_switches for y in pred)
    assert est.score(va) == pytest.approx(mean_capacity(va, pred))
    est.save(tmp_path / "p.npz")
    back = SwitchingPolicy.load(tmp_path / "p.npz")
    assert back.get_params() == est.get_params()
    assert [y.tolist() for y in back.predict(va)] == [y.tolist() for y in pred]


# -- ensemble ---------------------------------------------------------------------------


def two_feeder():
    switches = [{"port_of": 1, "port_ot": 0, "substation_id": "A"}, {"port_of": 2, "port_ot": 0, "substation_id": "A"}]
    lines = [{"port_of": 1, "port_ot": 3, "F_bar": 100.0, "X": 0.1, "S": 1},
             {"port_of": 2, "port_ot": 3, "F_bar": 100.0, "X": 0.1, "S": 1}]
    loads = [{"port_o": 3, "P": 100.0, "in_Z1": 0, "in_Z2": 1}]
    return make_grid(range(4), [{"port_o": 0, "P": 100.0, "in_Z1": 1, "in_Z2": 0}], loads, switches, lines, "tf")


def test_ensemble_prefers_strictly_better_fmc():
    g = two_feeder()
    # closed: capacity 200 (f = -200); one feeder open: capacity 100 (f = -100)
    y, who = ensemble_choice(g, [1, 1], [1, 0])
    assert who == "fmc" and y.tolist() == [1, 1]


def test_ensemble_tie_goes_to_mt():
    g = two_feeder()
    y, who = ensemble_choice(g, [0, 1], [1, 0])
    assert who == "mt" and y.tolist() == [1, 0]


def test_ensemble_infeasible_member_loses():
    loads = [{"port_o": 1, "P": 100.0, "in_Z1": 0, "in_Z2": 1}, {"port_o": 2, "P": 20.0, "in_Z1": 1, "in_Z2": 0}]
    g = make_grid(range(3), [{"port_o": 0, "P": 100.0, "in_Z1": 1, "in_Z2": 0}], loads,
                  [{"port_of": 1, "port_ot": 2, "substation_id": "s"}],
                  [{"port_of": 0, "port_ot": 1, "F_bar": 150.0, "X": 0.1, "S": 1}])
    y, who = ensemble_choice(g, [0], [1])
    assert who == "mt" and y.tolist() == [1]
    y, who = ensemble_choice(g, [1], [0])
    assert who == "fmc"
    y, who = ensemble_choice(g, [0], [0])
    assert who == "closed" and y.tolist() == [1]


def test_ensemble_equals_best_member(data):
    tr, va = data
    a = train(quick("mt", seed=1), tr, va)
    b = train(quick("fmc", seed=2), tr, va)
    for g in va:
        caps = [exchange_capacity(g, decide(r, g)) for r in (b, a)]
        best = max(c.capacity if c.feasible else -math.inf for c in caps)
        res = exchange_capacity(g, ensemble_decide(b, a, g))
        if best > -math.inf:
            assert res.capacity == pytest.approx(best)


# -- evaluation -------------------------------------------------------------------------


def test_all_closed_against_itself():
    gs = contexts(5, 3, "ev")
    closed = {g.context_id: g.all_closed() for g in gs}
    solver = {g.context_id: exchange_capacity(g).capacity * 1.1 for g in gs}
    s = evaluate(closed, gs, solver=solver).summary()
    assert s["mean_improvement_pct"] == 0.0
    assert s["mean_normalized"] == 0.0
    assert s["mean_openings"] == 0.0
    assert s["never_used"] == FOUR.grid.n_switches


def test_exclusion_when_solver_not_better():
    gs = [two_feeder().with_context_id(f"t{i}") for i in range(3)]
    dec = {g.context_id: np.array([1, 1]) for g in gs}
    ref = {"t0": np.array([1, 1]), "t1": 150.0, "t2": 250.0}
    rows = {r.context_id: r for r in evaluate(dec, gs, solver=ref).rows}
    assert rows["t0"].excluded and math.isnan(rows["t0"].normalized)
    assert rows["t1"].excluded
    assert not rows["t2"].excluded and rows["t2"].normalized == 0.0


def test_normalized_score_is_one_for_reference_decisions():
    rng = np.random.default_rng(0)
    gs = contexts(4, 4, "nr")
    dec = {}
    for g in gs:
        y = g.all_closed()
        y[rng.choice(g.n_switches, size=2, replace=False)] = 0
        dec[g.context_id] = y
    report = evaluate(dec, gs, solver=dec)
    for r in report.rows:
        assert r.excluded or r.normalized == pytest.approx(1.0)


def test_usage_percentage_counts_openings():
    gs = [toy_grid().with_context_id(f"u{i}") for i in range(100)]
    dec = {g.context_id: np.array([1, 1, 1, 0 if i < 4 else 1]) for i, g in enumerate(gs)}
    report = evaluate(dec, gs)
    assert report.usage_pct[3] == pytest.approx(4.0)
    assert report.summary()["never_used"] == 3


def test_evaluate_is_order_invariant():
    gs = contexts(6, 5, "pi")
    rng = np.random.default_rng(1)
    dec = {g.context_id: (rng.random(g.n_switches) > 0.1).astype(int) for g in gs}
    a = evaluate(dec, gs).summary()
    b = evaluate(dec, gs[::-1]).summary()
    for k in a:
        assert a[k] == pytest.approx(b[k], nan_ok=True)


def test_missing_reference_raises():
    gs = contexts(2, 6, "mr")
    dec = {g.context_id: g.all_closed() for g in gs}
    with pytest.raises(KeyError):
        evaluate(dec, gs, solver={gs[0].context_id: 1.0})
    with pytest.raises(KeyError):
        evaluate({}, gs)


def test_csv_and_histograms(tmp_path):
    gs = contexts(4, 7, "cs")
    dec = {g.context_id: g.all_closed() for g in gs}
    report = evaluate(dec, gs)
    report.write_csv(tmp_path / "m.csv")
    text = (tmp_path / "m.csv").read_text().splitlines()
    assert text[0].startswith("# schema-version")
    assert text[1].startswith("context_id,")
    assert text[-1].startswith("summary,")
    assert (tmp_path / "m_usage.csv").read_text().startswith("# schema-version")
    h = histograms(report, bins=5)
    assert set(h) == {"capacity_pu", "delta_closed_pu", "delta_solver_pu", "normalized", "openings", "usage_pct"}
    assert h["capacity_pu"][1].sum() == 4
