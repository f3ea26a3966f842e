import csv
import math

import numpy as np
import pytest

from hfedatm import orchestrator as orch
from hfedatm.client import DpBudget
from hfedatm.data import ClientData, DomainDataset
from hfedatm.linalg import make_rng
from hfedatm.model import ModelSpec, ModelWeights, Conv, Flatten, Linear, init_weights, reduced_lenet, sgd_step

SMALL = orch.DataConfig(per_domain=24, image_size=8)


def small_run(mode="hfedatm", seed=0, rounds=2, topo=None, **kw):
    topo = topo or orch.Topology(2, 2)
    fed = orch.build_federation(SMALL, topo, seed)
    cfg = orch.RunConfig(rounds=rounds, station_rounds=2, epochs=1, batch_size=8, mode=mode, seed=seed, **kw)
    return orch.run(cfg, topo, fed), fed


def test_single_client_avg_equals_plain_sgd():
    topo = orch.Topology(1, 1)
    fed = orch.build_federation(SMALL, topo, 3)
    cfg = orch.RunConfig(rounds=3, station_rounds=2, epochs=2, batch_size=8, mode="avg", seed=3)
    result = orch.run(cfg, topo, fed)

    w = init_weights(fed.spec, make_rng([3, 0]))
    data = fed.clients[0]
    for rnd in range(3):
        for srnd in range(2):
            rng = make_rng([3, 1, rnd, srnd, 0, 0])
            for _ in range(2):
                order = rng.permutation(len(data))
                for s in range(0, len(data), 8):
                    w, _ = sgd_step(w, data.x[order[s:s + 8]], data.y[order[s:s + 8]], cfg.lr_at(rnd))
    for n in w.names():
        np.testing.assert_array_equal(result.final.params[n], w.params[n])


def test_identical_stations_merge_to_their_common_model():
    base = orch.build_federation(SMALL, orch.Topology(1, 1), 0)
    topo = orch.Topology(3, 1)
    fed = orch.Federation([ClientData(i, base.clients[0].x, base.clients[0].y, base.clients[0].domains)
                           for i in range(3)], base.target, base.spec, base.partition_counts)
    n = len(base.clients[0])
    cfg = orch.RunConfig(rounds=1, station_rounds=1, epochs=2, batch_size=n, mode="hfedatm", seed=0)
    result = orch.run(cfg, topo, fed)
    for p in result.packages:
        assert result.final.allclose(p.model, 1e-8)


def test_run_is_deterministic_and_modes_share_client_work():
    a, _ = small_run("hfedatm")
    b, _ = small_run("hfedatm")
    c, _ = small_run("avg")
    assert [r.target_acc for r in a.records] == [r.target_acc for r in b.records]
    assert a.final.checksum() == b.final.checksum()
    assert a.records[0].station_checksum == c.records[0].station_checksum
    assert a.records[1].station_checksum != c.records[1].station_checksum  # Steps 3-4 differ


def test_threads_do_not_change_results():
    a, _ = small_run(workers=1)
    b, _ = small_run(workers=3)
    assert a.final.checksum() == b.final.checksum()


def test_records_are_well_formed():
    res, _ = small_run(rounds=3)
    assert [r.round for r in res.records] == [0, 1, 2]
    for r in res.records:
        assert 0.0 <= r.target_acc <= 1.0
        assert r.breadth_post <= r.breadth_pre + 1e-12
        assert len(r.station_losses) == 2


def test_partial_participation_and_dp_run():
    res, _ = small_run(topo=orch.Topology(2, 3, active_fraction=0.5), dp=DpBudget(1.0, 1e-5, 1.0))
    assert all(p.active_clients == 2 for p in res.packages)
    for p in res.packages:
        for g in p.grams.values():
            assert g.dp == (1.0, 1e-5) and g.clipped


def test_all_clients_diverging_aborts():
    topo = orch.Topology(1, 2)
    fed = orch.build_federation(SMALL, topo, 0)
    w = init_weights(fed.spec, make_rng(0))
    bad = w.replace(**{"9.bias": np.array([np.inf, 0.0, 0.0, 0.0])})
    with np.errstate(all="ignore"), pytest.raises(orch.RunAborted):
        orch.run(orch.RunConfig(rounds=1, station_rounds=1, epochs=1, batch_size=8), topo, fed, init=bad)


def _target(x, y):
    return DomainDataset(9, x, y, 0, (1.0,), 0.0)


def test_evaluate_oracle_model_is_perfect():
    spec = ModelSpec((Conv(1, 1, 1), Flatten(), Linear(2, 2)), (1, 1, 2), 2)
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, size=50)
    x = np.zeros((50, 1, 1, 2))
    x[np.arange(50), 0, 0, y] = rng.uniform(0.5, 2.0, size=50)
    w = ModelWeights(spec, {"0.weight": np.ones((1, 1, 1, 1)), "2.weight": np.eye(2), "2.bias": np.zeros(2)})
    assert orch.evaluate(w, _target(x, y)) == 1.0
    perm = rng.permutation(50)
    assert orch.evaluate(w, _target(x[perm], y[perm])) == 1.0


def test_evaluate_random_model_near_chance():
    spec = reduced_lenet((3, 8, 8), num_classes=4)
    n, k = 4000, 4
    rng = np.random.default_rng(1)
    x = rng.normal(size=(n, 3, 8, 8))
    y = rng.permutation(np.arange(n) % k)  # labels independent of inputs
    accs = [orch.evaluate(init_weights(spec, make_rng(s)), _target(x, y)) for s in range(3)]
    bound = 3 * math.sqrt((1 / k) * (1 - 1 / k) / n)
    assert all(abs(a - 1 / k) <= bound for a in accs)
    with pytest.raises(ValueError):
        orch.evaluate(init_weights(spec, make_rng(0)), _target(x[:0], y[:0]))


def test_overhead_measurement():
    topo = orch.Topology(1, 1)
    fed = orch.build_federation(SMALL, topo, 0)
    ov = orch.measure_overhead(orch.RunConfig(rounds=5, station_rounds=1, epochs=1, batch_size=8), topo, fed)
    assert ov.seconds_avg > 0 and abs(ov.overhead) < 0.5
    with pytest.raises(ValueError):
        orch.measure_overhead(orch.RunConfig(rounds=2), topo, fed)


def test_metrics_csv(tmp_path):
    res, _ = small_run()
    path = tmp_path / "m.csv"
    orch.write_metrics_csv(res.records, path)
    orch.write_metrics_csv(res.records, path, append=True)
    rows = list(csv.DictReader(open(path)))
    assert tuple(rows[0]) == orch.METRICS_COLUMNS
    assert len(rows) == 4 and rows[0]["t_train_s"] == ""
    orch.write_metrics_csv(res.records, path, timings=True)
    assert float(next(csv.DictReader(open(path)))["t_train_s"]) > 0
    orch.write_timings_csv(res.records, tmp_path / "t.csv")
    assert next(csv.DictReader(open(tmp_path / "t.csv")))["t_round_s"]


def test_config_validation():
    with pytest.raises(ValueError):
        orch.RunConfig(rounds=0)
    with pytest.raises(ValueError):
        orch.RunConfig(mode="sum")
    with pytest.raises(ValueError):
        orch.Topology(0, 1)
    cos = orch.RunConfig(rounds=4, lr=1.0)
    assert cos.lr_at(0) == 1.0 and cos.lr_at(2) == pytest.approx(0.5)
