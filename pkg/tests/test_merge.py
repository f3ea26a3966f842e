import ast
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hfedatm import fot, merge
from hfedatm.client import ClientUpdate, GramStat
from hfedatm.linalg import make_rng
from hfedatm.model import ArchitectureMismatchError, ModelWeights, init_weights, reduced_lenet, \
    load_checkpoint, save_checkpoint
from oracles import regmean_gd, regmean_loss, shuffle_lenet, weighted_mean_elementwise

SPEC = reduced_lenet()


def _w(seed):
    return init_weights(SPEC, make_rng(seed))


def _upd(cid, w, n):
    return ClientUpdate(0, cid, w, [], n)


def _psd(rng, d, m=None):
    x = rng.normal(size=(m or 2 * d, d))
    return x.T @ x


def test_station_aggregate_cases():
    a = _w(0)
    single = merge.station_aggregate([_upd(0, a, 5)])
    assert single.allclose(a, 0.0)
    neg = ModelWeights(SPEC, {k: -v for k, v in a.params.items()})
    zero = merge.station_aggregate([_upd(0, a, 3), _upd(1, neg, 3)])
    assert all(np.all(v == 0) for v in zero.params.values())


def test_station_aggregate_matches_elementwise_oracle():
    ws = [_w(s) for s in range(3)]
    out = merge.station_aggregate([_upd(2, ws[2], 3), _upd(0, ws[0], 1), _upd(1, ws[1], 2)])
    for name in ["0.weight", "9.weight", "9.bias"]:
        oracle = weighted_mean_elementwise([w.params[name] for w in ws], [1, 2, 3])
        np.testing.assert_allclose(out.params[name], oracle, atol=1e-12, rtol=0)


def test_station_aggregate_rejects_mixed_architectures():
    other = init_weights(reduced_lenet(hidden=16), make_rng(0))
    with pytest.raises(ArchitectureMismatchError):
        merge.station_aggregate([_upd(0, _w(0), 1), _upd(1, other, 1)])


def test_station_gram_and_shrink():
    g = _psd(np.random.default_rng(0), 4)
    np.testing.assert_array_equal(merge.station_gram([g, g]), g)
    np.testing.assert_allclose(merge.station_gram([g, 3 * g]), 2 * g)
    out = merge.station_gram([g, _psd(np.random.default_rng(1), 4)])
    np.testing.assert_array_equal(out, out.T)
    with pytest.raises(ValueError):
        merge.station_gram([np.eye(2), np.eye(3)])

    np.testing.assert_array_equal(merge.shrink(g, 1.0), g)
    np.testing.assert_array_equal(merge.shrink(g, 0.0), np.diag(np.diag(g)))
    np.testing.assert_allclose(merge.shrink(np.array([[4.0, 2.0], [2.0, 4.0]]), 0.75), [[4, 1.5], [1.5, 4]])
    for a in (0.0, 0.3, 1.0):
        np.testing.assert_array_equal(np.diag(merge.shrink(g, a)), np.diag(g))
    np.testing.assert_array_equal(merge.shrink(merge.shrink(g, 0.0), 0.0), merge.shrink(g, 0.0))
    assert not np.allclose(merge.shrink(merge.shrink(g, 0.5), 0.5), merge.shrink(g, 0.5))
    with pytest.raises(ValueError):
        merge.shrink(g, 1.5)


def test_conv_merge_cases():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 4, 2, 3, 3))
    np.testing.assert_allclose(merge.conv_merge([a, b], [1, 1]), (a + b) / 2)
    np.testing.assert_array_equal(merge.conv_merge([a], [3]), a)
    np.testing.assert_array_equal(merge.conv_merge([a, b], [1, 0]), a)
    np.testing.assert_array_equal(merge.conv_merge([a, a, a], [1, 2, 3]), a)
    with pytest.raises(ValueError):
        merge.conv_merge([a, b], [0, 0])


def test_regmean_single_and_identity():
    rng = np.random.default_rng(0)
    g, w = _psd(rng, 4), rng.normal(size=(4, 3))
    np.testing.assert_allclose(merge.regmean_solve([g], [w]).weight, w, atol=1e-12)
    ws = [rng.normal(size=(4, 3)) for _ in range(3)]
    np.testing.assert_allclose(merge.regmean_solve([np.eye(4)] * 3, ws).weight, sum(ws) / 3, atol=1e-14)
    np.testing.assert_allclose(merge.regmean_solve([g] * 3, ws).weight, sum(ws) / 3, atol=1e-10)


def test_regmean_two_station_diagonal_case():
    rng = np.random.default_rng(5)
    g1, g2 = np.diag([2.0, 1.0]), np.diag([1.0, 2.0])
    w1, w2 = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    out = merge.regmean_solve([g1, g2], [w1, w2]).weight
    analytic = np.linalg.inv(g1 + g2) @ (g1 @ w1 + g2 @ w2)
    np.testing.assert_allclose(out, analytic, atol=1e-12)
    np.testing.assert_allclose(out, regmean_gd([g1, g2], [w1, w2]), atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 5), st.integers(0, 10_000))
def test_regmean_beats_mean_and_members(d, stations, seed):
    rng = np.random.default_rng(seed)
    grams = [merge.shrink(_psd(rng, d, m=int(rng.integers(1, 2 * d + 1))), 0.75) + 1e-3 * np.eye(d)
             for _ in range(stations)]
    ws = [rng.normal(size=(d, 3)) for _ in range(stations)]
    out = merge.regmean_solve(grams, ws).weight
    best = merge.regmean_objective(out, grams, ws)
    assert best == pytest.approx(regmean_loss(out, grams, ws), rel=1e-9, abs=1e-12)
    tol = 1e-9 * (1 + best)
    assert best <= merge.regmean_objective(sum(ws) / stations, grams, ws) + tol
    for w in ws:
        assert best <= merge.regmean_objective(w, grams, ws) + tol


def test_regmean_station_order_invariant():
    rng = np.random.default_rng(2)
    grams = [_psd(rng, 5) for _ in range(3)]
    ws = [rng.normal(size=(5, 2)) for _ in range(3)]
    a = merge.regmean_solve(grams, ws).weight
    b = merge.regmean_solve(grams[::-1], ws[::-1]).weight
    np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_array_equal(a, merge.regmean_solve(grams, ws).weight)


def test_regmean_rejects_asymmetric():
    with pytest.raises(ValueError):
        merge.regmean_solve([np.array([[1.0, 2.0], [0.0, 1.0]])], [np.ones((2, 1))])


def _package(sid, w, seed, clients=3):
    rng = np.random.default_rng(seed)
    grams = {l: GramStat(l, merge.shrink(_psd(rng, SPEC.layers[l].d_in, 300), 0.75), 32, shrunk=True, alpha=0.75)
             for l in SPEC.linear_layers()}
    return merge.StationPackage(sid, w, grams, clients)


def test_assemble_from_one_station_and_round_trip(tmp_path):
    w = _w(3)
    conv = {l: w.params[f"{l}.weight"] for l in SPEC.conv_layers()}
    lin = {l: w.params[f"{l}.weight"] for l in SPEC.linear_layers()}
    bias = {l: w.params[f"{l}.bias"] for l in SPEC.linear_layers()}
    out = merge.assemble_global(SPEC, conv, lin, bias)
    assert out.allclose(w, 0.0) and out.fingerprint == SPEC.fingerprint()
    save_checkpoint(out, tmp_path / "m.hfam")
    assert load_checkpoint(tmp_path / "m.hfam").allclose(out, 0.0)
    with pytest.raises(ArchitectureMismatchError):
        merge.assemble_global(SPEC, conv, {}, bias)


def test_merge_identical_stations_is_identity():
    w = _w(4)
    pk = [_package(i, w, 0) for i in range(3)]
    merged, report = merge.merge_hfedatm(pk)
    assert merged.allclose(w, 1e-8)
    assert report.breadth_pre == pytest.approx(0.0, abs=1e-15)
    assert len(report.layers) == len(SPEC.conv_layers()) + len(SPEC.linear_layers())


def test_merge_undoes_permuted_clone():
    w = _w(5)
    rng = np.random.default_rng(1)
    clone = ModelWeights(SPEC, shuffle_lenet(w.params, rng.permutation(8), rng.permutation(16), 9))
    base = _package(0, w, 0)
    # the clone's Gram is the same statistic with its input rows shuffled like its weights
    al = fot.align_station(w, clone)
    inv = np.argsort(al.linear_input_perms[7])
    grams = dict(base.grams)
    grams[7] = GramStat(7, base.grams[7].g[np.ix_(inv, inv)], 32, shrunk=True, alpha=0.75)
    merged, report = merge.merge_hfedatm([base, merge.StationPackage(1, clone, grams, 3)])
    assert merged.allclose(w, 1e-8)
    assert report.breadth_post <= report.breadth_pre


def test_merge_average_is_gamma_weighted():
    a, b = _w(0), _w(1)
    merged, report = merge.merge_average([_package(0, a, 0, 1), _package(1, b, 1, 3)])
    np.testing.assert_allclose(merged.params["0.weight"], (a.params["0.weight"] + 3 * b.params["0.weight"]) / 4)
    assert report.jitter_count == 0
    uniform, _ = merge.merge_average([_package(0, a, 0, 1), _package(1, b, 1, 3)], gamma="uniform")
    np.testing.assert_allclose(uniform.params["9.bias"], (a.params["9.bias"] + b.params["9.bias"]) / 2)


def test_station_and_server_code_never_touch_samples():
    """Aggregation code receives models and Grams only: no sample tensors, no data module."""
    src = Path(merge.__file__).read_text()
    tree = ast.parse(src)
    imported = {n.module for n in ast.walk(tree) if isinstance(n, ast.ImportFrom)}
    assert not any(m and m.endswith("data") for m in imported)
    for name in ("StationPackage",):
        fields = getattr(merge, name).__dataclass_fields__
        assert set(fields) == {"station_id", "model", "grams", "active_clients"}
    for fn in (merge.merge_hfedatm, merge.merge_average, merge.build_station_package):
        args = fn.__code__.co_varnames[:fn.__code__.co_argcount]
        assert not any(a in ("x", "y", "data", "samples", "batch") for a in args)
    fot_tree = ast.parse(Path(fot.__file__).read_text())
    assert not any(isinstance(n, ast.ImportFrom) and n.module and n.module.endswith("data")
                   for n in ast.walk(fot_tree))


def test_singular_gram_sum_keeps_shared_weights():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 6))
    x[:, 4:] = 0.0  # two inputs never active
    g = merge.shrink(x.T @ x, 0.75)
    w = rng.normal(size=(6, 2))
    res = merge.regmean_solve([g, g], [w, w.copy()])
    assert res.jitter > 0
    np.testing.assert_allclose(res.weight, w, atol=1e-8)
    # inactive rows fall back to the anchor, active ones still follow the Grams
    w2 = rng.normal(size=(6, 2))
    out = merge.regmean_solve([g, g], [w, w2], anchor=(w + w2) / 2).weight
    np.testing.assert_allclose(out[4:], ((w + w2) / 2)[4:], atol=1e-8)
