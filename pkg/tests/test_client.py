import math

import numpy as np
import pytest

from hfedatm.client import (DpBudget, FedAvgLocal, FedProxLocal, GramStat, PrivacyPreconditionError,
                            ambiguity_residual, clip_gram, dp_noise_gram, gram_from_activations, load_grams,
                            load_update, make_algorithm, privatize, random_orthogonal, save_grams, save_update,
                            train_local)
from hfedatm.data import ClientData
from hfedatm.linalg import make_rng
from hfedatm.model import init_weights, reduced_lenet
from oracles import power_iteration


def _client(n=40, seed=0):
    rng = np.random.default_rng(seed)
    return ClientData(0, rng.normal(size=(n, 3, 8, 8)), np.arange(n) % 3, np.zeros(n, dtype=np.int64))


SPEC = reduced_lenet((3, 8, 8), num_classes=3, conv1=4, conv2=6, hidden=10)


def _psd(rng, n):
    a = rng.normal(size=(n, n))
    return a @ a.T


def test_lr_zero_keeps_weights_and_captures_grams():
    w = init_weights(SPEC, make_rng(0))
    upd = train_local(w, _client(), FedAvgLocal(), 1, 16, 0.0, make_rng(1))
    for n in w.names():
        np.testing.assert_array_equal(upd.weights.params[n], w.params[n])
    assert [g.layer_id for g in upd.grams] == SPEC.linear_layers()
    for g in upd.grams:
        assert g.batch_size == 16
        assert np.abs(g.g - g.g.T).max() <= 1e-9
        assert np.linalg.eigvalsh(g.g).min() >= -1e-8 * max(1.0, np.abs(g.g).max())


def test_gram_of_orthonormal_columns_is_identity():
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(10, 4)))
    np.testing.assert_allclose(gram_from_activations(7, q).g, np.eye(4), atol=1e-10)


def test_fedprox_mu_zero_equals_fedavg():
    w = init_weights(SPEC, make_rng(0))
    a = train_local(w, _client(), FedAvgLocal(), 2, 8, 0.1, make_rng(3))
    b = train_local(w, _client(), FedProxLocal(0.0), 2, 8, 0.1, make_rng(3))
    for n in w.names():
        np.testing.assert_array_equal(a.weights.params[n], b.weights.params[n])
    for ga, gb in zip(a.grams, b.grams):
        np.testing.assert_array_equal(ga.g, gb.g)


def test_training_is_deterministic():
    w = init_weights(SPEC, make_rng(0))
    a = train_local(w, _client(), FedAvgLocal(), 2, 8, 0.1, make_rng(3))
    b = train_local(w, _client(), FedAvgLocal(), 2, 8, 0.1, make_rng(3))
    assert a.weights.checksum() == b.weights.checksum()
    assert a.loss == b.loss


def test_prox_pulls_toward_anchor():
    w = init_weights(SPEC, make_rng(0))
    ratios = []
    for seed in range(5):
        data = _client(seed=seed)
        plain = train_local(w, data, FedAvgLocal(), 3, 8, 0.1, make_rng(seed))
        prox = train_local(w, data, FedProxLocal(1.0), 3, 8, 0.1, make_rng(seed))
        ratios.append(prox.weights.distance(w) - plain.weights.distance(w))
    assert np.median(ratios) <= 0


def test_divergence_is_flagged():
    w = init_weights(SPEC, make_rng(0))
    bad = w.replace(**{"9.bias": np.array([np.inf, 0.0, 0.0])})
    with np.errstate(all="ignore"):
        upd = train_local(bad, _client(), FedAvgLocal(), 1, 8, 0.1, make_rng(0))
    assert upd.diverged and upd.grams == []


def test_unknown_algorithm():
    with pytest.raises(ValueError):
        make_algorithm("fedsr")
    assert make_algorithm("fedprox", mu=0.5).mu == 0.5


def test_clip_cases():
    g = GramStat(1, np.diag([0.5, 0.2]), 4)
    out = clip_gram(g, 1.0)
    np.testing.assert_array_equal(out.g, g.g)
    assert out.clipped and out.clip_bound == 1.0
    np.testing.assert_allclose(clip_gram(GramStat(1, 4.0 * np.eye(3), 4), 2.0).g, 2.0 * np.eye(3))


def test_clip_random_psd_against_power_iteration():
    rng = np.random.default_rng(5)
    g = _psd(rng, 6)
    c = np.linalg.norm(g, 2) / 3
    out = clip_gram(GramStat(1, g, 4), c)
    lam, v = power_iteration(out.g)
    assert abs(lam - c) <= 1e-8
    _, v0 = power_iteration(g)
    assert abs(abs(v @ v0) - 1.0) <= 1e-8
    # eigenvectors unchanged: the clipped matrix commutes with the original
    np.testing.assert_allclose(out.g @ g, g @ out.g, atol=1e-8 * np.abs(g).max() ** 2)


def test_dp_noise_contract():
    g = clip_gram(GramStat(1, _psd(np.random.default_rng(0), 4), 4), 1.0)
    same = dp_noise_gram(g, DpBudget(), make_rng(0))
    np.testing.assert_array_equal(same.g, g.g)
    noisy = dp_noise_gram(g, DpBudget(1.0, 1e-5, 1.0), make_rng(9))
    np.testing.assert_array_equal(noisy.g, noisy.g.T)
    assert noisy.dp == (1.0, 1e-5)
    with pytest.raises(PrivacyPreconditionError):
        dp_noise_gram(GramStat(1, np.eye(2), 4), DpBudget(1.0, 1e-5, 1.0), make_rng(0))


def test_dp_noise_std_monte_carlo():
    budget = DpBudget(1.0, 1e-5, 1.0)
    sigma = math.sqrt(2 * math.log(1.25 / 1e-5))
    assert budget.sigma() == pytest.approx(sigma)
    g = clip_gram(GramStat(1, np.zeros((3, 3)), 4), 1.0)
    rng = make_rng(42)
    samples = np.array([dp_noise_gram(g, budget, rng).g for _ in range(1000)])
    for i, j in [(0, 0), (0, 1), (1, 2), (2, 2)]:
        assert abs(samples[:, i, j].std() - sigma) <= 0.05 * sigma


def test_privatize_paths():
    grams = [GramStat(1, 9.0 * np.eye(2), 4)]
    assert privatize(grams, None, make_rng(0)) is grams
    clipped_only = privatize(grams, DpBudget(math.inf, 1e-5, 1.0), make_rng(0))[0]
    np.testing.assert_allclose(clipped_only.g, np.eye(2))


def test_gram_and_update_files(tmp_path):
    w = init_weights(SPEC, make_rng(0))
    upd = train_local(w, _client(), FedAvgLocal(), 1, 8, 0.05, make_rng(0), station_id=2)
    upd.grams = privatize(upd.grams, DpBudget(4.0, 1e-5, 1.0), make_rng(1))
    save_grams(upd.grams, tmp_path / "g.hfgm")
    back = load_grams(tmp_path / "g.hfgm")
    for a, b in zip(upd.grams, back):
        np.testing.assert_array_equal(a.g, b.g)
        assert a.flags() == b.flags()
    save_update(upd, tmp_path / "u.hfup")
    u2 = load_update(tmp_path / "u.hfup")
    assert (u2.station_id, u2.client_id, u2.num_samples) == (2, 0, 40)
    assert u2.weights.checksum() == upd.weights.checksum()


def test_ambiguity_residual_orthogonal_sample_mixing():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(12, 5))
    q = random_orthogonal(rng, 12)
    np.testing.assert_allclose(q.T @ q, np.eye(12), atol=1e-12)
    assert ambiguity_residual(x, q) <= 1e-10
    assert not np.allclose(q @ x, x)  # different activations, same Gram
    with pytest.raises(ValueError):
        ambiguity_residual(x, np.eye(5))
