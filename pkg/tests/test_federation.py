import numpy as np
import pytest

from saleak.attack import FishingServer
from saleak.errors import ConfigError
from saleak.federation import (ClientBatch, ClientDataset, FederationState, RoundConfig, client_local_step,
                               draw_batch, label_counts, load_round, partition, run_round, sample_round_clients,
                               save_round, server_update)
from saleak.nn import GradientSet, fcn3, sum_gradients


def make_state(rng, n_clients=8, n=400, dim=12, n_classes=5, model=None):
    x = rng.standard_normal((n, dim))
    y = rng.integers(0, n_classes, n)
    model = model or fcn3(dim, n_classes, (10, 8), rng)
    return FederationState(model, partition(x, y, n_clients, n_classes, rng), n_classes)


def test_sample_round_clients_forced_and_deterministic():
    assert sample_round_clients(1, 1, 0) == [0]
    assert sample_round_clients(100, 5, 7) == sample_round_clients(100, 5, 7)
    with pytest.raises(ConfigError):
        sample_round_clients(3, 4, 0)


def test_sample_round_clients_frequencies():
    rng = np.random.default_rng(0)
    draws = 10_000
    hits = np.zeros(10)
    for _ in range(draws):
        hits[sample_round_clients(10, 3, rng)] += 1
    p = 0.3
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(hits - draws * p) <= 5 * sigma)


def test_partition_covers_everything(rng):
    y = rng.integers(0, 4, 100)
    parts = partition(np.arange(100)[:, None], y, 7, 4, rng)
    got = np.sort(np.concatenate([p.samples[:, 0] for p in parts]))
    assert np.array_equal(got, np.arange(100))


def test_dirichlet_partition_skews_labels(rng):
    y = rng.integers(0, 4, 2000)
    parts = partition(np.zeros((2000, 1)), y, 10, 4, rng, alpha=0.1)
    shares = [label_counts(p.labels, 4).max() / len(p) for p in parts if len(p) > 20]
    assert np.mean(shares) > 0.6
    with pytest.raises(ConfigError):
        partition(np.zeros((10, 1)), np.zeros(10), 2, 1, rng, alpha=0.0)


def test_draw_batch_replaces_only_when_short(rng):
    ds = ClientDataset(0, np.arange(5)[:, None].astype(float), np.arange(5) % 2)
    b = draw_batch(ds, 5, 2, rng)
    assert sorted(b.inputs[:, 0]) == [0, 1, 2, 3, 4]
    assert draw_batch(ds, 9, 2, rng).size == 9
    assert b.true_counts.tolist() == [3, 2]


def test_identical_samples_match_single_sample(small_fcn, rng):
    x = rng.standard_normal((1, 12))
    one = client_local_step(small_fcn, ClientBatch(x, np.array([2]), None))
    many = client_local_step(small_fcn, ClientBatch(np.repeat(x, 6, 0), np.full(6, 2), None))
    np.testing.assert_allclose(many.flatten(), one.flatten(), atol=1e-15)


def test_two_sample_batch_is_mean_of_singles(small_cnn, rng):
    # batch norm couples samples, so use the fully connected net for this identity
    model = fcn3(6, 3, (5, 4), rng)
    x = rng.standard_normal((2, 6))
    pair = client_local_step(model, ClientBatch(x, np.array([0, 2]), None))
    singles = [client_local_step(model, ClientBatch(x[i : i + 1], np.array([c]), None)) for i, c in enumerate([0, 2])]
    np.testing.assert_allclose(pair.flatten(), (0.5 * sum_gradients(singles)).flatten(), atol=1e-12)


def test_fishing_model_blocks_upstream_gradients(small_cnn, rng):
    server = FishingServer(seed=0)
    fish = server(small_cnn, [0])[0]
    g = client_local_step(fish, ClientBatch(rng.standard_normal((4, 1, 6, 6)), np.array([0, 1, 2, 3]), None))
    assert not g.grads[0]["weight"].any() and not g.grads[0]["bias"].any()
    # the modified layer itself still receives gradients
    assert g.grads[1]["beta"].any()


def test_server_update_cases(small_fcn, rng):
    g = GradientSet.from_flat(small_fcn.layout(), rng.standard_normal(small_fcn.n_params))
    assert np.array_equal(server_update(small_fcn, g, 0.0, 3).flat_params(), small_fcn.flat_params())
    stepped = server_update(small_fcn, 3 * g, 0.1, 3)
    np.testing.assert_allclose(stepped.flat_params() - small_fcn.flat_params(), -0.1 * g.flatten(), atol=1e-15)
    flat, grad = small_fcn.flat_params(), g.flatten()
    oracle = [flat[i] - 0.1 / 3 * grad[i] for i in range(flat.size)]
    np.testing.assert_allclose(server_update(small_fcn, g, 0.1, 3).flat_params(), oracle, atol=1e-15, rtol=0)


def test_round_aggregate_is_sum(rng):
    state = make_state(rng)
    rec1 = run_round(state, RoundConfig(1, 8, seed=1))
    assert np.array_equal(rec1.aggregate.flatten(), rec1.client_grads[0].flatten())
    rec3 = run_round(state, RoundConfig(3, 8, seed=1))
    np.testing.assert_allclose(rec3.aggregate.flatten(), sum_gradients(rec3.client_grads).flatten(), atol=1e-9)


def test_round_determinism_and_no_mutation(rng):
    state = make_state(rng)
    before = state.model.flat_params().copy()
    a = run_round(state, RoundConfig(3, 8, sa_mode="masked", seed=5))
    b = run_round(state, RoundConfig(3, 8, sa_mode="masked", seed=5))
    assert a.client_ids == b.client_ids
    assert np.array_equal(a.aggregate.flatten(), b.aggregate.flatten())
    assert np.array_equal(state.model.flat_params(), before)


def test_attack_round_models_differ_only_in_fishing_layer(rng):
    state = make_state(rng)
    rec = run_round(state, RoundConfig(3, 8, seed=2), FishingServer(seed=0))
    for m in rec.models:
        for i, (p, q) in enumerate(zip(m.params, state.model.params)):
            same = all(np.array_equal(p[k], q[k]) for k in p)
            assert same == (i != 0)


def test_attack_rejects_too_many_clients(rng):
    model = fcn3(12, 5, (10, 3), rng)
    state = make_state(rng, model=model)
    with pytest.raises(ConfigError):
        run_round(state, RoundConfig(5, 4), FishingServer())


def test_round_save_load(rng, tmp_path):
    state = make_state(rng)
    rec = run_round(state, RoundConfig(3, 8, seed=3), FishingServer(seed=0))
    save_round(rec, tmp_path / "r.npz")
    back = load_round(tmp_path / "r.npz")
    assert back.client_ids == rec.client_ids and back.batch_size == 8
    assert np.array_equal(back.aggregate.flatten(), rec.aggregate.flatten())
    assert np.array_equal(back.models[1].flat_params(), rec.models[1].flat_params())
