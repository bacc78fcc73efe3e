import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saleak import attack as atk
from saleak.errors import ArchitectureError, ConditioningError, ConfigError, DataAgnosticError
from saleak.federation import ClientBatch, FederationState, RoundConfig, client_local_step, partition, run_round
from saleak.metrics import nomp_ratio
from saleak.nn import BatchNorm, Dense, Model, ReLU, cnn_bn, fcn3, forward, softmax


def test_find_fishing_layer(small_fcn, small_cnn):
    assert atk.find_fishing_layer(small_cnn) == 1
    assert atk.find_fishing_layer(small_fcn) == 0
    lone = Model((Dense(3, 2),), [{"weight": np.ones((2, 3)), "bias": np.zeros(2)}], (3,))
    with pytest.raises(ArchitectureError):
        atk.find_fishing_layer(lone)


def test_last_batchnorm_is_chosen(rng):
    layers = (Dense(4, 4), BatchNorm(4), ReLU(), Dense(4, 4), BatchNorm(4), ReLU(), Dense(4, 3))
    model = Model(layers, [l.init_params(rng) for l in layers], (4,))
    assert atk.find_fishing_layer(model) == 4


def test_single_kit(small_cnn):
    kits = atk.build_fishing_models(small_cnn, [7], rng=0)
    assert len(kits) == 1 and kits[0].client_id == 7
    assert atk.coefficient_matrix([kits[0].embedding]).shape == (small_cnn.embedding_dim + 1, 1)


def test_two_explicit_constants_on_cnn(rng):
    base = cnn_bn((1, 6, 6), 4, channels=3, hidden=16, rng=rng)
    kits = atk.build_fishing_models(base, [0, 1], c_policy=[0.5, 0.6], rng=0)
    assert np.any(kits[0].embedding != kits[1].embedding)
    assert np.any(kits[0].logits != kits[1].logits)
    for k in kits:
        e, y = atk.preset_probe(k, rng.standard_normal((2, 1, 6, 6)))
        np.testing.assert_allclose(e, k.embedding, rtol=1e-12, atol=1e-12)


def test_bn_modification_touches_two_d_parameters():
    base = cnn_bn((1, 8, 8), 10, channels=64, rng=0)
    kit = atk.build_fishing_models(base, [0], rng=0)[0]
    assert nomp_ratio(kit.model, base)[0] == 128


def test_fcn3_first_layer_modification_count():
    base = fcn3(784, 10, (256, 128), 0)
    kit = atk.build_fishing_models(base, [0], rng=0)[0]
    assert nomp_ratio(kit.model, base)[0] == 784 * 256 + 256


def test_probe_zeros_ones_and_logit_definition(small_cnn):
    kit = atk.build_fishing_models(small_cnn, [0], rng=0)[0]
    e, y = atk.preset_probe(kit)
    fcl = kit.model.params[-1]
    np.testing.assert_allclose(y, fcl["weight"] @ e + fcl["bias"], atol=1e-12, rtol=0)


def test_probe_detects_input_dependence(small_cnn):
    with pytest.raises(DataAgnosticError):
        atk.preset_probe(small_cnn)


def test_linear_policy_is_rank_limited_but_spread_is_not(small_fcn):
    # embeddings are piecewise linear in the constant, so evenly spaced
    # constants between activation kinks give a low-rank system
    big = cnn_bn(rng=0)
    bidx = atk.find_fishing_layer(big)
    emb, _ = atk.constant_embeddings(big, bidx, 0.5 + 0.1 * np.arange(10))
    assert np.linalg.matrix_rank(atk.coefficient_matrix(emb)) < 10
    spread = atk.choose_constants(big, bidx, 10, atk.SPREAD)
    emb, _ = atk.constant_embeddings(big, bidx, spread)
    assert np.linalg.matrix_rank(atk.coefficient_matrix(emb)) == 10

    idx = atk.find_fishing_layer(small_fcn)
    cs = atk.choose_constants(small_fcn, idx, 5, atk.SPREAD)
    assert len(np.unique(cs)) == 5 and np.all(cs > 0)
    emb, _ = atk.constant_embeddings(small_fcn, idx, cs)
    assert np.linalg.matrix_rank(atk.coefficient_matrix(emb)) == 5


def test_choose_constants_rejects_bad_input(small_fcn):
    with pytest.raises(ConfigError):
        atk.choose_constants(small_fcn, 0, 100)
    with pytest.raises(ConfigError):
        atk.choose_constants(small_fcn, 0, 2, policy=[1.0])
    with pytest.raises(ConditioningError):
        atk.choose_constants(small_fcn, 0, 2, policy=[1.0, 1.0])


def test_disaggregate_single_client(rng):
    w, b = rng.standard_normal((3, 4)), rng.standard_normal(3)
    e = rng.standard_normal(4)
    got = atk.disaggregate(np.outer(b, e), b, [e])
    np.testing.assert_allclose(got[0], b, atol=1e-14)


def test_disaggregate_decoupled_rows():
    got = atk.disaggregate(np.array([[0.1, 0.2]]), np.array([0.3]), [[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(got[:, 0], [0.1, 0.2], atol=1e-14)


def test_disaggregate_planted(rng):
    u, m, n = 4, 8, 6
    db = rng.standard_normal((u, n))
    emb = rng.standard_normal((u, m))
    agg_w = sum(np.outer(db[k], emb[k]) for k in range(u))
    got = atk.disaggregate(agg_w, db.sum(axis=0), emb)
    assert np.max(np.abs(got - db)) <= 1e-8


def test_disaggregate_guards(rng):
    with pytest.raises(ConfigError):
        atk.disaggregate(np.zeros((3, 2)), np.zeros(3), rng.standard_normal((4, 2)))
    with pytest.raises(ConditioningError):
        atk.disaggregate(np.zeros((3, 2)), np.zeros(3), [[1.0, 1.0], [1.0, 1.0]])


def test_infer_labels_hand_cases():
    est = atk.infer_labels([-0.25, 0.25], [0.0, 0.0], 4)
    np.testing.assert_allclose(est.real_counts, [3.0, 1.0])
    assert est.counts.tolist() == [3, 1] and est.sum_mismatch == 0
    y = np.array([0.3, -1.0, 2.0])
    assert atk.infer_labels(softmax(y), y, 5).counts.tolist() == [0, 0, 0]


def test_infer_labels_repair_sums_to_batch():
    est = atk.infer_labels([0.0, 0.0, 0.0], [0.0, 0.0, 0.0], 4, repair=True)
    assert est.counts.sum() == 4
    plain = atk.infer_labels([0.0, 0.0, 0.0], [0.0, 0.0, 0.0], 4)
    assert plain.counts.tolist() == [1, 1, 1] and plain.sum_mismatch == -1


def test_end_to_end_single_client_counts(small_cnn, rng):
    kit = atk.build_fishing_models(small_cnn, [0], rng=0)[0]
    labels = rng.integers(0, 5, 23)
    g = client_local_step(kit.model, ClientBatch(rng.standard_normal((23, 1, 6, 6)), labels, None))
    assert atk.infer_labels(g.fcl_bias, kit.logits, 23).counts.tolist() == np.bincount(labels, minlength=5).tolist()


def test_prop1_hand_cases():
    assert atk.prop1_single_sample([-2 / 3, 1 / 3, 1 / 3]) == 0
    assert atk.prop1_single_sample([0.1, -0.9, 0.8]) == 1
    with pytest.raises(atk.NotSingleSampleError):
        atk.prop1_single_sample([-0.1, -0.2, 0.3])


def test_prop2_cases(small_fcn, rng):
    x = rng.standard_normal((1, 12))
    trace = forward(small_fcn, x)
    g = client_local_step(small_fcn, ClientBatch(x, np.array([4]), None))
    counts = atk.prop2_counts(g.fcl_bias, trace.logits, 1)
    assert counts.tolist() == [0, 0, 0, 0, 1]
    assert atk.prop1_single_sample(g.fcl_bias) == 4
    xb = rng.standard_normal((9, 12))
    g = client_local_step(small_fcn, ClientBatch(xb, np.full(9, 2), None))
    assert atk.prop2_counts(g.fcl_bias, forward(small_fcn, xb).logits, 9).tolist() == [0, 0, 9, 0, 0]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 64))
def test_prop2_exact_on_random_batches(seed, b):
    g = np.random.default_rng(seed)
    model = fcn3(6, 7, (5, 4), g)
    labels = g.integers(0, 7, b)
    x = g.standard_normal((b, 6))
    grads = client_local_step(model, ClientBatch(x, labels, None))
    assert atk.prop2_counts(grads.fcl_bias, forward(model, x).logits, b).tolist() == np.bincount(labels, minlength=7).tolist()


def _round(rng, model, u, b, mode="ideal"):
    x = rng.standard_normal((600,) + model.input_shape)
    y = rng.integers(0, model.n_classes, 600)
    state = FederationState(model, partition(x, y, 20, model.n_classes, rng), model.n_classes)
    server = atk.FishingServer(seed=1)
    rec = run_round(state, RoundConfig(u, b, sa_mode=mode, seed=4), server)
    return rec, server.kits


@pytest.mark.parametrize("mode", ["ideal", "masked"])
def test_run_attack_recovers_every_client(small_cnn, rng, mode):
    rec, kits = _round(rng, small_cnn, 5, 32, mode)
    results = atk.run_attack(rec, kits)
    assert [r.client_id for r in results] == list(rec.client_ids)
    for r, batch, g in zip(results, rec.batches, rec.client_grads):
        assert r.counts.tolist() == batch.true_counts.tolist()
        if mode == "ideal":
            assert np.max(np.abs(r.b_grad - g.fcl_bias)) <= 1e-8


def test_run_attack_needs_every_kit(small_cnn, rng):
    rec, kits = _round(rng, small_cnn, 3, 4)
    with pytest.raises(ConfigError):
        atk.run_attack(rec, kits[:2])


def test_attack_results_json_roundtrip(small_cnn, rng, tmp_path):
    rec, kits = _round(rng, small_cnn, 3, 4)
    results = atk.run_attack(rec, kits)
    atk.save_attack_results(results, tmp_path / "a.json")
    json.loads((tmp_path / "a.json").read_text())
    back = atk.load_attack_results(tmp_path / "a.json")
    assert [r.counts.tolist() for r in back] == [r.counts.tolist() for r in results]
