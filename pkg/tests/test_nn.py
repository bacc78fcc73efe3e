import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saleak.acceptance import finite_difference, relative_errors
from saleak.errors import ConfigError, ContractError, ShapeError
from saleak.nn import (EVAL, BatchNorm, Dense, GradientSet, Model, backward, batchnorm_forward, build_model,
                       cnn_bn, fcn3, forward, load_model, softmax,
                       loss_and_gradients, save_model, softmax_xent, sum_gradients, update_running_stats)


def test_identity_network_passes_inputs_through():
    model = Model((Dense(3, 3),), [{"weight": np.eye(3), "bias": np.zeros(3)}], (3,))
    x = np.array([[1.0, -2.0, 0.5]])
    assert np.array_equal(forward(model, x).logits, x)


def test_model_must_end_in_dense():
    with pytest.raises(Exception):
        Model((BatchNorm(3),), [{"gamma": np.ones(3), "beta": np.zeros(3)}], (3,))


def test_params_are_read_only(small_fcn):
    with pytest.raises(ValueError):
        small_fcn.params[0]["weight"][0, 0] = 1.0


def test_fcn3_matches_straight_line_recomputation(rng):
    model = fcn3(7, 3, (5, 4), rng)
    x = rng.standard_normal((4, 7))
    (w1, b1), (w2, b2), (w3, b3) = [(model.params[i]["weight"], model.params[i]["bias"]) for i in (0, 2, 4)]
    expected = np.zeros((4, 3))
    for k in range(4):
        h1 = [max(0.0, sum(w1[j, i] * x[k, i] for i in range(7)) + b1[j]) for j in range(5)]
        h2 = [max(0.0, sum(w2[j, i] * h1[i] for i in range(5)) + b2[j]) for j in range(4)]
        expected[k] = [sum(w3[j, i] * h2[i] for i in range(4)) + b3[j] for j in range(3)]
    np.testing.assert_allclose(forward(model, x).logits, expected, atol=1e-12, rtol=0)


def test_forward_shape_error_names_layer(small_fcn):
    with pytest.raises(ShapeError, match="layer 0"):
        forward(small_fcn, np.ones((2, 11)))


def test_batchnorm_hand_case():
    out = batchnorm_forward(np.array([[1.0], [3.0]]), [2.0], [1.0], epsilon=0.0)
    np.testing.assert_allclose(out, [[-1.0], [3.0]])


def test_batchnorm_zero_gamma_outputs_beta(rng):
    x = rng.standard_normal((6, 4, 3, 3))
    out = batchnorm_forward(x, np.zeros(4), np.full(4, 5.0))
    assert np.all(out == 5.0)


def test_batchnorm_output_moments(rng):
    out = batchnorm_forward(rng.normal(3, 2, (200, 5)), np.ones(5), np.zeros(5), 1e-5)
    np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=0), 1, atol=1e-5)


def test_batchnorm_rejects_non_positive_epsilon():
    with pytest.raises(ConfigError):
        BatchNorm(3, epsilon=0.0)


def test_softmax_xent_uniform():
    loss, grad = softmax_xent([[0.0, 0.0, 0.0]], [0])
    assert loss == pytest.approx(math.log(3))
    np.testing.assert_allclose(grad, [[-2 / 3, 1 / 3, 1 / 3]])


def test_softmax_xent_saturated_is_stable():
    loss, grad = softmax_xent([[1000.0, -1000.0]], [0])
    assert loss == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(grad, [[0.0, 0.0]], atol=1e-12)


def test_softmax_xent_matches_finite_differences(rng):
    y = rng.standard_normal((3, 5))
    labels = np.array([0, 4, 2])
    _, grad = softmax_xent(y, labels)
    h = 1e-6
    fd = np.zeros_like(y)
    for idx in np.ndindex(*y.shape):
        up, down = y.copy(), y.copy()
        up[idx] += h
        down[idx] -= h
        # the loss is a batch mean while the returned rows are per-sample
        fd[idx] = (softmax_xent(up, labels)[0] - softmax_xent(down, labels)[0]) / (2 * h) * len(y)
    np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-9)


def test_single_sample_bias_gradient_is_dl_dy(small_fcn, rng):
    x = rng.standard_normal((1, 12))
    trace = forward(small_fcn, x)
    grads = backward(small_fcn, trace, [3])
    _, dy = softmax_xent(trace.logits, [3])
    assert np.array_equal(grads.fcl_bias, dy[0])
    assert np.flatnonzero(grads.fcl_bias < 0).tolist() == [3]


def test_shared_embedding_gives_rank_one_weight_gradient(rng):
    model = fcn3(4, 3, (5, 6), rng)
    model = model.replace_params(0, weight=0.0, bias=0.7)
    grads = backward(model, forward(model, rng.standard_normal((9, 4))), rng.integers(0, 3, 9))
    e = forward(model, np.zeros((1, 4))).embedding[0]
    np.testing.assert_allclose(grads.fcl_weight, np.outer(grads.fcl_bias, e), atol=1e-12, rtol=0)


@pytest.mark.parametrize("arch", ["fcn", "cnn"])
def test_gradients_match_finite_differences(arch, rng, small_fcn, small_cnn):
    model = small_fcn if arch == "fcn" else small_cnn
    x = rng.standard_normal((5,) + model.input_shape)
    y = rng.integers(0, model.n_classes, 5)
    _, grads = loss_and_gradients(model, x, y)
    assert max(relative_errors(grads, finite_difference(model, x, y))) <= 1e-4


def test_count_identity_holds_for_any_batch(small_cnn, rng):
    b = 13
    labels = rng.integers(0, 5, b)
    trace = forward(small_cnn, rng.standard_normal((b, 1, 6, 6)))
    grads = backward(small_cnn, trace, labels)
    counts = np.bincount(labels, minlength=5)
    np.testing.assert_allclose(counts + b * grads.fcl_bias - softmax(trace.logits).sum(axis=0), 0, atol=1e-9)


def test_forward_backward_deterministic(small_cnn, rng):
    x = rng.standard_normal((4, 1, 6, 6))
    a = loss_and_gradients(small_cnn, x, [0, 1, 2, 3])[1].flatten()
    b = loss_and_gradients(small_cnn, x, [0, 1, 2, 3])[1].flatten()
    assert np.array_equal(a, b)


def test_backward_rejects_foreign_or_eval_trace(small_fcn, small_cnn, rng):
    x = rng.standard_normal((2, 12))
    with pytest.raises(ContractError):
        backward(small_fcn, forward(small_fcn, x, EVAL), [0, 1])
    with pytest.raises(ContractError):
        backward(small_cnn, forward(small_fcn, x), [0, 1])


def test_eval_mode_uses_running_stats(small_cnn, rng):
    x = rng.standard_normal((8, 1, 6, 6))
    trace = forward(small_cnn, x)
    updated = update_running_stats(small_cnn, trace, momentum=1.0)
    np.testing.assert_allclose(forward(updated, x, EVAL).logits, trace.logits, atol=1e-4)


def test_gradient_set_arithmetic(small_fcn, rng):
    layout = small_fcn.layout()
    a = GradientSet.from_flat(layout, rng.standard_normal(small_fcn.n_params))
    b = GradientSet.from_flat(layout, rng.standard_normal(small_fcn.n_params))
    np.testing.assert_allclose((a + b - b).flatten(), a.flatten())
    np.testing.assert_allclose(sum_gradients([a, a, a]).flatten(), (3 * a).flatten())
    with pytest.raises(ShapeError):
        GradientSet.from_flat(layout, np.zeros(3))


def test_apply_gradients(small_fcn, rng):
    g = GradientSet.from_flat(small_fcn.layout(), rng.standard_normal(small_fcn.n_params))
    stepped = small_fcn.apply_gradients(g, 0.5)
    np.testing.assert_array_equal(stepped.flat_params(), small_fcn.flat_params() - 0.5 * g.flatten())


def test_save_load_roundtrip(small_cnn, tmp_path):
    path = tmp_path / "m.npz"
    save_model(small_cnn, path)
    back = load_model(path)
    assert back.layers == small_cnn.layers
    assert np.array_equal(back.flat_params(), small_cnn.flat_params())


def test_cnn_bn_layer_order():
    kinds = [l.kind for l in cnn_bn().layers]
    assert kinds == ["conv2d", "batch_norm", "relu", "flatten", "fully_connected", "relu", "fully_connected"]


def test_default_init_bounds():
    model = build_model([Dense(16, 4)], (16,), np.random.default_rng(0))
    assert np.abs(model.params[0]["weight"]).max() <= 0.25


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 8))
def test_single_sample_sign_rule_property(seed, n_classes):
    g = np.random.default_rng(seed)
    model = fcn3(5, n_classes, (4, 3), g)
    label = int(g.integers(0, n_classes))
    grads = backward(model, forward(model, g.standard_normal((1, 5))), [label])
    assert np.flatnonzero(grads.fcl_bias <= 0).tolist() == [label]
