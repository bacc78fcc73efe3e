import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saleak.defenses import DefenseConfig, apply_compression, apply_gaussian, make_defense_hook
from saleak.errors import ConfigError
from saleak.nn import GradientSet


def flat_set(values):
    values = np.asarray(values, dtype=float)
    return GradientSet.from_flat(((("g", values.shape),),), values)


def test_zero_sigma_is_identity(rng):
    g = flat_set(rng.standard_normal(10))
    assert np.array_equal(apply_gaussian(g, 0.0, 1).flatten(), g.flatten())


def test_noise_moments():
    n, sigma = 1_000_000, 1e-3
    g = flat_set(np.zeros(n))
    noise = apply_gaussian(g, sigma, 42).flatten()
    assert abs(noise.mean()) <= 5 * sigma / np.sqrt(n)
    assert abs(noise.std() / sigma - 1) <= 0.02


def test_noise_reproducible(rng):
    g = flat_set(rng.standard_normal(50))
    assert np.array_equal(apply_gaussian(g, 0.1, 3).flatten(), apply_gaussian(g, 0.1, 3).flatten())


def test_compression_hand_case():
    out = apply_compression(flat_set([0.1, -0.5, 0.2, 0.05]), 0.5).flatten()
    assert out.tolist() == [0.0, -0.5, 0.2, 0.0]


def test_compression_zero_theta_identity(rng):
    g = flat_set(rng.standard_normal(8))
    assert apply_compression(g, 0.0) is g


def test_compression_matches_sort_oracle(rng):
    v = rng.standard_normal(1000)
    out = apply_compression(flat_set(v), 0.8).flatten()
    k = int(np.floor(0.8 * v.size))
    keep = set(sorted(range(v.size), key=lambda i: abs(v[i]))[k:])
    assert np.count_nonzero(out == 0) == k
    assert set(np.flatnonzero(out)) == keep


def test_config_validation():
    with pytest.raises(ConfigError):
        DefenseConfig(kind="dp")
    with pytest.raises(ConfigError):
        DefenseConfig(theta=1.0)
    with pytest.raises(ConfigError):
        DefenseConfig(sigma=-1)


def test_hook_streams_differ_per_client(rng):
    hook = make_defense_hook(DefenseConfig("gaussian_noise", sigma=1.0, seed=1))
    g = flat_set(np.zeros(5))
    assert not np.array_equal(hook(0, g).flatten(), hook(1, g).flatten())
    assert np.array_equal(hook(0, g).flatten(), hook(0, g).flatten())
    assert make_defense_hook(DefenseConfig()) is None


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=60), st.floats(0, 0.99))
def test_compression_keeps_survivors_exactly(values, theta):
    v = np.array(values)
    out = apply_compression(flat_set(v), theta).flatten()
    kept = out != 0
    assert np.array_equal(out[kept], v[kept])
    assert np.count_nonzero(out == 0) >= int(np.floor(theta * v.size))
