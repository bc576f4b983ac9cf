from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from chaoslab import rng
from chaoslab.quadrature import panel_nodes, sphere_area, sphere_directions


def test_normals_are_standard():
    z = rng.CounterStreams(11, runs=4, streams=5000).normals(step=3, n_axes=2).ravel()
    assert stats.kstest(z, "norm").pvalue > 1e-3
    assert abs(z.mean()) < 4 / np.sqrt(z.size)
    assert abs(z.var() - 1) < 4 * np.sqrt(2 / z.size)


def test_uniforms_in_open_interval():
    u = rng.CounterStreams(0, runs=2, streams=10_000).uniforms(step=0, n_axes=3)
    assert u.min() > 0 and u.max() < 1
    assert stats.kstest(u.ravel(), "uniform").pvalue > 1e-3


@given(st.integers(0, 2**63), st.integers(0, 100), st.integers(-1, 10_000))
def test_draws_depend_only_on_counter(seed, stream, step):
    many = rng.stream_keys(seed, np.arange(3), np.arange(stream + 5))
    one = rng.stream_keys(seed, np.array([1]), np.array([stream]))
    np.testing.assert_array_equal(rng.normals(many, step, 2)[1, stream], rng.normals(one, step, 2)[0, 0])


def test_steps_axes_and_slots_differ():
    keys = rng.stream_keys(5, np.arange(1), np.arange(1000))
    a = rng.raw_bits(keys, 0, 2)
    assert not np.any(a[..., 0] == a[..., 1])
    assert not np.any(rng.raw_bits(keys, 1, 2) == a)
    assert not np.any(rng.raw_bits(keys, 0, 2, slot=1) == a)


def test_consecutive_steps_uncorrelated():
    keys = rng.stream_keys(3, np.arange(1), np.arange(20_000))
    a = rng.normals(keys, 0, 1).ravel()
    b = rng.normals(keys, 1, 1).ravel()
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / np.sqrt(a.size)


def test_generator_labels_separate_streams():
    a = rng.generator(1, 2).random(4)
    b = rng.generator(1, 3).random(4)
    np.testing.assert_array_equal(a, rng.generator(1, 2).random(4))
    assert not np.array_equal(a, b)


def test_negative_step_limit():
    with pytest.raises(ValueError):
        rng.raw_bits(rng.stream_keys(0, np.arange(1), np.arange(1)), -3, 1)


def test_panel_quadrature_integrates_polynomials():
    x, w = panel_nodes(np.array([0.0, 0.5, 2.0]), 6)
    assert np.sum(w * x**7) == pytest.approx(2.0**8 / 8, rel=1e-13)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_sphere_rule_second_moments(d):
    dirs, w = sphere_directions(d, level=1)
    assert w.sum() == pytest.approx(1.0)
    np.testing.assert_allclose((dirs * w[:, None]).T @ dirs, np.eye(d) / d, atol=1e-12)


def test_sphere_area():
    assert sphere_area(1) == pytest.approx(2.0)
    assert sphere_area(2) == pytest.approx(2 * np.pi)
    assert sphere_area(3) == pytest.approx(4 * np.pi)
