from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chaoslab.errors import EstimationFailure, UsageError
from chaoslab.girsanov_lab import (
    beta_field,
    drift_energy,
    exp_moment,
    log_mean_exp_estimate,
    novikov_scaling_study,
    weight,
    weight_moment,
)
from chaoslab.kernels import builtin
from chaoslab.sde_engine import InitialLaw, SimConfig, TrajectoryBlock, particle_drift, run


def frozen_block(positions, horizon=1.0, dt=0.1, sigma=1.0):
    """A trajectory that stays at ``positions`` (shape (runs, N, d)) for the whole horizon."""
    steps = int(round(horizon / dt))
    times = np.arange(steps + 1) * dt
    snaps = np.broadcast_to(positions, (steps + 1,) + positions.shape).copy()
    return TrajectoryBlock(times, snaps, np.zeros((steps,) + positions.shape), dt, sigma, 0, "frozen")


def test_zero_kernel_functionals_vanish():
    c = SimConfig(5, 2, 1.0, 0.1, builtin("zero", {"d": 2}))
    block = run(c, runs=3, keep_increments=True)
    for r in (0, 2):
        acc = drift_energy(block, c, r)
        assert np.all(acc.drift_energy == 0)
        assert np.all(weight(block, c, r) == 0)


def test_linear_ou_partial_energy_hand_value():
    c = SimConfig(2, 1, 1.0, 0.1, builtin("linear-ou"), diffusion=1.0)
    block = frozen_block(np.array([[[1.0], [-1.0]]]))
    acc = drift_energy(block, c, r=1)
    assert acc.drift_energy[0] == pytest.approx(2.0, rel=1e-12)


def test_partial_coordinates_carry_full_drifts(rng):
    k = builtin("riesz", {"alpha": 0.5, "d": 2})
    x = rng.normal(size=(2, 7, 2))
    full = particle_drift(k, 0.0, x)
    for r in (1, 3, 6):
        np.testing.assert_allclose(beta_field(k, 0.0, x, r)[:, :r], full[:, :r], rtol=1e-12)


def test_far_particles_leave_only_tagged_terms():
    # particles 2.. sit far apart, so only the r tagged coordinates and their cross terms remain
    k = builtin("indicator", {"c": 1.0, "ell": 1.0})
    x = np.array([[[0.0], [0.5], [10.0], [20.0]]])
    c = SimConfig(4, 1, 1.0, 0.1, k, diffusion=1.0)
    e_full = drift_energy(frozen_block(x), c, 0).drift_energy[0]
    e_two = drift_energy(frozen_block(x), c, 2).drift_energy[0]
    assert e_full == pytest.approx(e_two)
    assert e_full == pytest.approx(2 * (1 / 4) ** 2)


def test_constant_kernel_closed_form_energies():
    c0, T, N = 0.8, 1.0, 6
    rows = novikov_scaling_study(builtin("constant", {"c": c0}), [N], T, 0.5, dt=0.1, n_paths=100)
    assert rows[0].full_energy_mean == pytest.approx(c0**2 * T * (N - 1) ** 2 / N, rel=1e-12)
    assert rows[0].partial_energy_mean == pytest.approx(c0**2 * T * (N - 1) / N, rel=1e-12)


def test_zero_kernel_scaling_all_zero():
    rows = novikov_scaling_study(builtin("zero"), [2, 4], 1.0, 1.0, dt=0.1, n_paths=100)
    for row in rows:
        assert row.full_energy_mean == 0 and row.partial_energy_mean == 0
        assert row.exp_moment_partial.log_mean_exp == 0
        assert row.exp_moment_partial.bootstrap_ci == (0.0, 0.0)


def test_scaling_study_rejects_bad_lists():
    with pytest.raises(UsageError):
        novikov_scaling_study(builtin("zero"), [4, 2], 1.0, 1.0)
    with pytest.raises(UsageError):
        novikov_scaling_study(builtin("zero"), [1, 2], 1.0, 1.0)


def test_bounded_functional_exp_moment_bound():
    # two independent Brownian motions; F = int 1{|w - y| <= 1} dt <= T
    c = SimConfig(2, 1, 1.0, 0.01, builtin("zero"), diffusion=1.0)
    block = run(c, runs=400)
    k = builtin("indicator")
    w, y = block.snapshots[:-1, :, 0], block.snapshots[:-1, :, 1]
    F = np.sum(np.linalg.norm(k.drift(0.0, w, y), axis=-1), axis=0) * c.dt
    est = exp_moment(F, 0.1)
    assert 0 < est.log_mean_exp <= 0.1 * 1.0


def test_weight_requires_increments():
    c = SimConfig(3, 1, 1.0, 0.1, builtin("linear-ou"))
    block = run(c)
    with pytest.raises(UsageError):
        weight(block, c, 1)
    with pytest.raises(UsageError):
        drift_energy(block, c, 0).ito_sum


def test_grid_mismatch_rejected():
    c = SimConfig(3, 1, 1.0, 0.1, builtin("linear-ou"))
    block = run(c, keep_increments=True)
    with pytest.raises(UsageError):
        drift_energy(block, c.with_(dt=0.05), 0)
    with pytest.raises(UsageError):
        drift_energy(block, c.with_(n_particles=4), 0)
    with pytest.raises(UsageError):
        drift_energy(run(c, record_every=2), c, 0)


def test_estimator_preconditions():
    with pytest.raises(UsageError):
        log_mean_exp_estimate(np.zeros(99))
    with pytest.raises(UsageError):
        log_mean_exp_estimate(np.zeros(200), n_resamples=10)
    with pytest.raises(EstimationFailure):
        log_mean_exp_estimate(np.full(200, np.inf))


def test_diverged_fraction_reported():
    vals = np.r_[np.zeros(150), np.full(50, np.inf)]
    est = log_mean_exp_estimate(vals)
    assert est.diverged_fraction == pytest.approx(0.25)
    assert est.log_mean_exp == 0


def test_log_mean_exp_is_overflow_safe():
    est = log_mean_exp_estimate(np.full(100, 1000.0))
    assert est.log_mean_exp == pytest.approx(1000.0)


@given(st.lists(st.floats(0, 50), min_size=100, max_size=150), st.floats(0.01, 2), st.floats(0, 2))
def test_exp_moment_monotone_in_alpha(values, alpha, extra):
    a = exp_moment(np.array(values), alpha, seed=1).log_mean_exp
    b = exp_moment(np.array(values), alpha + extra, seed=1).log_mean_exp
    assert b >= a - 1e-12


def test_inverse_weight_moment_finite():
    c = SimConfig(3, 1, 1.0, 0.01, builtin("linear-ou"), partial_r=1)
    block = run(c, runs=200, keep_increments=True)
    acc = drift_energy(block, c, 1)
    small = weight_moment(acc, -2.0)
    assert math.isfinite(small.log_mean_exp) and small.diverged_fraction == 0
    assert np.mean(acc.log_weight()) <= 0


def test_weight_is_sigma_consistent():
    # with sigma = 1 the log-weight is -ito_sum - energy / 2
    c = SimConfig(3, 1, 1.0, 0.1, builtin("linear-ou"), diffusion=1.0, partial_r=1)
    acc = drift_energy(run(c, runs=2, keep_increments=True), c, 1)
    np.testing.assert_allclose(acc.log_weight(), -acc.ito_sum - acc.drift_energy / 2)


def test_independent_pair_riesz_exp_moment_stable():
    k = builtin("riesz-truncated", {"alpha": 0.3, "d": 2})
    c = SimConfig(2, 2, 1.0, 0.01, builtin("zero", {"d": 2}), InitialLaw("gaussian"), seed=4, diffusion=1.0)
    block = run(c, runs=800)
    w, y = block.snapshots[:-1, :, 0], block.snapshots[:-1, :, 1]
    F = np.sum(np.sum(k.drift(0.0, w, y) ** 2, axis=-1), axis=0) * c.dt
    half = exp_moment(F[:400], 0.5)
    full = exp_moment(F, 0.5)
    assert math.isfinite(full.log_mean_exp)
    assert half.overlaps(full)
