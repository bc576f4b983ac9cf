from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp, trapezoid

from chaoslab.chaos_diagnostics import w1_1d, w1_to_gaussian
from chaoslab.errors import ConstraintViolation, NumericalFailure, UsageError
from chaoslab.gauss_oracle import heat_kernel_lp_constant
from chaoslab.kernels import builtin
from chaoslab.meanfield_ref import (
    DensityEstimate,
    density_decay_check,
    exact_ou_density,
    fokker_planck_1d,
    gaussian_initial,
    kde_lp_norm,
    kde_on_grid,
    ou_variance,
    picard_solve,
)
from chaoslab.sde_engine import InitialLaw, SimConfig

SQ2 = math.sqrt(2.0)


def test_exact_ou_stationary_and_initial():
    assert ou_variance(3.7, 1.0, SQ2) == pytest.approx(1.0, rel=1e-15)
    e = exact_ou_density(0.0, [0.3, -1.0], 0.4, SQ2)
    np.testing.assert_allclose(e.var, [0.4, 0.4])
    np.testing.assert_allclose(e.mean, [0.3, -1.0])


def test_exact_ou_matches_ode_integrator():
    ode = solve_ivp(lambda t, v: -2 * v + 2.0, (0, 5.0), [0.0], rtol=1e-11, atol=1e-13, dense_output=True)
    for t in (0.1, 1.0, 5.0):
        assert exact_ou_density(t, 0.0, 0.0, SQ2).var[0] == pytest.approx(ode.sol(t)[0], rel=1e-8)
    assert exact_ou_density(40.0, 0.0, 0.0, SQ2).var[0] == pytest.approx(1.0, rel=1e-12)


def test_exact_ou_grid_is_normalised():
    g = np.linspace(-8, 8, 801)
    e = exact_ou_density(0.5, [0.0, 1.0], 0.5, 1.0, grid=g)
    assert e.values.shape == (801, 801)
    assert e.mass() == pytest.approx(1.0, abs=1e-8)
    with pytest.raises(ConstraintViolation):
        exact_ou_density(1.0, 0.0, -1.0, 1.0)


def test_picard_zero_kernel_is_heat_flow():
    v0, T = 0.5, 1.0
    c = SimConfig(1, 1, T, 0.05, builtin("zero"), InitialLaw("gaussian", (0.0,), (v0,)), seed=3)
    res = picard_solve(c, iterations=3, n_ref=5000, record_times=[0.5, 1.0])
    assert res.converged
    assert np.all(res.distances[1] == 0)
    var = res.iterates[1][-1].var[0]
    assert var == pytest.approx(v0 + 2.0 * T, rel=4 * math.sqrt(2 / 5000))


def test_picard_linear_ou_matches_exact_within_mc_error():
    n = 4000
    law = InitialLaw("gaussian", (0.5,), (0.5,))
    c = SimConfig(1, 1, 1.0, 0.01, builtin("linear-ou"), law, seed=11)
    res = picard_solve(c, iterations=6, n_ref=n, record_times=[0.25, 0.5, 1.0])
    assert res.converged
    gen = np.random.default_rng(0)
    baseline = np.mean([w1_to_gaussian(gen.normal(size=n), 0.0, 1.0) for _ in range(20)])
    for est in res.final:
        exact = exact_ou_density(est.time, 0.5, 0.5, SQ2)
        assert w1_1d(est, exact) <= 3 * baseline * math.sqrt(exact.var[0])


def test_picard_riesz_2d_distances_decrease():
    c = SimConfig(1, 2, 0.5, 0.05, builtin("riesz-truncated", {"alpha": 0.3, "d": 2}),
                  InitialLaw("gaussian", (0.0,), (0.25,)), seed=2)
    res = picard_solve(c, iterations=3, n_ref=1000, record_times=[0.25, 0.5], tol=0.0)
    d = [float(np.max(x)) for x in res.distances]
    assert d[0] > d[1] > d[2]
    assert not res.converged


def test_picard_preconditions():
    c = SimConfig(1, 1, 1.0, 0.1, builtin("zero"))
    with pytest.raises(ConstraintViolation):
        picard_solve(c, n_ref=500)
    with pytest.raises(UsageError):
        picard_solve(c, record_times=[0.55])


def test_fokker_planck_heat_widening():
    out = fokker_planck_1d(builtin("zero"), -8, 8, 512, gaussian_initial(0.0, 0.5), SQ2, 1.0,
                           record_times=[1.0])
    assert out[-1].var[0] - 0.5 == pytest.approx(2.0, rel=0.01)


def test_fokker_planck_linear_ou_l1():
    x_min, x_max, n = -6.0, 7.0, 520
    out = fokker_planck_1d(builtin("linear-ou"), x_min, x_max, n, gaussian_initial(0.5, 0.5), SQ2, 1.0,
                           record_times=[0.5, 1.0])
    x = out[-1].axes[0]
    exact = exact_ou_density(1.0, 0.5, 0.5, SQ2, grid=x)
    assert trapezoid(np.abs(out[-1].values - exact.values), x) <= 1e-2


def test_fokker_planck_mass_conserved():
    dx = 16 / 400
    dt = 0.4 * dx * dx / 2.0
    out = fokker_planck_1d(builtin("linear-ou"), -8, 8, 400, gaussian_initial(1.0, 0.3), SQ2, 1000 * dt,
                           dt_pde=dt, record_times=[1000 * dt])
    assert out[-1].mass() == pytest.approx(1.0, abs=1e-6)
    assert np.all(out[-1].values >= 0)


def test_fokker_planck_cfl_failure():
    k = builtin("constant", {"c": 1e12})
    with pytest.raises(NumericalFailure):
        fokker_planck_1d(k, -1, 1, 16, gaussian_initial(0.0, 0.1), 1.0, 0.1, max_halvings=3)
    with pytest.raises(ConstraintViolation):
        fokker_planck_1d(builtin("zero", {"d": 2}), -1, 1, 16, gaussian_initial(0.0, 0.1), 1.0, 0.1)


def test_sampling_follows_grid_not_moments():
    x = np.linspace(-3, 3, 601)
    bimodal = np.exp(-0.5 * (x - 1.5) ** 2 / 0.05) + np.exp(-0.5 * (x + 1.5) ** 2 / 0.05)
    est = DensityEstimate(0.0, "fokker-planck", (x,), bimodal / trapezoid(bimodal, x),
                          mean=np.array([0.0]), var=np.array([2.3]))
    s = est.sample(4000)
    assert np.mean(np.abs(s) < 0.5) < 0.01


def test_decay_series_driftless_point_mass():
    sigma, r = SQ2, 3.0
    times = [0.05, 0.1, 0.25, 0.5, 1.0]
    ests = [DensityEstimate(t, "exact-ou", mean=np.zeros(1), var=np.array([sigma**2 * t])) for t in times]
    expected = heat_kernel_lp_constant(r, 1) * sigma ** (-(1 - 1 / r))
    for _, v in density_decay_check(ests, r):
        assert v == pytest.approx(expected, rel=1e-12)
    grid = np.linspace(-10, 10, 4001)
    gridded = [DensityEstimate(t, "grid", (grid,), np.exp(-grid**2 / (2 * sigma**2 * t))
                               / math.sqrt(2 * math.pi * sigma**2 * t)) for t in times]
    for _, v in density_decay_check(gridded, 1.0):
        assert v == pytest.approx(1.0, abs=1e-6)
    for _, v in density_decay_check(gridded, r):
        assert v == pytest.approx(expected, rel=1e-4)


def test_decay_series_linear_ou_bounded():
    grid = np.linspace(-6, 6, 2001)
    times = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0]
    ests = [exact_ou_density(t, 0.0, 0.0, SQ2, grid=grid) for t in times]
    vals = [v for _, v in density_decay_check(ests, 2.0)]
    assert max(vals) < 1.0


def test_decay_check_preconditions():
    e = [DensityEstimate(t, "x", mean=np.zeros(1), var=np.ones(1)) for t in (0.5, 0.6, 0.7, 0.8)]
    with pytest.raises(UsageError):
        density_decay_check(e, 2.0)
    with pytest.raises(UsageError):
        density_decay_check(e[:3], 2.0)


def test_leave_one_out_norm_warns_in_high_dimension():
    gen = np.random.default_rng(1)
    times = [0.1, 0.2, 0.5, 1.0]
    ests = [DensityEstimate(t, "samples", samples=gen.normal(scale=math.sqrt(t), size=(800, 3))) for t in times]
    with pytest.warns(UserWarning, match="biased"):
        density_decay_check(ests, 2.0)
    exact = (4 * math.pi) ** (-1.5 * 0.5)  # ||g_1||_2 in d = 3
    assert kde_lp_norm(gen.normal(size=(3000, 3)), 2.0) == pytest.approx(exact, rel=0.1)


def test_kde_l1_error_rate():
    x = np.linspace(-6, 6, 1201)
    truth = np.exp(-x**2 / 2) / math.sqrt(2 * math.pi)

    def err(n):
        gen = np.random.default_rng(n)
        return np.mean([trapezoid(np.abs(kde_on_grid(gen.normal(size=(n, 1)), [x])[0] - truth), x)
                        for _ in range(12)])

    ratio = err(8000) / err(2000)
    assert 0.35 <= ratio <= 0.65
