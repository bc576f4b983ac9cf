from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from chaoslab.errors import BlowUpError, ConstraintViolation, UsageError
from chaoslab.kernels import builtin
from chaoslab.sde_engine import (
    InitialLaw,
    SimConfig,
    TrajectoryBlock,
    initial_state,
    particle_drift,
    run,
    run_linear,
    step,
)


def cfg(kernel="zero", n=20, d=1, horizon=1.0, dt=0.05, **kw):
    params = kw.pop("params", {})
    return SimConfig(n, d, horizon, dt, builtin(kernel, {**params, "d": d}), **kw)


def test_config_constraints():
    with pytest.raises(ConstraintViolation, match="dt divides T"):
        cfg(dt=0.3)
    with pytest.raises(ConstraintViolation):
        cfg(n=0)
    with pytest.raises(ConstraintViolation):
        cfg(partial_r=20)
    with pytest.raises(ConstraintViolation):
        SimConfig(4, 2, 1.0, 0.1, builtin("zero", {"d": 1}))
    with pytest.raises(ConstraintViolation):
        InitialLaw("cauchy")


def test_linear_ou_two_particle_drift():
    x = np.array([[[1.0], [-1.0]]])
    drift = particle_drift(builtin("linear-ou"), 0.0, x)
    np.testing.assert_allclose(drift[0, :, 0], [-1.0, 1.0])


def test_coincident_riesz_pair_masked():
    x = np.array([[[0.3, 0.1], [0.3, 0.1]]])
    drift = particle_drift(builtin("riesz", {"alpha": 1.0, "d": 2}), 0.0, x)
    assert np.all(drift == 0)


def test_partial_system_drift():
    k = builtin("linear-ou")
    x = np.array([[[1.0], [2.0], [4.0]]])
    drift = particle_drift(k, 0.0, x, partial_r=1)
    np.testing.assert_allclose(drift[0, :, 0], [0.0, (4 - 2) / 3, (2 - 4) / 3])


def test_single_step_driftless_increment():
    c = cfg(n=50_000, d=2, dt=0.01, horizon=0.01, diffusion=1.0, initial_law=InitialLaw("point", (0.5,)))
    s0 = initial_state(c)
    s1 = step(c, s0)
    inc = s1.positions - s0.positions
    assert s1.time == pytest.approx(0.01)
    assert np.mean(np.sum(inc**2, axis=-1)) == pytest.approx(2 * 0.01, rel=0.03)
    with pytest.raises(UsageError):
        step(c, s1)


def test_driftless_martingale_mean():
    c = cfg(n=1000, horizon=1.0, dt=0.1)
    block = run(c)
    assert abs(block.snapshots[-1, 0].mean() - block.snapshots[0, 0].mean()) < 4 * math.sqrt(2) / math.sqrt(1000)


def test_linear_ou_stationary_variance():
    c = cfg("linear-ou", n=4000, horizon=1.0, dt=0.01)
    x = run(c, record_every=100, runs=3).snapshots[-1]
    var = x.var(axis=1, ddof=1).mean()
    assert var == pytest.approx(1.0, abs=4 * math.sqrt(2 / (3 * 4000)) + 0.02)


def test_run_linear_ou_variance_matches_ode():
    v0, sigma, T = 0.25, math.sqrt(2.0), 1.0
    ode = solve_ivp(lambda t, v: -2 * v + sigma**2, (0, T), [v0], rtol=1e-10, atol=1e-12).y[0, -1]
    c = cfg(n=20_000, horizon=T, dt=0.005, initial_law=InitialLaw("gaussian", (0.0,), (v0,)))
    x = run_linear(c, lambda t, x: -x, record_every=200).snapshots[-1, 0, :, 0]
    # Euler bias at dt=0.005 is below 1%
    assert x.var(ddof=1) == pytest.approx(ode, rel=0.01 + 4 * math.sqrt(2 / x.size))


def test_run_linear_zero_drift_equals_driftless_run():
    c = cfg(n=30)
    a = run(c, keep_increments=True)
    b = run_linear(c, lambda t, x: np.zeros_like(x), keep_increments=True)
    assert a == b


def test_run_linear_nonfinite_drift_raises():
    with pytest.raises(BlowUpError) as info:
        run_linear(cfg(n=5), lambda t, x: np.where(x > 1e9, 0.0, np.nan))
    assert info.value.to_record()["module"] == "sde_engine"


def test_blow_up_reports_particle():
    c = cfg("constant", n=3, dt=0.5, params={"c": 1e308}, diffusion=1.0)
    with pytest.raises(BlowUpError) as info:
        run(c)
    assert info.value.particle in (0, 1, 2)


def test_taming_caps_drift():
    c = cfg("constant", n=2, dt=0.01, horizon=0.01, params={"c": 1e6}, taming=0.5,
            initial_law=InitialLaw("point", (0.0,)))
    block = run(c, keep_increments=True)
    move = block.snapshots[-1] - block.snapshots[0] - c.diffusion * block.increments[0]
    assert np.all(np.abs(move) <= 0.5 * math.sqrt(0.01) + 1e-15)


def test_same_seed_identical_and_replicas_stable():
    c = cfg("riesz", n=16, d=2, params={"alpha": 0.5})
    a = run(c, runs=3, keep_increments=True)
    b = run(c, runs=3, keep_increments=True)
    one = run(c, runs=1)
    assert a == b
    assert np.array_equal(a.snapshots[:, :1], one.snapshots)
    assert not np.array_equal(a.snapshots[:, 0], a.snapshots[:, 1])


def test_thread_count_does_not_change_bits():
    c = cfg("riesz", n=200, d=2, dt=0.1, params={"alpha": 0.5})
    assert run(c, runs=2, threads=1).to_bytes() == run(c, runs=2, threads=4).to_bytes()


def test_single_particle_is_driftless():
    k = cfg("riesz", n=1, params={"alpha": 0.5}, seed=3)
    z = cfg("zero", n=1, seed=3)
    assert np.array_equal(run(k).snapshots, run(z).snapshots)


def test_partial_reduction_to_brownian():
    a = run(cfg("linear-ou", n=6, partial_r=5, seed=9))
    b = run(cfg("zero", n=6, seed=9))
    assert np.array_equal(a.snapshots, b.snapshots)


def test_exchangeability_under_stream_permutation():
    c = cfg("linear-ou", n=8, d=2, params={"kappa": 0.7})
    perm = np.array([3, 0, 7, 1, 6, 2, 5, 4])
    base = run(c)
    permuted = run(c, stream_ids=perm)
    np.testing.assert_allclose(permuted.snapshots, base.snapshots[:, :, perm], rtol=1e-12, atol=1e-12)


def test_record_every_and_lookup():
    c = cfg(n=4, dt=0.1, horizon=1.0)
    block = run(c, record_every=3)
    np.testing.assert_allclose(block.times, [0.0, 0.3, 0.6, 0.9, 1.0])
    np.testing.assert_array_equal(block.at(0.6), block.snapshots[2])
    with pytest.raises(UsageError):
        block.at(0.5)
    with pytest.raises(UsageError):
        run(c, record_every=0)


def test_binary_round_trip(tmp_path):
    block = run(cfg("riesz", n=5, d=2, params={"alpha": 0.4}), runs=2, keep_increments=True)
    path = block.save(tmp_path / "t.bin")
    assert path.read_bytes()[:6] == b"CHLTRJ"
    again = TrajectoryBlock.load(path)
    assert again == block
    assert again.kernel_name == "riesz"
    with pytest.raises(UsageError):
        TrajectoryBlock.from_bytes(b"NOTATRAJECTORY")
