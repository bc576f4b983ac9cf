"""Drift-energy path functionals, Girsanov log-weights and exponential-moment estimators.

For a trajectory on the Euler grid ``t_s = s dt`` the drift field ``beta`` is
evaluated at left endpoints.  With ``r = 0`` it is the full drift of every
particle.  With ``r > 0`` the first ``r`` coordinates carry full drifts
``(1/N) sum_{j != i} b(t, x_i, x_j)`` and every other coordinate ``j`` carries
only its coupling to the first block, ``(1/N) sum_{l < r} b(t, x_j, x_l)``.

The log-weight removes ``beta`` from a path driven by ``sigma dW``::

    log Z = -sum_s beta_s . dW_s / sigma - sum_s |beta_s|^2 dt / (2 sigma^2)

which is an exact discrete martingale with mean one when the stored
increments are the reference Brownian increments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng
from .errors import EstimationFailure, UsageError
from .kernels import KernelSpec, builtin, interaction_sum
from .sde_engine import InitialLaw, SimConfig, TrajectoryBlock, particle_drift, run

_MODULE = "girsanov_lab"

MIN_PATHS = 100
MIN_RESAMPLES = 1000


def beta_field(kernel: KernelSpec, t: float, x: np.ndarray, r: int = 0, threads: int = 1) -> np.ndarray:
    """Drift field ``(runs, N, d)`` whose energy and Ito integral define ``Z^{(r)}``."""
    R, N, d = x.shape
    if r == 0:
        return particle_drift(kernel, t, x, 0, threads)
    out = np.empty_like(x)
    out[:, :r] = interaction_sum(kernel, t, x[:, :r], x, self_offset=0, threads=threads) / N
    out[:, r:] = interaction_sum(kernel, t, x[:, r:], x[:, :r], threads=threads) / N
    return out


@dataclass(frozen=True, eq=False)
class PathFunctionalAccumulator:
    """Per-run running sums on the step grid.

    ``energy_path[s, k]`` is ``sum_{u < s} |beta_u|^2 dt`` for run ``k``;
    ``ito_path`` likewise holds ``sum_{u < s} beta_u . dW_u`` (None when the
    trajectory carries no increments).
    """

    r: int
    sigma: float
    dt: float
    energy_path: np.ndarray  # (steps + 1, runs)
    ito_path: np.ndarray | None = field(default=None)

    @property
    def drift_energy(self) -> np.ndarray:
        return self.energy_path[-1]

    @property
    def ito_sum(self) -> np.ndarray:
        if self.ito_path is None:
            raise UsageError("trajectory was recorded without increments; rerun with keep_increments", _MODULE)
        return self.ito_path[-1]

    @property
    def n_paths(self) -> int:
        return self.energy_path.shape[1]

    def log_weight(self) -> np.ndarray:
        """``log Z_T^{(r)}`` per run."""
        s = self.sigma
        return -self.ito_sum / s - self.drift_energy / (2.0 * s * s)


def _check_grid(traj: TrajectoryBlock, config: SimConfig, r: int):
    if r < 0 or r >= config.n_particles:
        raise UsageError(f"r={r} must satisfy 0 <= r < N={config.n_particles}", _MODULE)
    if traj.n_particles != config.n_particles or traj.dim != config.dim:
        raise UsageError("trajectory shape does not match the config (N or d differ)", _MODULE)
    if abs(traj.dt - config.dt) > 1e-12 * config.dt:
        raise UsageError(f"grid mismatch: trajectory dt={traj.dt}, config dt={config.dt}", _MODULE)
    if traj.record_every != 1 or len(traj.times) != config.n_steps + 1:
        raise UsageError("grid mismatch: path functionals need every step recorded (record_every=1)", _MODULE)


def drift_energy(traj: TrajectoryBlock, config: SimConfig, r: int = 0, threads: int = 1) -> PathFunctionalAccumulator:
    """Riemann sums of ``|beta^{(r)}|^2`` (and ``beta . dW`` when increments are stored).

    ``config`` supplies the kernel; the trajectory may have been simulated
    under any reference dynamics on the same grid.
    """
    _check_grid(traj, config, r)
    steps = len(traj.times) - 1
    R = traj.n_runs
    energy = np.zeros((steps + 1, R))
    ito = np.zeros((steps + 1, R)) if traj.increments is not None else None
    for s in range(steps):
        beta = beta_field(config.kernel, traj.times[s], traj.snapshots[s], r, threads)
        energy[s + 1] = energy[s] + np.sum(beta * beta, axis=(1, 2)) * traj.dt
        if ito is not None:
            ito[s + 1] = ito[s] + np.sum(beta * traj.increments[s], axis=(1, 2))
    return PathFunctionalAccumulator(r, traj.sigma, traj.dt, energy, ito)


def weight(traj: TrajectoryBlock, config: SimConfig, r: int = 0, threads: int = 1) -> np.ndarray:
    """``log Z_T^{(r)}`` for every run of ``traj``."""
    if traj.increments is None:
        raise UsageError("weight needs stored Brownian increments (keep_increments=True)", _MODULE)
    return drift_energy(traj, config, r, threads).log_weight()


# ---------------------------------------------------------------------------
# estimators


@dataclass(frozen=True)
class ExpMomentEstimate:
    alpha: float
    log_mean_exp: float
    bootstrap_ci: tuple[float, float]
    n_paths: int
    diverged_fraction: float

    @property
    def ci_low(self) -> float:
        return self.bootstrap_ci[0]

    @property
    def ci_high(self) -> float:
        return self.bootstrap_ci[1]

    def overlaps(self, other: "ExpMomentEstimate") -> bool:
        return self.ci_low <= other.ci_high and other.ci_low <= self.ci_high


def _log_mean_exp(a: np.ndarray, axis=-1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.mean(np.exp(a - m), axis=axis))


def log_mean_exp_estimate(log_values, alpha: float = 1.0, n_resamples: int = MIN_RESAMPLES,
                          level: float = 0.95, seed: int = 0) -> ExpMomentEstimate:
    """Estimate ``log E[exp(log_values)]`` with a percentile bootstrap CI.

    Non-finite entries count as diverged and are excluded from the estimate.
    """
    a = np.asarray(log_values, dtype=float).ravel()
    n = a.size
    if n < MIN_PATHS:
        raise UsageError(f"need at least {MIN_PATHS} independent paths, got {n}", _MODULE)
    if n_resamples < MIN_RESAMPLES:
        raise UsageError(f"need at least {MIN_RESAMPLES} bootstrap resamples, got {n_resamples}", _MODULE)
    finite = np.isfinite(a)
    diverged = 1.0 - finite.mean()
    if not finite.any():
        raise EstimationFailure("every path diverged; the exponential moment is not estimable", _MODULE)
    a = a[finite]
    est = float(_log_mean_exp(a))
    gen = rng.generator(seed, a.size, n_resamples)
    boot = np.empty(n_resamples)
    block = max(1, (1 << 22) // a.size)
    for lo in range(0, n_resamples, block):
        hi = min(n_resamples, lo + block)
        idx = gen.integers(0, a.size, size=(hi - lo, a.size))
        boot[lo:hi] = _log_mean_exp(a[idx], axis=1)
    q = (1.0 - level) / 2.0
    low, high = np.quantile(boot, [q, 1.0 - q])
    return ExpMomentEstimate(float(alpha), est, (float(min(low, est)), float(max(high, est))), n, float(diverged))


def exp_moment(functional, alpha: float, n_resamples: int = MIN_RESAMPLES, level: float = 0.95,
               seed: int = 0) -> ExpMomentEstimate:
    """``log E[exp(alpha * F)]`` over paths; ``F`` is a per-path array or an accumulator's drift energy."""
    if not alpha > 0:
        raise UsageError(f"alpha must be positive, got {alpha}", _MODULE)
    values = functional.drift_energy if isinstance(functional, PathFunctionalAccumulator) else functional
    with np.errstate(over="ignore", invalid="ignore"):
        scaled = alpha * np.asarray(values, dtype=float)
    return log_mean_exp_estimate(scaled, alpha, n_resamples, level, seed)


def weight_moment(acc: PathFunctionalAccumulator, power: float = 1.0, n_resamples: int = MIN_RESAMPLES,
                  level: float = 0.95, seed: int = 0) -> ExpMomentEstimate:
    """``log E[Z^power]``; ``power=1`` checks the martingale property, ``power=-2`` the inverse moment."""
    with np.errstate(over="ignore", invalid="ignore"):
        scaled = power * acc.log_weight()
    return log_mean_exp_estimate(scaled, power, n_resamples, level, seed)


# ---------------------------------------------------------------------------
# scaling study


@dataclass(frozen=True)
class ScalingRow:
    n_particles: int
    full_energy_mean: float
    partial_energy_mean: float
    exp_moment_partial: ExpMomentEstimate | None
    error: str | None = None


def novikov_scaling_study(kernel: KernelSpec, n_list: Sequence[int], horizon: float, alpha: float,
                          dt: float = 0.01, n_paths: int = 200, seed: int = 0,
                          initial_law: InitialLaw | None = None, diffusion: float = math.sqrt(2.0),
                          threads: int = 1) -> list[ScalingRow]:
    """Full-drift energy under driftless motion versus the ``r = 1`` partial functional under
    the partially interacting reference, for each ``N`` in ``n_list``.

    Estimation failures are recorded in the row's ``error`` field and the
    sweep continues.
    """
    n_list = [int(n) for n in n_list]
    if any(n < 2 for n in n_list) or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise UsageError("N list must be increasing with every N >= 2", _MODULE)
    law = initial_law if initial_law is not None else InitialLaw("gaussian")
    d = kernel.dim
    free = builtin("zero", {"d": d})
    rows = []
    for n in n_list:
        cfg = SimConfig(n, d, horizon, dt, kernel, law, seed, diffusion)
        driftless = run(cfg.with_(kernel=free), runs=n_paths, threads=threads)
        full = drift_energy(driftless, cfg, 0, threads).drift_energy
        partial_cfg = cfg.with_(partial_r=1)
        ref = run(partial_cfg, runs=n_paths, threads=threads)
        part = drift_energy(ref, cfg, 1, threads).drift_energy
        try:
            est, err = exp_moment(part, alpha, seed=seed), None
        except EstimationFailure as exc:
            est, err = None, str(exc)
        rows.append(ScalingRow(n, float(np.mean(full)), float(np.mean(part)), est, err))
    return rows
