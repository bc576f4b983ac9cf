"""Reference solutions of the nonlinear (McKean-Vlasov) limit.

Three independent routes to the time marginals ``rho_t``:

* the closed-form Gaussian for the linear OU kernel,
* Picard iteration: freeze ``rho``, simulate the linear SDE with drift
  ``(b * rho_t)(x)``, re-estimate ``rho``, repeat,
* an explicit conservative finite-volume solver for the 1-d forward equation
  ``d_t rho = (sigma^2/2) rho'' - d_x((b * rho) rho)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import trapezoid

from . import rng
from .errors import ConstraintViolation, NumericalFailure, UsageError
from .gauss_oracle import heat_kernel_lp_constant
from .kernels import KernelSpec, interaction_sum
from .sde_engine import InitialLaw, SimConfig, run_linear

_MODULE = "meanfield_ref"

PICARD_TOL = 1e-3


@dataclass(frozen=True, eq=False)
class DensityEstimate:
    """A time marginal given on a grid, by samples, or both.

    ``axes`` is a tuple of 1-d coordinate arrays (one per dimension) and
    ``values`` the density on their tensor grid.  ``samples`` has shape
    ``(n, d)``.
    """

    time: float
    method: str
    axes: tuple[np.ndarray, ...] | None = None
    values: np.ndarray | None = None
    samples: np.ndarray | None = None
    bandwidth: float | None = None
    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    notes: tuple[str, ...] = field(default=())

    @property
    def dim(self) -> int:
        if self.samples is not None:
            return self.samples.shape[1]
        if self.axes is not None:
            return len(self.axes)
        return len(self.mean)

    def mass(self) -> float:
        if self.values is None:
            return 1.0
        return float(_trapz_nd(self.values, self.axes))

    def lp_norm(self, r: float) -> float:
        if self.values is None:
            raise UsageError("L^r norm needs a gridded density", _MODULE)
        return float(_trapz_nd(np.abs(self.values) ** r, self.axes) ** (1.0 / r))

    def sample(self, n: int, seed: int = 0) -> np.ndarray:
        """Draw ``n`` points (Gaussian closed form, resample, or inverse CDF on a 1-d grid)."""
        gen = rng.generator(seed, n, 17)
        if self.samples is not None:
            return self.samples[gen.integers(0, len(self.samples), n)]
        if self.values is not None and self.dim == 1:
            return grid_quantiles(self, (np.arange(n) + 0.5) / n)[gen.permutation(n)][:, None]
        if self.mean is not None and self.var is not None:
            return self.mean + np.sqrt(self.var) * gen.standard_normal((n, len(self.mean)))
        raise UsageError("cannot sample this density representation", _MODULE)


def _trapz_nd(values: np.ndarray, axes) -> float:
    out = values
    for ax in reversed(axes):
        out = trapezoid(out, ax, axis=-1)
    return out


def grid_quantiles(est: DensityEstimate, probs) -> np.ndarray:
    """Quantiles of a 1-d gridded density (linear interpolation of the trapezoid CDF)."""
    x = est.axes[0]
    f = np.maximum(est.values, 0.0)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(x))])
    cdf /= cdf[-1]
    keep = np.concatenate([[True], np.diff(cdf) > 0])
    return np.interp(probs, cdf[keep], x[keep])


# ---------------------------------------------------------------------------
# closed form


def ou_variance(t: float, var0: float, sigma: float, kappa: float = 1.0) -> float:
    """Solution of ``v' = -2 kappa v + sigma^2`` from ``v(0) = var0``."""
    s = sigma * sigma / (2.0 * kappa)
    return s + (var0 - s) * math.exp(-2.0 * kappa * t)


def exact_ou_density(t: float, mean0, var0: float, sigma: float, kappa: float = 1.0,
                     grid: np.ndarray | None = None) -> DensityEstimate:
    """Gaussian marginal of the linear-OU limit; the mean is conserved.

    With ``grid`` (1-d or shared per axis in d = 2) values are tabulated too.
    """
    if not var0 >= 0 or not sigma > 0 or not t >= 0:
        raise ConstraintViolation("var0 >= 0, sigma > 0, t >= 0", f"var0={var0}, sigma={sigma}, t={t}", _MODULE)
    m = np.atleast_1d(np.asarray(mean0, dtype=float))
    v = ou_variance(t, var0, sigma, kappa)
    var = np.full(m.shape, v)
    axes = values = None
    if grid is not None and v > 0:
        grid = np.asarray(grid, dtype=float)
        axes = tuple(grid for _ in m)
        mesh = np.meshgrid(*axes, indexing="ij")
        values = np.ones_like(mesh[0])
        for k, xk in enumerate(mesh):
            values = values * np.exp(-0.5 * (xk - m[k]) ** 2 / v) / math.sqrt(2 * math.pi * v)
    return DensityEstimate(t, "exact-ou", axes, values, None, None, m, var)


# ---------------------------------------------------------------------------
# kernel density estimation


def silverman_bandwidth(samples: np.ndarray) -> np.ndarray:
    """Per-coordinate Silverman rule ``0.9 min(sd, IQR/1.34) n^{-1/5}``."""
    x = np.asarray(samples, dtype=float)
    n = x.shape[0]
    sd = x.std(axis=0, ddof=1)
    q75, q25 = np.percentile(x, [75, 25], axis=0)
    spread = np.minimum(sd, (q75 - q25) / 1.34)
    spread = np.where(spread > 0, spread, sd)
    return 0.9 * spread * n ** (-0.2)


def _axis_kernels(samples: np.ndarray, axis_grid: np.ndarray, h: float) -> np.ndarray:
    z = (axis_grid[None, :] - samples[:, None]) / h
    return np.exp(-0.5 * z * z) / (h * math.sqrt(2 * math.pi))


def kde_on_grid(samples: np.ndarray, axes: Sequence[np.ndarray], bandwidth: float | np.ndarray | None = None
                ) -> tuple[np.ndarray, np.ndarray]:
    """Product-Gaussian KDE on the tensor grid of ``axes`` (d <= 2); returns (values, bandwidths)."""
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    n, d = x.shape
    if d > 2 or len(axes) != d:
        raise UsageError("gridded KDE supports d <= 2 with one axis per dimension", _MODULE)
    h = silverman_bandwidth(x) if bandwidth is None else np.broadcast_to(np.asarray(bandwidth, float), (d,))
    if d == 1:
        values = np.zeros(len(axes[0]))
        for lo in range(0, n, 4096):
            values += _axis_kernels(x[lo:lo + 4096, 0], axes[0], h[0]).sum(axis=0)
        return values / n, h
    k0 = _axis_kernels(x[:, 0], axes[0], h[0])
    k1 = _axis_kernels(x[:, 1], axes[1], h[1])
    return (k0.T @ k1) / n, h


def kde_lp_norm(samples: np.ndarray, r: float, bandwidth: float | np.ndarray | None = None) -> float:
    """Leave-one-out estimate of ``||rho||_r`` from ``E[rho(X)^{r-1}]``; usable in any dimension."""
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    n, d = x.shape
    h = silverman_bandwidth(x) if bandwidth is None else np.broadcast_to(np.asarray(bandwidth, float), (d,))
    dens = np.zeros(n)
    norm = 1.0 / ((n - 1) * np.prod(h) * (2 * math.pi) ** (d / 2))
    for lo in range(0, n, 1024):
        z = (x[lo:lo + 1024, None, :] - x[None, :, :]) / h
        k = np.exp(-0.5 * np.sum(z * z, axis=-1))
        k[np.arange(k.shape[0]), np.arange(lo, lo + k.shape[0])] = 0.0
        dens[lo:lo + k.shape[0]] = k.sum(axis=1) * norm
    return float(np.mean(dens ** (r - 1)) ** (1.0 / r))


# ---------------------------------------------------------------------------
# Picard iteration


@dataclass(frozen=True, eq=False)
class PicardResult:
    iterates: list[list[DensityEstimate]]  # iterates[k][j] at record time j
    distances: list[np.ndarray]  # sliced-W1 between successive iterates at each time
    converged: bool

    @property
    def final(self) -> list[DensityEstimate]:
        return self.iterates[-1]


def mean_field_drift(kernel: KernelSpec, t: float, x: np.ndarray, ref: np.ndarray, threads: int = 1) -> np.ndarray:
    """``(1/n) sum_k b(t, x, y_k)`` over reference samples ``ref`` (singular pairs masked)."""
    return interaction_sum(kernel, t, x, ref, threads=threads) / ref.shape[0]


def picard_solve(config: SimConfig, iterations: int = 6, n_ref: int = 4000, bandwidth: float | None = None,
                 record_times: Sequence[float] | None = None, grid: np.ndarray | None = None,
                 tol: float = PICARD_TOL, n_slices: int = 64, threads: int = 1) -> PicardResult:
    """Fixed-point iteration for the nonlinear law.

    Iterate ``k+1`` simulates ``n_ref`` independent particles of the linear SDE
    whose drift at step ``s`` averages the kernel over iterate ``k``'s samples
    at the same step.  Every iterate reuses the same noise (common random
    numbers), so successive distances measure the map itself rather than
    Monte Carlo noise.  Iteration stops once the sliced-W1 distance between
    successive iterates is below ``tol`` at every recorded time.
    ``bandwidth=None`` selects Silverman's rule; gridded KDE values are
    attached when ``grid`` is given (d <= 2).
    """
    from .chaos_diagnostics import sliced_w1

    if n_ref < 1000:
        raise ConstraintViolation("n_ref >= 1000", f"n_ref={n_ref}", _MODULE)
    if iterations < 1:
        raise UsageError("iterations must be >= 1", _MODULE)
    dt = config.dt
    if record_times is None:
        record_times = [config.horizon * k / 8 for k in range(1, 9)]
    rec_steps = []
    for t in record_times:
        s = int(round(t / dt))
        if abs(s * dt - t) > 1e-9 * max(1.0, t) or not 0 < s <= config.n_steps:
            raise UsageError(f"record time {t} is not a positive point of the dt grid within the horizon", _MODULE)
        rec_steps.append(s)
    rec_steps = sorted(set(rec_steps))
    lin = config.with_(n_particles=n_ref, partial_r=0)
    axes = tuple(np.asarray(grid, float) for _ in range(config.dim)) if grid is not None and config.dim <= 2 else None

    def to_estimates(path):
        out = []
        for s in rec_steps:
            x = path[s]
            values, bw = None, None
            if axes is not None:
                values, h = kde_on_grid(x, axes, bandwidth)
                bw = float(np.mean(h))
            out.append(DensityEstimate(s * dt, "picard-kde", axes if values is not None else None, values, x, bw,
                                       x.mean(axis=0), x.var(axis=0)))
        return out

    zero = run_linear(lin, lambda t, x: np.zeros_like(x), record_every=1, runs=1, threads=threads)
    # iterate 0 is the initial law held fixed in time
    path = np.broadcast_to(zero.snapshots[0, 0], zero.snapshots[:, 0].shape)
    iterates = [to_estimates(path)]
    distances: list[np.ndarray] = []
    converged = False
    for _ in range(iterations):
        frozen = path

        def drift(t, x, frozen=frozen):
            s = int(round(t / dt))
            return mean_field_drift(config.kernel, t, x, frozen[s], threads)

        new = run_linear(lin, drift, record_every=1, runs=1, threads=threads).snapshots[:, 0]
        dist = np.array([sliced_w1(frozen[s], new[s], n_slices) for s in rec_steps])
        distances.append(dist)
        path = new
        iterates.append(to_estimates(path))
        if np.all(dist < tol):
            converged = True
            break
    return PicardResult(iterates, distances, converged)


# ---------------------------------------------------------------------------
# 1-d Fokker-Planck


def _convolution_matrix(kernel: KernelSpec, t: float, x: np.ndarray) -> np.ndarray:
    dx = x[1] - x[0]
    with np.errstate(all="ignore"):
        k = kernel.drift(t, x[:, None, None], x[None, :, None])[..., 0]
        sing = np.asarray(kernel.singular_at(t, x[:, None, None], x[None, :, None]), bool)
    k = np.where(np.isfinite(k) & ~sing, k, 0.0)
    np.fill_diagonal(k, 0.0)  # cell containing x - y = 0
    return k * dx


def fokker_planck_1d(kernel: KernelSpec, x_min: float, x_max: float, n_cells: int, rho0,
                     sigma: float, horizon: float, dt_pde: float | None = None,
                     record_times: Sequence[float] | None = None, max_halvings: int = 20,
                     time_dependent: bool = False) -> list[DensityEstimate]:
    """Explicit upwind finite-volume solver with zero-flux walls.

    ``rho0`` is a callable evaluated at cell centres (renormalised to unit
    mass) or an array of cell values.  The time step is reduced until
    ``dt <= 0.4 min(dx^2/sigma^2, dx/max|b*rho|)`` at every step; more than
    ``max_halvings`` reductions in total raise :class:`NumericalFailure`.
    """
    if kernel.dim != 1:
        raise ConstraintViolation("d = 1", "fokker_planck_1d needs a one-dimensional kernel", _MODULE)
    if not x_max > x_min or n_cells < 8:
        raise UsageError("need x_max > x_min and at least 8 cells", _MODULE)
    dx = (x_max - x_min) / n_cells
    x = x_min + (np.arange(n_cells) + 0.5) * dx
    rho = np.asarray(rho0(x) if callable(rho0) else rho0, dtype=float).copy()
    if rho.shape != (n_cells,) or np.any(rho < 0):
        raise UsageError("initial density must be nonnegative with one value per cell", _MODULE)
    rho /= rho.sum() * dx
    diff = 0.5 * sigma * sigma
    dt_diff = 0.4 * dx * dx / (sigma * sigma)
    dt = dt_diff if dt_pde is None else min(dt_pde, dt_diff)
    if record_times is None:
        record_times = [horizon]
    targets = sorted(float(t) for t in record_times)
    if targets[-1] > horizon + 1e-12 or targets[0] < 0:
        raise UsageError("record times must lie in [0, horizon]", _MODULE)
    conv = _convolution_matrix(kernel, 0.0, x)
    out: list[DensityEstimate] = []
    axes = (x,)
    t = 0.0
    halvings = 0
    ti = 0
    while ti < len(targets) and targets[ti] <= 1e-14:
        out.append(DensityEstimate(0.0, "fokker-planck", axes, rho.copy()))
        ti += 1
    while ti < len(targets):
        if time_dependent:
            conv = _convolution_matrix(kernel, t, x)
        v = conv @ rho  # velocity at centres
        vf = 0.5 * (v[1:] + v[:-1])  # at interior faces
        vmax = float(np.max(np.abs(vf))) if vf.size else 0.0
        limit = 0.4 * dx / vmax if vmax > 0 else math.inf
        while dt > min(limit, dt_diff) * (1 + 1e-12):
            dt *= 0.5
            halvings += 1
            if halvings > max_halvings:
                raise NumericalFailure(f"CFL refinement exceeded {max_halvings} halvings at t={t:.6g}",
                                       (dt, limit), _MODULE)
        h = min(dt, targets[ti] - t)
        flux = np.where(vf > 0, vf * rho[:-1], vf * rho[1:]) - diff * (rho[1:] - rho[:-1]) / dx
        change = np.zeros_like(rho)
        change[:-1] -= flux
        change[1:] += flux
        rho = rho + (h / dx) * change
        if np.any(rho < -1e-12):
            raise NumericalFailure(f"negative density at t={t:.6g}", (float(rho.min()),), _MODULE)
        rho = np.maximum(rho, 0.0)
        t += h
        if abs(t - targets[ti]) <= 1e-12 * max(1.0, horizon):
            t = targets[ti]
            m = float(np.sum(rho * x) * dx)
            out.append(DensityEstimate(t, "fokker-planck", axes, rho.copy(), mean=np.array([m]),
                                       var=np.array([float(np.sum(rho * (x - m) ** 2) * dx)])))
            ti += 1
    return out


# ---------------------------------------------------------------------------
# density decay


def density_decay_check(estimates: Sequence[DensityEstimate], r: float, grid: np.ndarray | None = None
                        ) -> list[tuple[float, float]]:
    """Series ``(t, ||rho_t||_r * t^{(d/2)(1 - 1/r)})``.

    Gridded estimates use the trapezoid rule; sample-only estimates are
    projected onto ``grid`` by KDE when d <= 2 and use a leave-one-out KDE
    norm (with a bias warning) beyond that.
    """
    if not r >= 1:
        raise ConstraintViolation("r >= 1", f"r={r}", _MODULE)
    ests = [e for e in estimates if e.time > 0]
    if len(ests) < 4:
        raise UsageError("need estimates at >= 4 positive times", _MODULE)
    times = np.array([e.time for e in ests])
    if times.max() / times.min() < 10 - 1e-9:
        raise UsageError("estimate times must span at least a decade", _MODULE)
    out = []
    for e in ests:
        d = e.dim
        if e.values is not None:
            norm = e.lp_norm(r)
        elif e.samples is not None and d <= 2:
            g = _auto_grid(e.samples) if grid is None else np.asarray(grid, float)
            axes = [g] * d
            values, _ = kde_on_grid(e.samples, axes)
            norm = float(_trapz_nd(values**r, axes) ** (1.0 / r))
        elif e.samples is not None:
            warnings.warn("density norm in d > 2 comes from a leave-one-out KDE and is biased", stacklevel=2)
            norm = kde_lp_norm(e.samples, r)
        elif e.var is not None:
            norm = float(np.prod([heat_kernel_lp_constant(r, 1) * v ** (-0.5 * (1 - 1 / r)) for v in e.var]))
        else:
            raise UsageError("estimate carries neither values nor samples", _MODULE)
        out.append((e.time, norm * e.time ** (0.5 * d * (1 - 1 / r))))
    return out


def _auto_grid(samples: np.ndarray, n: int = 257) -> np.ndarray:
    lo, hi = np.min(samples), np.max(samples)
    pad = 0.25 * (hi - lo) + 1e-9
    return np.linspace(lo - pad, hi + pad, n)


def gaussian_initial(mean: float | Sequence[float], var: float) -> Callable:
    m = float(np.atleast_1d(mean)[0])

    def f(x):
        return np.exp(-0.5 * (x - m) ** 2 / var)

    return f


def initial_density_1d(law: InitialLaw) -> Callable:
    """Cell-centre density of an initial law for the PDE solver (point masses are not representable)."""
    if law.kind == "gaussian":
        return gaussian_initial(law.mean_vector(1), float(law.variance_vector(1)[0]))
    if law.kind == "uniform":
        m = float(law.mean_vector(1)[0])
        w = float(law._vec(law.scale, 1)[0])
        return lambda x: ((x >= m - w) & (x <= m + w)).astype(float)
    raise UsageError("the PDE solver needs an initial law with a density", _MODULE)
