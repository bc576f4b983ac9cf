"""Propagation-of-chaos diagnostics.

Distances between empirical marginals and reference laws, the Kolmogorov
fourth-moment ratio, covariance decay between tagged particles, and the
martingale-problem residual ``G(mu^N)`` built from test functions with
analytic derivatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import wasserstein_distance

from . import rng
from .errors import UsageError
from .gauss_oracle import fit_loglog_slope
from .kernels import KernelSpec, interaction_sum
from .meanfield_ref import DensityEstimate
from .sde_engine import TrajectoryBlock

_MODULE = "chaos_diagnostics"

Z95 = 1.959963984540054
METHODS = ("exact-w1-1d", "sliced-w1", "energy-distance")


@dataclass(frozen=True)
class DiagnosticsReport:
    name: str
    series: list[tuple[float, float, float, float]]  # (abscissa, value, ci_low, ci_high)
    fitted_slope: float | None = None
    metadata: Mapping[str, object] = field(default_factory=dict)

    @property
    def abscissae(self) -> np.ndarray:
        return np.array([s[0] for s in self.series])

    @property
    def values(self) -> np.ndarray:
        return np.array([s[1] for s in self.series])

    def rows(self) -> list[dict]:
        return [{"x": x, "value": v, "ci_low": lo, "ci_high": hi} for x, v, lo, hi in self.series]


def _mean_ci(samples: np.ndarray) -> tuple[float, float, float]:
    v = np.asarray(samples, dtype=float)
    m = float(v.mean())
    if v.size < 2:
        return m, m, m
    half = Z95 * float(v.std(ddof=1)) / math.sqrt(v.size)
    return m, m - half, m + half


# ---------------------------------------------------------------------------
# distances


def _as_1d(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 2:
        if a.shape[1] != 1:
            raise UsageError("exact W1 needs one-dimensional samples", _MODULE)
        a = a[:, 0]
    return a.ravel()


def w1_exact_1d(a, b, weights_a=None, weights_b=None) -> float:
    """Exact W1 between 1-d empirical measures.

    Equal-size unweighted samples use the sorted (quantile) coupling directly.
    """
    a, b = _as_1d(a), _as_1d(b)
    if weights_a is None and weights_b is None and a.size == b.size:
        return float(np.mean(np.abs(np.sort(a) - np.sort(b))))
    return float(wasserstein_distance(a, b, weights_a, weights_b))


def _int_ndtr(z):
    """Antiderivative of the standard normal CDF: ``z Phi(z) + phi(z)``."""
    return z * ndtr(z) + np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)


def w1_to_gaussian(samples, mean: float, var: float) -> float:
    """Exact ``int |F_n - Phi((x - mean)/sd)| dx`` for 1-d samples."""
    x = np.sort(_as_1d(samples))
    n = x.size
    sd = math.sqrt(var)
    if sd == 0:
        return float(np.mean(np.abs(x - mean)))
    z = (x - mean) / sd
    total = _int_ndtr(z[0]) + _int_ndtr(-z[-1])
    a, b = z[:-1], z[1:]
    c = np.arange(1, n) / n
    # split each gap at the crossing Phi(z*) = c
    zs = np.clip(ndtri(c), a, b)
    left = (zs - a) * c - (_int_ndtr(zs) - _int_ndtr(a))  # c >= Phi on [a, z*]
    right = (_int_ndtr(b) - _int_ndtr(zs)) - (b - zs) * c
    total += np.sum(np.abs(left) + np.abs(right))
    return float(total * sd)


def _cdf_on(ref, x: np.ndarray) -> np.ndarray:
    if isinstance(ref, DensityEstimate):
        if ref.samples is not None:
            s = np.sort(_as_1d(ref.samples))
            return np.searchsorted(s, x, side="right") / s.size
        if ref.values is not None:
            g = ref.axes[0]
            f = np.maximum(ref.values, 0.0)
            cdf = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(g))])
            return np.interp(x, g, cdf / cdf[-1], left=0.0, right=1.0)
        return ndtr((x - float(ref.mean[0])) / math.sqrt(float(ref.var[0])))
    s = np.sort(_as_1d(ref))
    return np.searchsorted(s, x, side="right") / s.size


def _support(ref) -> np.ndarray:
    if isinstance(ref, DensityEstimate):
        if ref.samples is not None:
            return _as_1d(ref.samples)
        if ref.values is not None:
            return ref.axes[0]
        m, sd = float(ref.mean[0]), math.sqrt(float(ref.var[0]))
        return m + sd * np.linspace(-10, 10, 8193)
    return _as_1d(ref)


def w1_1d(a, b) -> float:
    """W1 between two 1-d laws given as samples or :class:`DensityEstimate`.

    Sample/sample and sample/Gaussian pairs are exact; otherwise ``|F - G|`` is
    integrated by the midpoint rule over the merged support knots.
    """
    def kind(r):
        if not isinstance(r, DensityEstimate):
            return "samples"
        if r.samples is not None:
            return "samples"
        if r.method == "exact-ou" or r.values is None:
            return "gaussian"
        return "grid"

    ka, kb = kind(a), kind(b)
    get = lambda r: r.samples if isinstance(r, DensityEstimate) else r  # noqa: E731
    if ka == kb == "samples":
        return w1_exact_1d(get(a), get(b))
    if {ka, kb} == {"samples", "gaussian"}:
        s, g = (a, b) if ka == "samples" else (b, a)
        return w1_to_gaussian(get(s), float(g.mean[0]), float(g.var[0]))
    knots = np.unique(np.concatenate([_support(a), _support(b)]))
    lo, hi = knots[0], knots[-1]
    knots = np.unique(np.concatenate([knots, np.linspace(lo, hi, 16385)]))
    mid = 0.5 * (knots[1:] + knots[:-1])
    return float(np.sum(np.abs(_cdf_on(a, mid) - _cdf_on(b, mid)) * np.diff(knots)))


def slicing_directions(d: int, n_slices: int, seed: int = 0) -> np.ndarray:
    if d == 1:
        return np.ones((1, 1))
    g = rng.generator(seed, d, n_slices).standard_normal((n_slices, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


class _SortedColumns:
    """Column-sorted reference sample with prefix sums, so ``int F`` is cheap to evaluate."""

    def __init__(self, b: np.ndarray):
        self.b = np.sort(b, axis=0)
        self.m = self.b.shape[0]
        self.prefix = np.vstack([np.zeros((1, self.b.shape[1])), np.cumsum(self.b, axis=0)])

    def antiderivative(self, x: np.ndarray, j: int) -> np.ndarray:
        """``int_{-inf}^x F(y) dy`` for column ``j``."""
        k = np.searchsorted(self.b[:, j], x, side="right")
        return (k * x - self.prefix[k, j]) / self.m


def _w1_against(a: np.ndarray, ref: _SortedColumns) -> np.ndarray:
    """Exact W1 per column between a sample ``a (n, k)`` and a sorted reference.

    The sample CDF is a constant c between consecutive sample points, and the
    reference CDF crosses c at one order statistic, so each piece of
    ``int |F_a - F_b|`` is closed form in the reference antiderivative.
    """
    a = np.sort(a, axis=0)
    n, m, b = a.shape[0], ref.m, ref.b
    i = np.arange(n + 1)
    c = (i / n)[:, None]
    cross = -(-i * m // n) - 1  # first order statistic with F_b >= i/n; -1 means everywhere
    out = np.empty(a.shape[1])
    for j in range(a.shape[1]):
        knots = np.concatenate([[min(a[0, j], b[0, j])], a[:, j], [max(a[-1, j], b[-1, j])]])
        lo, hi = knots[:-1], knots[1:]
        xs = np.clip(np.where(cross < 0, -np.inf, b[np.maximum(cross, 0), j]), lo, hi)
        f_lo, f_xs, f_hi = (ref.antiderivative(x, j) for x in (lo, xs, hi))
        cj = c[:, 0]
        # both pieces are nonnegative exactly; clamp the prefix-sum roundoff
        below = np.maximum(cj * (xs - lo) - (f_xs - f_lo), 0.0)
        above = np.maximum((f_hi - f_xs) - cj * (hi - xs), 0.0)
        out[j] = np.sum(below + above)
    return out


def sliced_w1(a, b, n_slices: int = 64, seed: int = 0) -> float:
    """Average 1-d W1 over a fixed seeded set of projection directions (exact W1 when d = 1)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[0] == 1 and a.shape[1] > 1 and b.shape[1] == 1:
        a = a.T
    if a.shape[1] != b.shape[1]:
        raise UsageError("samples differ in dimension", _MODULE)
    dirs = slicing_directions(a.shape[1], n_slices, seed)
    if a.shape[0] == b.shape[0]:
        # sorted coupling, exact and free of cancellation
        return float(np.mean(np.abs(np.sort(a @ dirs.T, axis=0) - np.sort(b @ dirs.T, axis=0))))
    return _sliced_w1_prepared(a, _SortedColumns(b @ dirs.T), dirs)


def _sliced_w1_prepared(a: np.ndarray, ref: _SortedColumns, dirs: np.ndarray) -> float:
    return float(np.mean(_w1_against(a @ dirs.T, ref)))


def energy_distance(a, b) -> float:
    """``sqrt(2 E|X-Y| - E|X-X'| - E|Y-Y'|)`` between empirical measures (any d)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[0] == 1 and a.shape[1] > 1:
        a, b = a.T, b.reshape(-1, 1)

    def mean_dist(x, y):
        total = 0.0
        for lo in range(0, x.shape[0], 512):
            z = x[lo:lo + 512, None, :] - y[None, :, :]
            total += np.sqrt(np.sum(z * z, axis=-1)).sum()
        return total / (x.shape[0] * y.shape[0])

    val = 2 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)
    return float(math.sqrt(max(val, 0.0)))


def distance(sample: np.ndarray, reference, method: str = "exact-w1-1d", n_slices: int = 64,
             n_reference: int = 20000, seed: int = 0) -> float:
    """Distance between an empirical sample ``(n, d)`` and a reference law."""
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; choose from {', '.join(METHODS)}", _MODULE)
    sample = np.atleast_2d(np.asarray(sample, dtype=float))
    if sample.shape[0] == 1 and sample.shape[1] > 1:
        sample = sample.T
    d = sample.shape[1]
    if method == "exact-w1-1d":
        if d != 1:
            raise UsageError("exact-w1-1d needs d = 1", _MODULE)
        return w1_1d(sample[:, 0], reference)
    if method == "energy-distance":
        n_reference = min(n_reference, 4000)  # quadratic cost in the reference size
    ref = reference.sample(n_reference, seed) if isinstance(reference, DensityEstimate) else np.atleast_2d(reference)
    if method == "sliced-w1":
        if d == 1:
            return w1_1d(sample[:, 0], reference)
        return sliced_w1(sample, ref, n_slices, seed)
    return energy_distance(sample, ref)


def _fit(xs, ys) -> float:
    return fit_loglog_slope(xs, ys)


def marginal_distance(ensembles: Mapping[int, TrajectoryBlock], reference, t: float,
                      method: str = "exact-w1-1d", n_slices: int = 64, seed: int = 0) -> DiagnosticsReport:
    """Distance from each run's empirical time-``t`` marginal to the reference; averaged over runs.

    ``reference`` is a :class:`DensityEstimate`, a mapping from time to one,
    or a callable ``t -> DensityEstimate``.
    """
    if isinstance(reference, Mapping):
        if t not in reference:
            raise UsageError(f"reference has no marginal at t={t}", _MODULE)
        ref = reference[t]
    elif callable(reference):
        ref = reference(t)
    else:
        ref = reference
    if ref is None or (isinstance(ref, DensityEstimate) and abs(ref.time - t) > 1e-9):
        raise UsageError(f"reference marginal missing at t={t}", _MODULE)
    dist = lambda x: distance(x, ref, method, n_slices, seed=seed)  # noqa: E731
    d = next(iter(ensembles.values())).dim if ensembles else 1
    if method == "sliced-w1" and d > 1:
        # draw, project and sort the reference once for every run
        pts = ref.sample(20000, seed) if isinstance(ref, DensityEstimate) else np.atleast_2d(ref)
        dirs = slicing_directions(d, n_slices, seed)
        prepared = _SortedColumns(pts @ dirs.T)
        dist = lambda x: _sliced_w1_prepared(x, prepared, dirs)  # noqa: E731
    series = []
    for n in sorted(ensembles):
        block = ensembles[n]
        snaps = block.at(t)
        vals = [dist(snaps[r]) for r in range(block.n_runs)]
        series.append((float(n), *_mean_ci(vals)))
    slope = _fit([s[0] for s in series], [s[1] for s in series]) if len(series) >= 2 else None
    return DiagnosticsReport("marginal_distance", series, slope,
                             {"method": method, "t": t, "N": sorted(ensembles),
                              "note": "slope expectation -1/2 comes from the empirical-measure rate, not a theorem"})


# ---------------------------------------------------------------------------
# tightness


def tightness_moment(traj: TrajectoryBlock, pairs: Sequence[tuple[float, float]],
                     particles: Sequence[int] | None = None) -> DiagnosticsReport:
    """``E|X_t - X_s|^4 / (t - s)^2`` per pair, averaged over particles.

    The CI treats runs as independent replicas (particle averages within a
    run are correlated); with a single run it falls back to particles.
    """
    idx = slice(None) if particles is None else list(particles)
    series, notes = [], []
    for s, t in pairs:
        if s == t:
            notes.append(f"skipped s = t = {s}")
            continue
        if s > t:
            s, t = t, s
        inc = traj.at(t)[:, idx] - traj.at(s)[:, idx]
        ratio = np.sum(inc * inc, axis=-1) ** 2 / (t - s) ** 2  # (runs, particles)
        per = ratio.mean(axis=1) if traj.n_runs >= 2 else ratio[0]
        series.append((t - s, *_mean_ci(per)))
    return DiagnosticsReport("tightness_moment", series, None,
                             {"pairs": [tuple(p) for p in pairs], "notes": notes})


# ---------------------------------------------------------------------------
# test functions


@dataclass(frozen=True, eq=False)
class TestFunction:
    """A C^2_b function with analytic gradient and Laplacian, all acting on ``(..., d)`` arrays."""

    __test__ = False  # not a pytest class

    name: str
    f: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    laplacian: Callable[[np.ndarray], np.ndarray]


def cosine(a) -> TestFunction:
    """``x -> cos(a . x)``; a scalar ``a`` acts on the first coordinate only."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    a2 = float(a @ a)

    def vec(x):
        if a.size == x.shape[-1]:
            return a
        if a.size == 1:
            return np.concatenate([a, np.zeros(x.shape[-1] - 1)])
        raise UsageError(f"cosine direction has {a.size} entries but points have dimension {x.shape[-1]}", _MODULE)

    def f(x):
        return np.cos(x @ vec(x))

    def grad(x):
        v = vec(x)
        return -np.sin(x @ v)[..., None] * v

    def lap(x):
        return -a2 * np.cos(x @ vec(x))

    return TestFunction(f"cos({a.tolist()}.x)", f, grad, lap)


def inverse_quadratic() -> TestFunction:
    """``x -> 1 / (1 + |x|^2)``."""

    def f(x):
        return 1.0 / (1.0 + np.sum(x * x, axis=-1))

    def grad(x):
        u = 1.0 + np.sum(x * x, axis=-1)
        return -2.0 * x / (u * u)[..., None]

    def lap(x):
        r2 = np.sum(x * x, axis=-1)
        u = 1.0 + r2
        return (8.0 * r2 - 2.0 * x.shape[-1] * u) / u**3

    return TestFunction("1/(1+|x|^2)", f, grad, lap)


TEST_FUNCTIONS: dict[str, Callable[..., TestFunction]] = {"cos": cosine, "inverse-quadratic": inverse_quadratic}


def test_function(name: str, **params) -> TestFunction:
    if name not in TEST_FUNCTIONS:
        raise UsageError(f"unknown test function {name!r}; choose from {', '.join(TEST_FUNCTIONS)}", _MODULE)
    if name == "cos":
        return cosine(params.get("a", 1.0))
    return inverse_quadratic()


test_function.__test__ = False


# bounded weights phi(x_{t_1}, ..., x_{t_a}); each receives an array (..., a, d)
PHI_CATALOGUE: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "one": lambda xs: np.ones(xs.shape[:-2]),
    "zero": lambda xs: np.zeros(xs.shape[:-2]),
    "inverse-quadratic": lambda xs: np.prod(1.0 / (1.0 + np.sum(xs * xs, axis=-1)), axis=-1),
    "tanh": lambda xs: np.prod(np.tanh(xs[..., 0]), axis=-1),
}

SCALAR_FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "one": lambda x: np.ones(x.shape[:-1]),
    "tanh": lambda x: np.tanh(x[..., 0]),
    "cos": lambda x: np.cos(x[..., 0]),
    "inverse-quadratic": lambda x: 1.0 / (1.0 + np.sum(x * x, axis=-1)),
}


def _phi(phi) -> Callable:
    if callable(phi):
        return phi
    if phi not in PHI_CATALOGUE:
        raise UsageError(f"unknown phi {phi!r}; choose from {', '.join(PHI_CATALOGUE)}", _MODULE)
    return PHI_CATALOGUE[phi]


def _scalar(g) -> Callable:
    if callable(g):
        return g
    if g not in SCALAR_FUNCTIONS:
        raise UsageError(f"unknown function {g!r}; choose from {', '.join(SCALAR_FUNCTIONS)}", _MODULE)
    return SCALAR_FUNCTIONS[g]


# ---------------------------------------------------------------------------
# martingale-problem residual


def g_values(traj: TrajectoryBlock, kernel: KernelSpec | None, f: TestFunction, phi, phi_times: Sequence[float],
             s: float, t: float, threads: int = 1) -> np.ndarray:
    """``G(mu^N)`` for every run of ``traj``.

    ``kernel=None`` drops the interaction term, leaving the driftless Dynkin
    residual.  The time integral is a left-endpoint Riemann sum on the
    recorded grid between ``s`` and ``t``.
    """
    if not s < t:
        raise UsageError("g_functional needs s < t", _MODULE)
    if any(u > s + 1e-12 for u in phi_times):
        raise UsageError("phi times must not exceed s", _MODULE)
    try:
        ks, kt = traj.index_of(s), traj.index_of(t)
        kphi = [traj.index_of(u) for u in phi_times]
    except UsageError as exc:
        raise UsageError(f"{exc.args[0]} (times s, t and phi times must be recorded; lower record_every)",
                         _MODULE) from None
    sigma2 = traj.sigma**2
    n = traj.n_particles
    integral = np.zeros(traj.snapshots.shape[1:3])
    for k in range(ks, kt):
        x = traj.snapshots[k]
        du = traj.times[k + 1] - traj.times[k]
        term = 0.5 * sigma2 * f.laplacian(x)
        if kernel is not None:
            drift = interaction_sum(kernel, traj.times[k], x, x, self_offset=0, threads=threads) / n
            term = term + np.sum(f.grad(x) * drift, axis=-1)
        integral += term * du
    resid = f.f(traj.snapshots[kt]) - f.f(traj.snapshots[ks]) - integral
    xs = np.stack([traj.snapshots[k] for k in kphi], axis=-2) if kphi else traj.snapshots[ks][..., None, :]
    weights = _phi(phi)(xs)
    return np.mean(weights * resid, axis=1)


def g_functional(ensembles: Mapping[int, TrajectoryBlock], kernel: KernelSpec | None, f: TestFunction,
                 phi, phi_times: Sequence[float], s: float, t: float, threads: int = 1) -> DiagnosticsReport:
    """``E[G(mu^N)^2]`` over runs for each ``N``, with a log-log slope against ``N``."""
    series = []
    for n in sorted(ensembles):
        g = g_values(ensembles[n], kernel, f, phi, phi_times, s, t, threads)
        series.append((float(n), *_mean_ci(g * g)))
    slope = _fit([x[0] for x in series], [x[1] for x in series]) if len(series) >= 2 else None
    return DiagnosticsReport("g_functional", series, slope,
                             {"N": sorted(ensembles), "f": f.name, "phi": getattr(phi, "__name__", phi),
                              "phi_times": list(phi_times), "s": s, "t": t,
                              "note": "slope expectation -1 comes from the estimator structure"})


# ---------------------------------------------------------------------------
# independence


def independence_test(ensembles: Mapping[int, TrajectoryBlock], g, h, t: float,
                      particles: tuple[int, int] = (0, 1)) -> DiagnosticsReport:
    """``|Cov(g(X^i_t), h(X^j_t))|`` across runs for each ``N``.

    With a single run no covariance across replicas exists; the entry is NaN
    and ``metadata['ci_unavailable']`` lists the affected ``N``.
    """
    i, j = particles
    if i == j:
        raise UsageError("independence test needs two distinct tagged particles", _MODULE)
    gf, hf = _scalar(g), _scalar(h)
    series, flagged = [], []
    for n in sorted(ensembles):
        x = ensembles[n].at(t)
        if max(i, j) >= x.shape[1]:
            raise UsageError(f"tagged particle index exceeds N={n}", _MODULE)
        a, b = gf(x[:, i]), hf(x[:, j])
        if x.shape[0] < 2:
            flagged.append(n)
            series.append((float(n), math.nan, math.nan, math.nan))
            continue
        prod = (a - a.mean()) * (b - b.mean())
        cov = float(prod.sum() / (prod.size - 1))
        half = Z95 * float(prod.std(ddof=1)) / math.sqrt(prod.size)
        v = abs(cov)
        series.append((float(n), v, max(0.0, v - half), v + half))
    ok = [(x, v) for x, v, _, _ in series if np.isfinite(v)]
    slope = _fit(*zip(*ok)) if len(ok) >= 2 else None
    return DiagnosticsReport("independence_test", series, slope,
                             {"N": sorted(ensembles), "t": t, "particles": list(particles),
                              "ci_unavailable": flagged})
