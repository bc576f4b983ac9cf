"""Heat-kernel norms and the Gaussian convolution bound for squared dominators.

The central quantity is

    I(t1, t2; s) = int_{t1}^{t2} int h_t(z)^2 g_{t-t1}(z - s) dz dt,

the expected squared drift accumulated by a Brownian motion started at
distance ``s`` from a frozen partner over the window ``[t1, t2]``.  It is
bounded by ``C0 (t2 - t1)^e`` with ``e = (q-2)/q - d/p``; the sweep reports the
empirical growth exponent and the smallest constant compatible with the data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .errors import ConstraintViolation, NumericalFailure, UsageError
from .kernels import ExponentPair, KernelSpec, _geometric_total
from .quadrature import geometric_edges, panel_nodes, sphere_area, sphere_directions

_MODULE = "gauss_oracle"

REL_TOL = 1e-4
MAX_LEVEL = 5


def heat_kernel_lp_constant(p: float, d: int) -> float:
    """``C_p = (2 pi)^{-(d/2)(1-1/p)} p^{-d/(2p)}``."""
    if p < 1:
        raise ConstraintViolation("p >= 1", f"p={p} must be >= 1", _MODULE)
    return (2.0 * math.pi) ** (-(d / 2.0) * (1.0 - 1.0 / p)) * p ** (-d / (2.0 * p))


def heat_kernel_lp_norm(t: float, p: float, d: int) -> float:
    """``||g_t||_p = C_p t^{-(d/2)(1-1/p)}`` for the centred Gaussian density of variance t."""
    if not t > 0:
        raise ConstraintViolation("t > 0", f"t={t} must be positive", _MODULE)
    return heat_kernel_lp_constant(p, d) * t ** (-(d / 2.0) * (1.0 - 1.0 / p))


def heat_kernel_lp_norm_quad(t: float, p: float, d: int) -> float:
    """Independent check of :func:`heat_kernel_lp_norm` by adaptive radial quadrature."""
    def integrand(r):
        return r ** (d - 1) * ((2 * math.pi * t) ** (-d / 2) * math.exp(-r * r / (2 * t))) ** p

    scale = math.sqrt(t / p)
    edges = [0.0, scale, 4 * scale, 16 * scale, math.inf]
    val = sum(integrate.quad(integrand, a, b, epsabs=0.0, epsrel=1e-13, limit=200)[0]
              for a, b in zip(edges[:-1], edges[1:]))
    return (sphere_area(d) * val) ** (1.0 / p)


@dataclass(frozen=True)
class GaussianBoundReport:
    t1: np.ndarray
    t2: np.ndarray
    integral_value: np.ndarray  # worst shift per window
    exponent: float
    fitted_slope: float
    c0_estimate: float
    worst_shift: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # every evaluated (width, |shift|, integral)
    table: tuple[tuple[float, float, float], ...] = ()

    @property
    def widths(self) -> np.ndarray:
        return self.t2 - self.t1

    def bound(self) -> np.ndarray:
        return self.c0_estimate * self.widths**self.exponent

    def rows(self) -> list[dict]:
        out = []
        for w, s, val in self.table:
            out.append({"window_width": w, "shift": s, "integral": val,
                        "bound": self.c0_estimate * w**self.exponent, "slope": self.fitted_slope})
        return out


_N_SHELLS = 40
_N_TIME_PANELS = 40


def _space_integral(dominator, t: float, u: float, shift: np.ndarray, d: int, level: int,
                    support: float | None) -> float:
    """``int h_t(z)^2 g_u(z - shift) dz`` in polar coordinates centred on the singularity z = 0."""
    sd = math.sqrt(u)
    s = float(np.linalg.norm(shift))
    outer = s + 10.0 * sd
    if support is not None:
        outer = min(outer, support)
    if outer <= 0:
        return 0.0
    n_gl = 6 + 4 * level
    edges = geometric_edges(outer, 0.5, _N_SHELLS)
    extra = s + sd * np.arange(-8, 9, dtype=float) / 2.0
    extra = extra[(extra > 0) & (extra < outer)]
    edges = np.unique(np.concatenate([edges, extra]))
    dirs, wdir = sphere_directions(d, level + (2 if d > 1 else 0))
    r, w = panel_nodes(edges, n_gl)
    z = r[:, None, None] * dirs[None, :, :]
    with np.errstate(all="ignore"):
        h = np.broadcast_to(np.asarray(dominator(t, z), dtype=float), z.shape[:-1])
        diff = z - shift
        g = (2 * math.pi * u) ** (-d / 2.0) * np.exp(-np.sum(diff * diff, axis=-1) / (2 * u))
        vals = ((h * h * g) @ wdir) * r ** (d - 1) * w * sphere_area(d)
    shells = vals.reshape(-1, n_gl).sum(axis=1)
    # shells run outward from the singularity; close the inner end geometrically
    return _geometric_total(np.ascontiguousarray(shells[::-1]))


def _space_integral_centred(dominator, ts: np.ndarray, us: np.ndarray, d: int, level: int,
                            support: float | None) -> np.ndarray:
    """Zero-shift case of :func:`_space_integral`, vectorised over time nodes.

    The radial mesh is the same geometric mesh rescaled to each node's outer
    radius ``min(10 sqrt(u), support)``.  ``t`` is passed to the dominator as
    an array broadcasting against the leading axis.
    """
    n_gl = 6 + 4 * level
    rho, wrho = panel_nodes(geometric_edges(1.0, 0.5, _N_SHELLS), n_gl)
    dirs, wdir = sphere_directions(d, level)
    outer = 10.0 * np.sqrt(us)
    if support is not None:
        outer = np.minimum(outer, support)
    out = np.zeros(us.size)
    block = max(1, 2_000_000 // (rho.size * dirs.shape[0] * d))
    for lo in range(0, us.size, block):
        sl = slice(lo, lo + block)
        r = outer[sl, None] * rho[None, :]
        w = outer[sl, None] * wrho[None, :]
        z = r[..., None, None] * dirs[None, None, :, :]
        u = us[sl, None, None]
        with np.errstate(all="ignore"):
            h = np.broadcast_to(np.asarray(dominator(ts[sl, None, None], z), dtype=float), z.shape[:-1])
            g = (2 * math.pi * u) ** (-d / 2.0) * np.exp(-(r[..., None] ** 2) / (2 * u))
            vals = ((h * h * g) @ wdir) * r ** (d - 1) * w * sphere_area(d)
        shells = vals.reshape(vals.shape[0], -1, n_gl).sum(axis=2)
        out[sl] = [_geometric_total(np.ascontiguousarray(row[::-1])) for row in shells]
    if support is not None:
        out[outer <= 0] = 0.0
    return out


def _space_integral_about_shift(dominator, ts: np.ndarray, us: np.ndarray, shift: np.ndarray, d: int,
                                level: int) -> np.ndarray:
    """Nodes where the heat kernel sits far from the singularity (``|shift| > 10 sqrt(u)``).

    Polar coordinates about the Gaussian centre; the dominator is smooth on
    the whole ball of radius ``10 sqrt(u)``, so uniform radial panels suffice.
    """
    n_gl = 6 + 4 * level
    rho, wrho = panel_nodes(np.linspace(0.0, 1.0, 9), n_gl)
    dirs, wdir = sphere_directions(d, level)
    out = np.zeros(us.size)
    block = max(1, 2_000_000 // (rho.size * dirs.shape[0] * d))
    for lo in range(0, us.size, block):
        sl = slice(lo, lo + block)
        outer = 10.0 * np.sqrt(us[sl])
        r = outer[:, None] * rho[None, :]
        w = outer[:, None] * wrho[None, :]
        z = shift + r[..., None, None] * dirs[None, None, :, :]
        u = us[sl, None]
        with np.errstate(all="ignore"):
            h = np.broadcast_to(np.asarray(dominator(ts[sl, None, None], z), dtype=float), z.shape[:-1])
            g = (2 * math.pi * u) ** (-d / 2.0) * np.exp(-(r**2) / (2 * u))
            out[sl] = np.sum(((h * h) @ wdir) * g * r ** (d - 1) * w, axis=1) * sphere_area(d)
    return out


def _window_integral(spec: KernelSpec, t1: float, width: float, shift: np.ndarray, level: int) -> float:
    n_t = 6 + 4 * level
    edges = geometric_edges(width, 0.5, _N_TIME_PANELS)
    us, ws = panel_nodes(edges, n_t)
    d = spec.dim
    if np.all(shift == 0):
        f = _space_integral_centred(spec.dominator, t1 + us, us, d, level, spec.support_radius)
    else:
        far = float(np.linalg.norm(shift)) > 10.0 * np.sqrt(us)
        f = np.empty(us.size)
        f[far] = _space_integral_about_shift(spec.dominator, t1 + us[far], us[far], shift, d, level)
        f[~far] = [_space_integral(spec.dominator, t1 + u, u, shift, d, level, spec.support_radius)
                   for u in us[~far]]
    if not np.all(np.isfinite(f)):
        return float("inf")
    panels = (f * ws).reshape(-1, n_t).sum(axis=1)
    return _geometric_total(np.ascontiguousarray(panels[::-1]))


def window_integral(spec: KernelSpec, t1: float, t2: float, anchor_shift=None) -> GaussianBoundReport:
    """Integral of the squared dominator against the heat kernel over one window.

    The time integral uses a geometric mesh graded toward ``t1`` (where the
    heat kernel concentrates); space uses polar Gauss-Legendre panels graded
    toward the dominator's singularity.  Both resolutions are refined until
    two successive levels agree to relative ``1e-4``.
    """
    if not (0 <= t1 < t2):
        raise UsageError(f"need 0 <= t1 < t2, got t1={t1}, t2={t2}", _MODULE)
    d = spec.dim
    shift = np.zeros(d) if anchor_shift is None else np.atleast_1d(np.asarray(anchor_shift, dtype=float))
    if shift.shape != (d,):
        raise UsageError(f"anchor_shift must have {d} coordinates", _MODULE)
    width = t2 - t1
    prev = _window_integral(spec, t1, width, shift, 0)
    value = prev
    for level in range(1, MAX_LEVEL + 1):
        value = _window_integral(spec, t1, width, shift, level)
        if not math.isfinite(value) and not math.isfinite(prev):
            break
        if abs(value - prev) <= REL_TOL * abs(value) or (value == 0 and prev == 0):
            break
        prev_prev, prev = prev, value
    else:
        raise NumericalFailure(
            f"quadrature did not converge for window ({t1}, {t2})", (prev_prev, value), _MODULE)
    e = spec.exponents.gaussian_exponent
    c0 = value / width**e if math.isfinite(value) else float("inf")
    return GaussianBoundReport(
        t1=np.array([t1]), t2=np.array([t2]), integral_value=np.array([value]),
        exponent=e, fitted_slope=float("nan"), c0_estimate=c0,
        worst_shift=np.array([float(np.linalg.norm(shift))]),
        table=((width, float(np.linalg.norm(shift)), value),),
    )


def fit_loglog_slope(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = (x > 0) & (y > 0) & np.isfinite(y)
    if ok.sum() < 2 or np.ptp(np.log(x[ok])) == 0:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def window_sweep(spec: KernelSpec, windows, shifts=None) -> GaussianBoundReport:
    """Evaluate the window integral over a sweep and fit its growth exponent.

    For each window the worst (largest) integral over ``shifts`` is kept; the
    slope of log I against log(t2 - t1) is fitted by least squares, and
    ``c0_estimate`` is the smallest constant with ``I <= c0 (t2-t1)^e`` on the sweep.
    """
    windows = [(float(a), float(b)) for a, b in windows]
    if len(windows) < 4:
        raise UsageError("window_sweep needs at least 4 windows", _MODULE)
    widths = np.array([b - a for a, b in windows])
    if np.ptp(widths) <= 1e-9 * np.max(widths):
        raise UsageError("all windows have the same width; the slope fit is degenerate", _MODULE)
    d = spec.dim
    shift_list = [np.zeros(d)] if shifts is None else [np.atleast_1d(np.asarray(s, dtype=float)) for s in shifts]
    worst, worst_s, table = [], [], []
    for (a, b) in windows:
        best, best_s = -1.0, 0.0
        for s in shift_list:
            val = window_integral(spec, a, b, s).integral_value[0]
            table.append((b - a, float(np.linalg.norm(s)), val))
            if val > best:
                best, best_s = val, float(np.linalg.norm(s))
        worst.append(best)
        worst_s.append(best_s)
    worst = np.array(worst)
    e = spec.exponents.gaussian_exponent
    slope = fit_loglog_slope(widths, worst)
    c0 = float(np.max(worst / widths**e))
    return GaussianBoundReport(
        t1=np.array([a for a, _ in windows]), t2=np.array([b for _, b in windows]),
        integral_value=worst, exponent=e, fitted_slope=slope, c0_estimate=c0,
        worst_shift=np.array(worst_s), table=tuple(table),
    )


def conditioning_windows(c0: float, kappa: float, T: float, exponents: ExponentPair,
                         alpha: float) -> tuple[float, float, int]:
    """Window lengths over which the exponential moment bound applies.

    Returns ``(growth_window, moment_delta, n_windows)`` with
    ``growth_window = (c0 kappa)^(-1/e)``, ``moment_delta = min(1/(2 c0^2 T alpha^2), T)``
    and ``n_windows = floor(T / moment_delta)``.
    """
    e = exponents.gaussian_exponent
    if not e > 0:
        raise ConstraintViolation("(q-2)/q - d/p > 0", f"inadmissible exponent e={e:.6g}", _MODULE)
    for name, v in (("c0", c0), ("kappa", kappa), ("T", T), ("alpha", alpha)):
        if not v > 0:
            raise ConstraintViolation(f"{name} > 0", f"{name}={v} must be positive", _MODULE)
    growth = (c0 * kappa) ** (-1.0 / e)
    delta = min(1.0 / (2.0 * c0**2 * T * alpha**2), T)
    n = int(math.floor(T / delta + 1e-12))
    return growth, delta, n
