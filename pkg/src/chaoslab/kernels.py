"""Interaction kernels, their dominating functions, and admissibility checks.

A kernel is ``b(t, x, y)`` acting on points of R^d.  Every kernel carries a
dominating function ``h_t(z)`` with ``|b(t, x, y)| <= h_t(x - y)`` and the
integrability exponents ``(p, q)`` it is claimed to satisfy.  :func:`classify`
checks the Krylov-Rockner exponent condition ``d/p + 2/q < 1`` together with
(local or global) ``L^p`` integrability of the dominator.

All callables are vectorised: points are arrays of shape ``(..., d)`` that
broadcast against each other.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping

import numpy as np

from .errors import ConstraintViolation, UsageError
from .quadrature import geometric_edges, panel_nodes, sphere_area, sphere_directions

_MODULE = "kernels"

H1 = "H1"
H2_ONLY = "H2-only"
INADMISSIBLE = "inadmissible"


def _fraction(x: float) -> Fraction | None:
    fr = Fraction(x).limit_denominator(10**6)
    return fr if float(fr) == float(x) else None


@dataclass(frozen=True)
class ExponentPair:
    p: float
    q: float
    d: int

    def __post_init__(self):
        if not (self.p > 2):
            raise ConstraintViolation("p > 2", f"spatial exponent p={self.p} must exceed 2", _MODULE)
        if not (self.q > 2):
            raise ConstraintViolation("q > 2", f"temporal exponent q={self.q} must exceed 2", _MODULE)
        if int(self.d) != self.d or self.d < 1:
            raise ConstraintViolation("d >= 1", f"dimension d={self.d} must be a positive integer", _MODULE)

    @property
    def exponent_sum(self) -> float:
        return self.d / self.p + 2.0 / self.q

    @property
    def gaussian_exponent(self) -> float:
        """``(q-2)/q - d/p``, the power of the window width in the heat-kernel bound."""
        return (self.q - 2.0) / self.q - self.d / self.p

    def admissible(self) -> bool:
        """``d/p + 2/q < 1``; exact when p and q are small-denominator rationals."""
        fp, fq = _fraction(self.p), _fraction(self.q)
        if fp is not None and fq is not None:
            return Fraction(int(self.d)) / fp + Fraction(2) / fq < 1
        return self.exponent_sum < 1.0 - 1e-12


@dataclass(frozen=True, eq=False)
class KernelSpec:
    name: str
    drift: Callable
    dominator: Callable
    singular_at: Callable
    exponents: ExponentPair
    h2_tail: Callable | None = None
    claim: str | None = None
    params: Mapping[str, float] = field(default_factory=dict)
    # optional fast path: sum over all sources of b(t, x_i, y_j), shape of targets
    aggregate: Callable | None = None
    support_radius: float | None = None
    antisymmetric: bool = False
    builtin: bool = False

    @property
    def dim(self) -> int:
        return int(self.exponents.d)


@dataclass(frozen=True)
class Classification:
    verdict: str
    exponent_sum: float
    exponent_test: bool
    local_lp: bool
    global_lp: bool
    h2_tail_ok: bool | None
    lp_norm: float
    best_effort: bool
    notes: tuple[str, ...] = ()


# ---------------------------------------------------------------------------
# L^p masses by dyadic shells


def shell_masses(dominator: Callable, t: float, p: float, d: int, edges: np.ndarray,
                 n: int = 16, level: int = 1) -> np.ndarray:
    """``int_{shell} |h_t(z)|^p dz`` for each radial shell delimited by ``edges``."""
    dirs, wdir = sphere_directions(d, level)
    r, w = panel_nodes(edges, n)
    z = r[:, None, None] * dirs[None, :, :]
    with np.errstate(all="ignore"):
        h = np.abs(np.asarray(dominator(t, z), dtype=float))
        h = np.broadcast_to(h, (r.size, dirs.shape[0]))
        avg = (h**p) @ wdir
        vals = sphere_area(d) * r ** (d - 1) * avg * w
    return vals.reshape(len(edges) - 1, n).sum(axis=1)


def _geometric_total(masses: np.ndarray, threshold: float = 0.999, window: int = 8) -> float:
    """Sum of shell masses ordered toward the tail, closed with a geometric tail estimate.

    Returns ``inf`` when the tail ratio does not decay (non-integrable).
    """
    if not np.all(np.isfinite(masses)):
        return float("inf")
    tail = masses[-(window + 1):]
    if np.all(tail == 0):
        return float(masses.sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(tail[:-1] > 0, tail[1:] / tail[:-1], np.where(tail[1:] > 0, np.inf, 0.0))
    rho = float(np.max(ratios))
    if not rho < threshold:
        return float("inf")
    return float(masses.sum() + masses[-1] * rho / (1.0 - rho))


def local_lp_mass(dominator: Callable, t: float, p: float, d: int, radius: float,
                  n_shells: int = 80) -> float:
    """``int_{|z| <= radius} |h_t|^p``; ``inf`` if the singularity at 0 is not p-integrable."""
    edges = geometric_edges(radius, 0.5, n_shells)
    masses = shell_masses(dominator, t, p, d, edges)[::-1]
    return _geometric_total(masses)


def tail_lp_mass(dominator: Callable, t: float, p: float, d: int, radius: float,
                 n_shells: int = 60) -> float:
    """``int_{|z| > radius} |h_t|^p``; ``inf`` if the tail is not p-integrable."""
    edges = radius * 2.0 ** np.arange(n_shells + 1, dtype=float)
    return _geometric_total(shell_masses(dominator, t, p, d, edges))


def _h2_tail_ok(h2_tail: Callable, horizon: float = 10.0) -> bool:
    ts = np.linspace(0.0, horizon, 41)
    vals = np.array([float(h2_tail(t)) for t in ts])
    return bool(np.all(np.isfinite(vals)) and np.all(vals >= 0) and np.all(np.diff(vals) >= -1e-12))


def classify(spec: KernelSpec, radius: float = 1.0,
             probe_times: tuple[float, ...] = (0.25, 0.5, 1.0)) -> Classification:
    """Classify a kernel as H1, H2-only or inadmissible.

    Global integrability is probed on dyadic shells out to ``radius * 2**60``
    and closed by a geometric tail estimate; the local part is probed on
    shells shrinking to ``radius * 2**-80``.  Kernels outside the built-in
    catalogue get ``best_effort=True``: the tail estimate is heuristic for
    arbitrary formulas.
    """
    if not radius > 0:
        raise ConstraintViolation("radius > 0", module=_MODULE)
    ex = spec.exponents
    ExponentPair(ex.p, ex.q, ex.d)  # re-validate (p, q > 2)
    if spec.claim == "H2" and spec.h2_tail is None:
        raise ConstraintViolation("H2 claim requires h2_tail",
                                  f"kernel {spec.name!r} claims H2 without an h2_tail function", _MODULE)
    exp_ok = ex.admissible()
    notes = []
    local = []
    glob = []
    for t in probe_times:
        inner = local_lp_mass(spec.dominator, t, ex.p, ex.d, radius)
        local.append(inner)
        if spec.support_radius is not None and spec.support_radius <= radius:
            outer = 0.0
        else:
            outer = tail_lp_mass(spec.dominator, t, ex.p, ex.d, radius)
        glob.append(inner + outer)
    local_ok = all(np.isfinite(local))
    global_ok = local_ok and all(np.isfinite(glob))
    h2_ok = _h2_tail_ok(spec.h2_tail) if spec.h2_tail is not None else None
    if not exp_ok:
        notes.append(f"d/p + 2/q = {ex.exponent_sum:.6g} is not < 1")
    if not local_ok:
        notes.append("dominator is not locally p-integrable")
    if exp_ok and local_ok and not global_ok:
        notes.append("dominator is not globally p-integrable")
    if not exp_ok or not local_ok:
        verdict = INADMISSIBLE
    elif global_ok:
        verdict = H1
    elif h2_ok:
        verdict = H2_ONLY
    else:
        verdict = INADMISSIBLE
        if h2_ok is False:
            notes.append("h2_tail is not nondecreasing and finite")
    norm = float(max(glob)) ** (1.0 / ex.p) if global_ok else float("inf")
    return Classification(
        verdict=verdict,
        exponent_sum=ex.exponent_sum,
        exponent_test=exp_ok,
        local_lp=local_ok,
        global_lp=global_ok,
        h2_tail_ok=h2_ok,
        lp_norm=norm,
        best_effort=not spec.builtin,
        notes=tuple(notes),
    )


# ---------------------------------------------------------------------------
# pairwise sums


def _masked_drift(kernel: KernelSpec, t: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        b = np.asarray(kernel.drift(t, x, y), dtype=float)
        shape = np.broadcast_shapes(b.shape, np.broadcast_shapes(x.shape, y.shape))
        b = np.broadcast_to(b, shape)
        bad = np.asarray(kernel.singular_at(t, x, y)) | ~np.isfinite(b).all(axis=-1)
    return np.where(bad[..., None], 0.0, b)


def interaction_sum(kernel: KernelSpec, t: float, targets: np.ndarray, sources: np.ndarray,
                    self_offset: int | None = None, threads: int = 1,
                    budget: int = 1 << 21) -> np.ndarray:
    """Masked sums ``sum_j b(t, targets_i, sources_j)``.

    ``targets`` has shape ``(R, n, d)``; ``sources`` is ``(R, m, d)`` or
    ``(m, d)`` (shared by all runs).  With ``self_offset`` set, target ``i``
    is the same particle as source ``i + self_offset`` and that pair is skipped.
    Pairs on the singular set or with non-finite drift contribute zero.

    Each target's sum runs over a contiguous row in a fixed order, and the
    target chunking depends only on array sizes, so results do not depend on
    ``threads``.
    """
    targets = np.asarray(targets, dtype=float)
    sources = np.asarray(sources, dtype=float)
    if sources.ndim == 2:
        sources = sources[None]
    R, n, d = targets.shape
    m = sources.shape[1]
    if n == 0 or m == 0:
        return np.zeros((R, n, d))

    if kernel.aggregate is not None:
        with np.errstate(all="ignore"):
            total = np.array(np.broadcast_to(kernel.aggregate(t, targets, sources), (R, n, d)), dtype=float)
        if self_offset is not None:
            lo = max(0, -self_offset)
            hi = min(n, m - self_offset)
            if hi > lo:
                xi = targets[:, lo:hi]
                total[:, lo:hi] -= _masked_drift(kernel, t, xi, xi)
        return total

    chunk = max(1, budget // max(1, R * m * d))
    starts = list(range(0, n, chunk))
    ys = sources[:, None, :, :]

    def work(lo: int) -> np.ndarray:
        hi = min(n, lo + chunk)
        xi = targets[:, lo:hi, None, :]
        b = np.array(np.broadcast_to(_masked_drift(kernel, t, xi, ys), (R, hi - lo, m, d)))
        if self_offset is not None:
            rows = np.arange(lo, hi)
            cols = rows + self_offset
            ok = (cols >= 0) & (cols < m)
            b[:, rows[ok] - lo, cols[ok], :] = 0.0
        return np.ascontiguousarray(np.moveaxis(b, 2, -1)).sum(axis=-1)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    return np.concatenate(parts, axis=1)


# ---------------------------------------------------------------------------
# catalogue


def _norm(z: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(z * z, axis=-1))


def _coincide(t, x, y):
    return np.all(np.asarray(x) == np.asarray(y), axis=-1)


def _never(t, x, y):
    return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(y))[:-1], dtype=bool)


def _default_exponents(d: int, singularity: float, params: Mapping[str, float]) -> ExponentPair:
    """Pick (p, q) satisfying ``singularity * p < d`` and ``d/p + 2/q < 1`` when possible."""
    lower = max(2.0, float(d))
    upper = d / singularity if singularity > 0 else float("inf")
    if "p" in params:
        p = float(params["p"])
    elif upper == float("inf"):
        p = 2.0 * lower
    elif upper > lower:
        p = 0.5 * (lower + upper)
    else:
        p = 2.0 * lower
    if "q" in params:
        q = float(params["q"])
    else:
        slack = 1.0 - d / p
        q = round(4.0 / slack, 12) if slack > 0 else 8.0
    return ExponentPair(p, q, d)


_CATALOGUE: dict[str, dict] = {
    "zero": {"required": (), "optional": {}},
    "linear-ou": {"required": (), "optional": {"kappa": 1.0}},
    "bounded-lipschitz": {"required": (), "optional": {"c": 1.0, "ell": 1.0}},
    "constant": {"required": (), "optional": {"c": 1.0}},
    "indicator": {"required": (), "optional": {"c": 1.0, "ell": 1.0}},
    "riesz": {"required": ("alpha",), "optional": {"sign": 1.0}},
    "riesz-truncated": {"required": ("alpha",), "optional": {"sign": 1.0, "radius": 1.0}},
    "singular-linear": {"required": ("alpha",), "optional": {"kappa": 1.0}},
}

KERNEL_NAMES = tuple(_CATALOGUE)
COMMON_KEYS = ("d", "p", "q")


def kernel_parameter_keys(name: str) -> tuple[str, ...]:
    if name not in _CATALOGUE:
        raise UsageError(f"unknown kernel {name!r}; choose from {', '.join(KERNEL_NAMES)}", _MODULE)
    entry = _CATALOGUE[name]
    return tuple(entry["required"]) + tuple(entry["optional"]) + COMMON_KEYS


def builtin(name: str, parameters: Mapping[str, float] | None = None) -> KernelSpec:
    """Build a catalogue kernel.

    ``parameters`` may always contain ``d`` (dimension, default 1) and the
    exponents ``p``/``q`` (defaults chosen admissible when possible).

    ============== =========================================== ==============
    name           drift b(t, x, y)                            dominator h(z)
    ============== =========================================== ==============
    zero           0                                           0
    linear-ou      -kappa (x - y)                              kappa |z|
    bounded-lip.   c (x - y) / sqrt(ell^2 + |x - y|^2)         c
    constant       c e_1                                       c
    indicator      c 1{|x - y| <= ell} e_1                     c
    riesz          sign (x - y) / |x - y|^(alpha + 1)          |z|^-alpha
    riesz-trunc.   riesz * 1{|x - y| <= radius}                idem, truncated
    singular-lin.  kappa (x - y) / |x - y|^alpha, alpha in [1,2) kappa |z|^(1-alpha)
    ============== =========================================== ==============
    """
    params = dict(parameters or {})
    keys = kernel_parameter_keys(name)
    unknown = sorted(set(params) - set(keys))
    if unknown:
        raise UsageError(f"kernel {name!r} does not take parameter(s) {', '.join(unknown)}", _MODULE)
    entry = _CATALOGUE[name]
    for req in entry["required"]:
        if req not in params:
            raise ConstraintViolation(f"{name} requires {req}", f"kernel {name!r} requires parameter {req!r}", _MODULE)
    full = {**entry["optional"], **params}
    d = full.get("d", 1)
    if int(d) != d or d < 1:
        raise ConstraintViolation("d >= 1", f"dimension d={d} must be a positive integer", _MODULE)
    d = int(d)
    full["d"] = d

    def positive(key):
        if not full[key] > 0:
            raise ConstraintViolation(f"{key} > 0", f"kernel {name!r}: {key}={full[key]} must be positive", _MODULE)
        return float(full[key])

    if name == "zero":
        def drift(t, x, y):
            return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(y)))

        def dom(t, z):
            return np.zeros(np.shape(z)[:-1])

        def agg(t, x, ys):
            return np.zeros_like(x)

        return KernelSpec(name, drift, dom, _never, _default_exponents(d, 0, full), None, "H1",
                          full, agg, support_radius=0.0, antisymmetric=True, builtin=True)

    if name == "linear-ou":
        kappa = positive("kappa")

        def drift(t, x, y):
            return -kappa * (np.asarray(x) - np.asarray(y))

        def dom(t, z):
            return kappa * _norm(z)

        def agg(t, x, ys):
            m = ys.shape[-2]
            return -kappa * (m * x - ys.sum(axis=-2, keepdims=True))

        return KernelSpec(name, drift, dom, _never, _default_exponents(d, 0, full), None, None,
                          full, agg, antisymmetric=True, builtin=True)

    if name == "bounded-lipschitz":
        c, ell = positive("c"), positive("ell")

        def drift(t, x, y):
            z = np.asarray(x) - np.asarray(y)
            return c * z / np.sqrt(ell**2 + np.sum(z * z, axis=-1, keepdims=True))

        def dom(t, z):
            return np.full(np.shape(z)[:-1], c)

        return KernelSpec(name, drift, dom, _never, _default_exponents(d, 0, full),
                          lambda T: c**2 * T, "H2", full, antisymmetric=True, builtin=True)

    if name == "constant":
        c = positive("c")
        e1 = np.zeros(d)
        e1[0] = c

        def drift(t, x, y):
            return np.broadcast_to(e1, np.broadcast_shapes(np.shape(x), np.shape(y))).copy()

        def dom(t, z):
            return np.full(np.shape(z)[:-1], c)

        def agg(t, x, ys):
            return np.broadcast_to(ys.shape[-2] * e1, x.shape).copy()

        return KernelSpec(name, drift, dom, _never, _default_exponents(d, 0, full),
                          lambda T: c**2 * T, "H2", full, agg, builtin=True)

    if name == "indicator":
        c, ell = positive("c"), positive("ell")
        e1 = np.zeros(d)
        e1[0] = c

        def drift(t, x, y):
            z = np.asarray(x) - np.asarray(y)
            near = (_norm(z) <= ell)[..., None]
            return np.where(near, e1, 0.0)

        def dom(t, z):
            return np.full(np.shape(z)[:-1], c)

        return KernelSpec(name, drift, dom, _never, _default_exponents(d, 0, full),
                          lambda T: c**2 * T, "H2", full, builtin=True)

    if name in ("riesz", "riesz-truncated"):
        alpha = float(full["alpha"])
        if not 0 <= alpha < 2:
            raise ConstraintViolation("0 <= alpha < 2", f"kernel {name!r}: alpha={alpha} outside [0, 2)", _MODULE)
        sign = float(full["sign"])
        if sign not in (1.0, -1.0):
            raise ConstraintViolation("sign in {+1, -1}", f"kernel {name!r}: sign={sign}", _MODULE)
        cut = positive("radius") if name == "riesz-truncated" else None

        def drift(t, x, y):
            z = np.asarray(x) - np.asarray(y)
            r = np.sqrt(np.sum(z * z, axis=-1, keepdims=True))
            b = sign * z / r ** (alpha + 1.0)
            if cut is not None:
                b = np.where(r <= cut, b, 0.0)
            return b

        def dom(t, z):
            r = _norm(z)
            h = r ** (-alpha)
            if cut is not None:
                h = np.where(r <= cut, h, 0.0)
            return h

        if cut is None:
            tail = lambda T: float(T)  # noqa: E731  sup_{|z|>1} |z|^(-2 alpha) = 1
            claim = "H2"
        else:
            tail = (lambda T: float(T)) if cut > 1 else (lambda T: 0.0)
            claim = "H1"
        return KernelSpec(name, drift, dom, _coincide, _default_exponents(d, alpha, full), tail, claim,
                          full, support_radius=cut, antisymmetric=True, builtin=True)

    if name == "singular-linear":
        alpha = float(full["alpha"])
        if not 1 <= alpha < 2:
            raise ConstraintViolation("1 <= alpha < 2", f"kernel {name!r}: alpha={alpha} outside [1, 2)", _MODULE)
        kappa = positive("kappa")

        def drift(t, x, y):
            z = np.asarray(x) - np.asarray(y)
            r = np.sqrt(np.sum(z * z, axis=-1, keepdims=True))
            return kappa * z / r**alpha

        def dom(t, z):
            return kappa * _norm(z) ** (1.0 - alpha)

        return KernelSpec(name, drift, dom, _coincide, _default_exponents(d, alpha - 1.0, full),
                          lambda T: kappa**2 * T, "H2", full, antisymmetric=True, builtin=True)

    raise AssertionError(name)  # pragma: no cover
