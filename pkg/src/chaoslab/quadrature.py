"""Gauss-Legendre panels, graded meshes and spherical averaging used by the oracles."""

from __future__ import annotations

from functools import lru_cache
from math import gamma, pi

import numpy as np


@lru_cache(maxsize=64)
def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def sphere_area(d: int) -> float:
    """Surface measure of the unit sphere in R^d (2 for d=1)."""
    return 2.0 * pi ** (d / 2.0) / gamma(d / 2.0)


def panel_nodes(edges: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Flattened Gauss-Legendre nodes and weights on consecutive panels ``edges``."""
    edges = np.asarray(edges, dtype=float)
    x, w = gauss_legendre(n)
    lo, hi = edges[:-1, None], edges[1:, None]
    half = 0.5 * (hi - lo)
    nodes = lo + half * (x[None, :] + 1.0)
    weights = half * w[None, :]
    return nodes.ravel(), weights.ravel()


def geometric_edges(hi: float, ratio: float, n_panels: int, lo: float = 0.0) -> np.ndarray:
    """Edges ``lo + (hi-lo) * ratio**k`` for k = n_panels..0 (graded toward ``lo``)."""
    k = np.arange(n_panels, -1, -1, dtype=float)
    return lo + (hi - lo) * ratio**k


def sphere_directions(d: int, level: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Unit directions and probability weights approximating the uniform law on S^{d-1}.

    Exact for d=1; equispaced angles (spectrally accurate for smooth integrands)
    for d=2; Gauss-Legendre in cos(theta) times equispaced azimuth for d=3;
    a seeded Gaussian cloud beyond that.
    """
    if d == 1:
        return np.array([[1.0], [-1.0]]), np.array([0.5, 0.5])
    if d == 2:
        m = 16 * 2**level
        th = (np.arange(m) + 0.5) * (2 * pi / m)
        return np.stack([np.cos(th), np.sin(th)], axis=1), np.full(m, 1.0 / m)
    if d == 3:
        n = 8 * 2**level
        ct, wt = gauss_legendre(n)
        m = 2 * n
        ph = (np.arange(m) + 0.5) * (2 * pi / m)
        st = np.sqrt(1.0 - ct**2)
        dirs = np.stack(
            [np.outer(st, np.cos(ph)).ravel(), np.outer(st, np.sin(ph)).ravel(), np.repeat(ct, m)],
            axis=1,
        )
        w = np.repeat(wt / 2.0, m) / m
        return dirs, w
    rng = np.random.default_rng(1234 + level)
    g = rng.standard_normal((256 * 2**level, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g, np.full(g.shape[0], 1.0 / g.shape[0])
