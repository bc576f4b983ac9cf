"""Euler-Maruyama time stepping for mean-field particle systems.

The full system moves particle ``i`` with drift ``(1/N) sum_{j != i} b(t, X^i, X^j)``
(pairs on the kernel's singular set, or with non-finite drift, contribute 0)
plus ``sigma dW^i``.  With ``partial_r = r > 0`` the first ``r`` particles are
plain Brownian motions and the others interact only among themselves, still
normalised by ``1/N``.

Arrays are laid out as ``(runs, particles, dim)``; independent replicas of
the same system share one config and differ only in their run index, which
is folded into the random-stream key.  Noise for ``(run, particle, step, axis)``
is a pure function of the seed, so trajectories are bit-identical across
thread counts and a particle's noise does not depend on ``N``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import rng
from .errors import BlowUpError, ConstraintViolation, UsageError
from .kernels import KernelSpec, interaction_sum

_MODULE = "sde_engine"

INIT_STEP = -1  # counter reserved for initial draws


@dataclass(frozen=True)
class InitialLaw:
    """``point`` (mass at ``mean``), ``gaussian`` (diagonal variances ``scale``) or
    ``uniform`` (box of half-widths ``scale`` around ``mean``)."""

    kind: str
    mean: tuple[float, ...] = (0.0,)
    scale: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if self.kind not in ("point", "gaussian", "uniform"):
            raise ConstraintViolation("initial law in {point, gaussian, uniform}",
                                      f"unknown initial law {self.kind!r}", _MODULE)
        if self.kind != "point" and any(not s > 0 for s in self.scale):
            raise ConstraintViolation("initial scale > 0", f"initial {self.kind} scale must be positive", _MODULE)

    def _vec(self, values, d):
        v = np.asarray(values, dtype=float)
        if v.size == 1:
            return np.full(d, float(v.ravel()[0]))
        if v.size != d:
            raise ConstraintViolation("initial law dimension", f"expected 1 or {d} values, got {v.size}", _MODULE)
        return v

    def mean_vector(self, d: int) -> np.ndarray:
        return self._vec(self.mean, d)

    def variance_vector(self, d: int) -> np.ndarray:
        if self.kind == "point":
            return np.zeros(d)
        s = self._vec(self.scale, d)
        return s if self.kind == "gaussian" else s**2 / 3.0

    def sample(self, keys: np.ndarray, d: int) -> np.ndarray:
        m = self.mean_vector(d)
        if self.kind == "point":
            return np.broadcast_to(m, keys.shape + (d,)).copy()
        s = self._vec(self.scale, d)
        if self.kind == "gaussian":
            return m + np.sqrt(s) * rng.normals(keys, INIT_STEP, d)
        return m + s * (2.0 * rng.uniforms(keys, INIT_STEP, d) - 1.0)


@dataclass(frozen=True, eq=False)
class SimConfig:
    n_particles: int
    dim: int
    horizon: float
    dt: float
    kernel: KernelSpec
    initial_law: InitialLaw = field(default_factory=lambda: InitialLaw("gaussian"))
    seed: int = 0
    diffusion: float = math.sqrt(2.0)
    taming: float | None = None
    partial_r: int = 0

    def __post_init__(self):
        if int(self.n_particles) != self.n_particles or self.n_particles < 1:
            raise ConstraintViolation("N >= 1", f"n_particles={self.n_particles}", _MODULE)
        if int(self.dim) != self.dim or self.dim < 1:
            raise ConstraintViolation("d >= 1", f"dim={self.dim}", _MODULE)
        if not self.horizon > 0:
            raise ConstraintViolation("T > 0", f"horizon={self.horizon}", _MODULE)
        if not self.dt > 0:
            raise ConstraintViolation("dt > 0", f"dt={self.dt}", _MODULE)
        n = round(self.horizon / self.dt)
        if n < 1 or abs(n * self.dt - self.horizon) > 1e-9 * self.horizon:
            raise ConstraintViolation("dt divides T", f"dt={self.dt} does not divide T={self.horizon}", _MODULE)
        if not self.diffusion > 0:
            raise ConstraintViolation("sigma > 0", f"diffusion={self.diffusion}", _MODULE)
        if self.taming is not None and not self.taming > 0:
            raise ConstraintViolation("taming > 0", f"taming={self.taming}", _MODULE)
        if not 0 <= self.partial_r < self.n_particles:
            raise ConstraintViolation("0 <= r < N", f"partial_r={self.partial_r}, N={self.n_particles}", _MODULE)
        if self.kernel.dim != self.dim:
            raise ConstraintViolation("kernel dimension matches d",
                                      f"kernel built for d={self.kernel.dim}, config has d={self.dim}", _MODULE)

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def with_(self, **changes) -> "SimConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class ParticleEnsemble:
    time: float
    positions: np.ndarray  # (runs, N, d)
    step_index: int = 0
    keys: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_runs(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True, eq=False)
class TrajectoryBlock:
    times: np.ndarray  # (K,)
    snapshots: np.ndarray  # (K, runs, N, d)
    increments: np.ndarray | None  # (steps, runs, N, d) standard Brownian increments
    dt: float
    sigma: float
    seed: int
    kernel_name: str
    record_every: int = 1
    partial_r: int = 0

    def __post_init__(self):
        if self.snapshots.shape[0] != self.times.shape[0]:
            raise UsageError("snapshots and times differ in length", _MODULE)
        if self.times.size > 1 and not np.all(np.diff(self.times) > 0):
            raise UsageError("trajectory times must be strictly increasing", _MODULE)

    @property
    def n_runs(self) -> int:
        return self.snapshots.shape[1]

    @property
    def n_particles(self) -> int:
        return self.snapshots.shape[2]

    @property
    def dim(self) -> int:
        return self.snapshots.shape[3]

    def index_of(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise UsageError(f"time {t} is not on the recorded grid; use a denser record_every", _MODULE)
        return k

    def at(self, t: float) -> np.ndarray:
        """Positions ``(runs, N, d)`` at recorded time ``t``."""
        return self.snapshots[self.index_of(t)]

    def __eq__(self, other):
        if not isinstance(other, TrajectoryBlock):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    # -- persistence --------------------------------------------------------

    def to_bytes(self) -> bytes:
        K, R, N, d = self.snapshots.shape
        S = 0 if self.increments is None else self.increments.shape[0]
        name = self.kernel_name.encode("utf-8")
        head = MAGIC + struct.pack("<H", FORMAT_VERSION)
        head += struct.pack("<QQQQQ", N, d, R, K, S)
        head += struct.pack("<ddq", self.dt, self.sigma, self.seed)
        head += struct.pack("<II", self.record_every, self.partial_r)
        head += struct.pack("<H", len(name)) + name
        parts = [head, np.ascontiguousarray(self.times, dtype="<f8").tobytes(),
                 np.ascontiguousarray(self.snapshots, dtype="<f8").tobytes()]
        if S:
            parts.append(np.ascontiguousarray(self.increments, dtype="<f8").tobytes())
        return b"".join(parts)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, data: bytes) -> "TrajectoryBlock":
        if data[:len(MAGIC)] != MAGIC:
            raise UsageError("not a trajectory file (bad magic)", _MODULE)
        off = len(MAGIC)
        (version,) = struct.unpack_from("<H", data, off)
        off += 2
        if version != FORMAT_VERSION:
            raise UsageError(f"unsupported trajectory format version {version}", _MODULE)
        N, d, R, K, S = struct.unpack_from("<QQQQQ", data, off)
        off += 40
        dt, sigma, seed = struct.unpack_from("<ddq", data, off)
        off += 24
        record_every, partial_r = struct.unpack_from("<II", data, off)
        off += 8
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + ln].decode("utf-8")
        off += ln

        def take(count, shape):
            nonlocal off
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(float)
            off += 8 * count
            return arr

        times = take(K, (K,))
        snaps = take(K * R * N * d, (K, R, N, d))
        incs = take(S * R * N * d, (S, R, N, d)) if S else None
        return cls(times, snaps, incs, dt, sigma, seed, name, record_every, partial_r)

    @classmethod
    def load(cls, path) -> "TrajectoryBlock":
        return cls.from_bytes(Path(path).read_bytes())

    def marginal_rows(self, particles: Sequence[int] | None = None, times: Sequence[float] | None = None):
        """Rows ``(time, run, particle, x0, ..., x_{d-1})`` for CSV export."""
        ks = range(len(self.times)) if times is None else [self.index_of(t) for t in times]
        ps = range(self.n_particles) if particles is None else particles
        for k in ks:
            for r in range(self.n_runs):
                for i in ps:
                    yield (float(self.times[k]), r, int(i), *map(float, self.snapshots[k, r, i]))


MAGIC = b"CHLTRJ"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------


def particle_drift(kernel: KernelSpec, t: float, x: np.ndarray, partial_r: int = 0,
                   threads: int = 1) -> np.ndarray:
    """Mean-field drift of every particle, shape ``(runs, N, d)``; zero for the first ``partial_r``."""
    R, N, d = x.shape
    out = np.zeros_like(x)
    r = partial_r
    if N - r > 1:
        out[:, r:] = interaction_sum(kernel, t, x[:, r:], x[:, r:], self_offset=0, threads=threads) / N
    return out


def _tame(drift: np.ndarray, taming: float | None, dt: float) -> np.ndarray:
    if taming is None:
        return drift
    cap = taming / math.sqrt(dt)
    norm = np.sqrt(np.sum(drift * drift, axis=-1, keepdims=True))
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norm > cap, cap / norm, 1.0)
    return drift * scale


def _check_finite(x: np.ndarray, t: float):
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x).all(axis=-1))[0]
        raise BlowUpError(particle=bad[1], time=t, run=bad[0])


def initial_state(config: SimConfig, runs: int = 1, stream_ids=None, run_ids=None) -> ParticleEnsemble:
    run_ids = np.arange(runs) if run_ids is None else np.asarray(run_ids)
    stream_ids = np.arange(config.n_particles) if stream_ids is None else np.asarray(stream_ids)
    if stream_ids.shape != (config.n_particles,):
        raise UsageError("stream_ids must have one entry per particle", _MODULE)
    keys = rng.stream_keys(config.seed, run_ids, stream_ids)
    x0 = config.initial_law.sample(keys, config.dim)
    return ParticleEnsemble(0.0, x0, 0, keys)


def _advance(config: SimConfig, state: ParticleEnsemble, drift: np.ndarray):
    if state.keys is None:
        raise UsageError("ensemble has no random-stream keys; build it with initial_state", _MODULE)
    dt = config.dt
    dw = math.sqrt(dt) * rng.normals(state.keys, state.step_index, config.dim)
    x = state.positions + drift * dt + config.diffusion * dw
    t_new = (state.step_index + 1) * dt
    _check_finite(x, t_new)
    return ParticleEnsemble(t_new, x, state.step_index + 1, state.keys), dw


def step(config: SimConfig, state: ParticleEnsemble, threads: int = 1) -> ParticleEnsemble:
    """One Euler-Maruyama step of the (full or partial) particle system."""
    if state.time + config.dt > config.horizon + config.dt / 2:
        raise UsageError("step would pass the horizon", _MODULE)
    drift = particle_drift(config.kernel, state.time, state.positions, config.partial_r, threads)
    drift = _tame(drift, config.taming, config.dt)
    return _advance(config, state, drift)[0]


def _integrate(config: SimConfig, drift_fn: Callable, record_every: int, keep_increments: bool,
               runs: int, stream_ids, threads: int) -> TrajectoryBlock:
    if int(record_every) != record_every or record_every < 1:
        raise UsageError(f"record_every must be an integer >= 1, got {record_every}", _MODULE)
    state = initial_state(config, runs, stream_ids)
    n = config.n_steps
    rec = list(range(0, n + 1, record_every))
    if rec[-1] != n:
        rec.append(n)
    snaps = np.empty((len(rec), runs, config.n_particles, config.dim))
    incs = np.empty((n, runs, config.n_particles, config.dim)) if keep_increments else None
    snaps[0] = state.positions
    k = 1
    for s in range(n):
        drift = _tame(drift_fn(state.time, state.positions), config.taming, config.dt)
        state, dw = _advance(config, state, drift)
        if incs is not None:
            incs[s] = dw
        if k < len(rec) and rec[k] == s + 1:
            snaps[k] = state.positions
            k += 1
    times = np.array(rec, dtype=float) * config.dt
    return TrajectoryBlock(times, snaps, incs, config.dt, config.diffusion, config.seed,
                           config.kernel.name, int(record_every), config.partial_r)


def run(config: SimConfig, record_every: int = 1, keep_increments: bool = False, runs: int = 1,
        stream_ids=None, threads: int = 1) -> TrajectoryBlock:
    """Simulate ``runs`` independent replicas of the particle system up to the horizon.

    Increments, when kept, are standard Brownian increments (the position
    update uses ``diffusion * increment``).  The same config and seed always
    give a bit-identical block; replica ``r`` does not depend on ``runs``.
    """
    def drift_fn(t, x):
        return particle_drift(config.kernel, t, x, config.partial_r, threads)

    return _integrate(config, drift_fn, record_every, keep_increments, runs, stream_ids, threads)


def run_linear(config: SimConfig, density_drift: Callable, record_every: int = 1,
               keep_increments: bool = False, runs: int = 1, threads: int = 1) -> TrajectoryBlock:
    """Simulate ``dX = density_drift(t, X) dt + sigma dW`` for independent particles.

    ``density_drift`` receives positions of shape ``(runs, N, d)`` and returns
    the same shape.  Non-finite drift values raise :class:`BlowUpError`.
    """
    def drift_fn(t, x):
        v = np.asarray(density_drift(t, x), dtype=float)
        v = np.broadcast_to(v, x.shape)
        _check_finite(v, t)
        return v

    return _integrate(config, drift_fn, record_every, keep_increments, runs, None, threads)
