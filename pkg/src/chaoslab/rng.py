"""Counter-based random streams.

Every variate is a pure function of ``(seed, run, stream, step, axis, slot)``,
so a particle's noise does not depend on how many other particles exist, on
thread scheduling, or on the order in which variates are requested.  The
mixing function is the SplitMix64 finalizer applied twice: once to derive a
per-stream key and once to hash the counter under that key.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_MASK64 = (1 << 64) - 1

# steps are offset so that the reserved initial-draw step (-1) maps to a valid counter
_STEP_OFFSET = 2
_AXIS_BITS = 20


def mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def _u64(value: int) -> np.uint64:
    return np.uint64(int(value) & _MASK64)


def stream_keys(seed: int, runs: np.ndarray, streams: np.ndarray) -> np.ndarray:
    """Keys of shape ``(len(runs), len(streams))``."""
    runs = np.asarray(runs, dtype=np.int64).astype(np.uint64)
    streams = np.asarray(streams, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        base = mix64(np.array([_u64(seed)], dtype=np.uint64) + _GAMMA)
        k_run = mix64(base ^ (runs * _GAMMA + _GAMMA))
        return mix64(k_run[:, None] ^ (streams[None, :] * _M1 + _GAMMA))


def _counters(step: int, n_axes: int, slot: int) -> np.ndarray:
    if step + _STEP_OFFSET < 0:
        raise ValueError("step index must be >= -2")
    axes = np.arange(n_axes, dtype=np.uint64)
    c = (np.uint64(step + _STEP_OFFSET) << np.uint64(_AXIS_BITS + 2)) | (axes << np.uint64(2)) | np.uint64(slot)
    with np.errstate(over="ignore"):
        return mix64(c * _GAMMA + _M2)


def raw_bits(keys: np.ndarray, step: int, n_axes: int, slot: int = 0) -> np.ndarray:
    """uint64 draws of shape ``keys.shape + (n_axes,)``."""
    c = _counters(step, n_axes, slot)
    with np.errstate(over="ignore"):
        return mix64((keys[..., None] ^ c) + keys[..., None])


def uniforms(keys: np.ndarray, step: int, n_axes: int, slot: int = 0) -> np.ndarray:
    """Open-interval uniforms on (0, 1) with 53-bit resolution."""
    bits = raw_bits(keys, step, n_axes, slot) >> _S11
    return (bits.astype(np.float64) + 0.5) * (2.0 ** -53)


def normals(keys: np.ndarray, step: int, n_axes: int, slot: int = 0) -> np.ndarray:
    """Standard normals by inverse-CDF transform of :func:`uniforms`."""
    return ndtri(uniforms(keys, step, n_axes, slot))


class CounterStreams:
    """Bundle of keys for ``runs x streams`` with convenience draws.

    >>> s = CounterStreams(7, runs=1, streams=4)
    >>> s.normals(step=0, n_axes=2).shape
    (1, 4, 2)
    """

    def __init__(self, seed: int, runs: int | np.ndarray = 1, streams: int | np.ndarray = 1):
        self.seed = int(seed)
        run_ids = np.arange(runs) if np.isscalar(runs) else np.asarray(runs)
        stream_ids = np.arange(streams) if np.isscalar(streams) else np.asarray(streams)
        self.run_ids = run_ids
        self.stream_ids = stream_ids
        self.keys = stream_keys(self.seed, run_ids, stream_ids)

    def normals(self, step: int, n_axes: int, slot: int = 0) -> np.ndarray:
        return normals(self.keys, step, n_axes, slot)

    def uniforms(self, step: int, n_axes: int, slot: int = 0) -> np.ndarray:
        return uniforms(self.keys, step, n_axes, slot)


def generator(seed: int, *labels: int) -> np.random.Generator:
    """A conventional numpy Generator for auxiliary randomness (bootstrap, slicing directions).

    Labels are folded into the seed sequence so distinct uses never share a stream.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed) & _MASK64, *[int(x) & _MASK64 for x in labels]]))
