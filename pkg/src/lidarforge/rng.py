"""Deterministic 64-bit mixing used for seed derivation and per-ray noise.

Everything randomized in this package is keyed rather than streamed: a scene
index or a (ring, column) ray slot is mixed with the master seed through
SplitMix64, so results never depend on evaluation order, worker count, or
scheduling.  The same functions exist in two flavors: plain-Python (used for
seed bookkeeping and as a test oracle) and numba-jitted scalars (used inside
the ray-casting kernels).  They are bit-identical by construction.
"""

import numpy as np
from numba import njit

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

_U64 = np.uint64


def splitmix64(x):
    """One SplitMix64 step of ``x``: add the golden constant, then finalize.

    Accepts any int; arithmetic is modulo 2**64.
    """
    z = (int(x) + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master, index):
    """Per-item seed: SplitMix64 of (master XOR index)."""
    return splitmix64((int(master) & MASK64) ^ (int(index) & MASK64))


def ray_key(seed, ring, column):
    """Key of the random stream owned by one (ring, column) ray slot."""
    return splitmix64(splitmix64(seed) ^ (((ring & 0xFFFFFFFF) << 32) | (column & 0xFFFFFFFF)))


def stream_u64(key, draw):
    """``draw``-th 64-bit output of the stream keyed by ``key``."""
    return splitmix64((int(key) + draw * GOLDEN) & MASK64)


def unit_double(bits):
    """Map 64 random bits to a double in [0, 1)."""
    return (int(bits) >> 11) * 2.0**-53


@njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)
    return z ^ (z >> _U64(31))


@njit(cache=True, inline="always")
def splitmix64_nb(x):
    return mix64(x + _U64(GOLDEN))


@njit(cache=True, inline="always")
def ray_key_nb(seed, ring, column):
    slot = (_U64(ring) << _U64(32)) | _U64(column)
    return splitmix64_nb(splitmix64_nb(seed) ^ slot)


@njit(cache=True, inline="always")
def stream_u64_nb(key, draw):
    return splitmix64_nb(key + _U64(draw) * _U64(GOLDEN))


@njit(cache=True, inline="always")
def unit_double_nb(bits):
    return (bits >> _U64(11)) * 2.0**-53
