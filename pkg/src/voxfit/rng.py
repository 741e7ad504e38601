"""Counter-based random streams (Philox-4x32-10).

Every draw is a pure function of ``(seed, purpose, sample, walker, iteration,
slot)``, so a vectorised sampler and a one-sample-at-a-time loop see exactly
the same numbers, whatever order or thread they are evaluated in.

Each counter yields four 32-bit words, consumed as two 53-bit uniforms on the
open interval (0, 1).
"""
from __future__ import annotations

import numba as nb
import numpy as np

PHILOX_M0 = np.uint64(0xD2511F53)
PHILOX_M1 = np.uint64(0xCD9E8D57)
PHILOX_W0 = np.uint64(0x9E3779B9)
PHILOX_W1 = np.uint64(0xBB67AE85)
MASK32 = np.uint64(0xFFFFFFFF)

# stream purposes, folded into the key
MH = 1
ENSEMBLE = 2
INIT = 3

_TWO_PI = 2.0 * np.pi


@nb.njit(cache=True)
def _philox_block(k0, k1, c0, c1, c2, c3):
    m0 = np.uint64(0xD2511F53)
    m1 = np.uint64(0xCD9E8D57)
    w0 = np.uint64(0x9E3779B9)
    w1 = np.uint64(0xBB67AE85)
    mask = np.uint64(0xFFFFFFFF)
    s32 = np.uint64(32)
    for r in range(10):
        if r > 0:
            k0 = (k0 + w0) & mask
            k1 = (k1 + w1) & mask
        p0 = m0 * c0
        p1 = m1 * c2
        hi0 = p0 >> s32
        lo0 = p0 & mask
        hi1 = p1 >> s32
        lo1 = p1 & mask
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@nb.njit(cache=True)
def _to_unit(a, b):
    # 53 random bits, shifted to the centre of their bin: never exactly 0 or 1
    k = (a >> np.uint64(5)) * np.uint64(67108864) + (b >> np.uint64(6))
    return (np.float64(np.int64(k)) + 0.5) * (1.0 / 9007199254740992.0)


@nb.njit(cache=True)
def _fill(k0, k1, c0, c1, c2, c3, kind, out0, out1):
    n = c0.shape[0]
    for i in range(n):
        x0, x1, x2, x3 = _philox_block(k0, k1, c0[i], c1[i], c2[i], c3[i])
        u0 = _to_unit(x0, x1)
        u1 = _to_unit(x2, x3)
        if kind == 0:
            out0[i] = u0
            out1[i] = u1
        elif kind == 1:
            rad = np.sqrt(-2.0 * np.log(u0))
            ang = 6.283185307179586 * u1
            out0[i] = rad * np.cos(ang)
            out1[i] = rad * np.sin(ang)
        else:
            out0[i] = np.log(u0)
            out1[i] = np.log(u1)


def philox4x32(key, counter):
    """Raw Philox-4x32-10 block for one (key, counter); returns four ints."""
    k0, k1 = (np.uint64(int(k) & 0xFFFFFFFF) for k in key)
    c = [np.uint64(int(x) & 0xFFFFFFFF) for x in counter]
    return tuple(int(v) for v in _philox_block(k0, k1, *c))


def stream_key(seed, purpose):
    seed = int(seed)
    if seed < 0:
        raise ValueError("seed must be non-negative")
    k0 = seed & 0xFFFFFFFF
    k1 = ((seed >> 32) & 0xFFFF) | ((int(purpose) & 0xFFFF) << 16)
    return np.uint64(k0), np.uint64(k1)


def _draw(kind, seed, purpose, sample, walker, iteration, slot):
    sample, walker, iteration, slot = np.broadcast_arrays(
        np.asarray(sample, dtype=np.int64), np.asarray(walker, dtype=np.int64),
        np.asarray(iteration, dtype=np.int64), np.asarray(slot, dtype=np.int64))
    shape = sample.shape
    cols = [np.ascontiguousarray(a.ravel()).astype(np.uint64) & MASK32
            for a in (sample, walker, iteration, slot)]
    k0, k1 = stream_key(seed, purpose)
    out0 = np.empty(cols[0].size)
    out1 = np.empty(cols[0].size)
    _fill(k0, k1, cols[0], cols[1], cols[2], cols[3], kind, out0, out1)
    return out0.reshape(shape), out1.reshape(shape)


def uniforms(seed, purpose, sample, walker, iteration, slot):
    """Two independent U(0,1) arrays, broadcast over the counter fields."""
    return _draw(0, seed, purpose, sample, walker, iteration, slot)


def normals(seed, purpose, sample, walker, iteration, slot):
    """Two independent N(0,1) arrays (Box-Muller on one counter block)."""
    return _draw(1, seed, purpose, sample, walker, iteration, slot)


def log_uniforms(seed, purpose, sample, walker, iteration, slot):
    """``log`` of the two uniforms, computed inside the kernel."""
    return _draw(2, seed, purpose, sample, walker, iteration, slot)
