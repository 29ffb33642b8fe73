"""Hot inner-loop kernels with numba acceleration.

Every kernel has a pure-numpy twin (``*_np``) used both as a fallback when
numba is unavailable and as the reference path in tests/benchmarks. Set
``EALM_DISABLE_NUMBA=1`` to force the numpy path.
"""

import os

import numpy as np

NUMBA_DISABLED = os.environ.get("EALM_DISABLE_NUMBA", "") == "1"

try:
    if NUMBA_DISABLED:
        raise ImportError
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        # decorator no-op so the jitted defs below stay importable
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


# ---------------------------------------------------------------------------
# 4-bit nibble packing (two's complement, low nibble = even index)


def pack_nibbles_np(codes):
    codes = np.asarray(codes, dtype=np.int8)
    n = codes.size
    padded = np.zeros((n + 1) // 2 * 2, dtype=np.int8)
    padded[:n] = codes
    u = (padded.astype(np.int16) & 0xF).astype(np.uint8)
    return (u[0::2] | (u[1::2] << 4)).astype(np.uint8)


@njit(cache=True)
def _pack_nibbles_nb(codes):
    n = codes.size
    out = np.zeros((n + 1) // 2, dtype=np.uint8)
    for i in range(n):
        nib = np.uint8(codes[i] & 0xF)
        if i % 2 == 0:
            out[i // 2] |= nib
        else:
            out[i // 2] |= nib << 4
    return out


def unpack_nibbles_np(packed, n):
    packed = np.asarray(packed, dtype=np.uint8)
    u = np.empty(packed.size * 2, dtype=np.uint8)
    u[0::2] = packed & 0xF
    u[1::2] = packed >> 4
    u = u[:n]
    signed = u.astype(np.int8)
    signed[u >= 8] -= 16
    return signed


@njit(cache=True)
def _unpack_nibbles_nb(packed, n):
    out = np.empty(n, dtype=np.int8)
    for i in range(n):
        if i % 2 == 0:
            nib = packed[i // 2] & np.uint8(0xF)
        else:
            nib = packed[i // 2] >> 4
        v = np.int8(nib)
        if v >= 8:
            v -= 16
        out[i] = v
    return out


# ---------------------------------------------------------------------------
# N:M sparsity mask for one matrix: per row, in each consecutive group of m,
# keep the n largest |w| (ties keep the lower in-group index). Trailing
# partial group of size g keeps min(n, g).


def nm_mask_np(w, n, m):
    rows, cols = w.shape
    mask = np.zeros((rows, cols), dtype=np.bool_)
    a = np.abs(w)
    full = cols // m * m
    if full:
        groups = a[:, :full].reshape(rows, -1, m)
        # stable argsort ascending; last n per group are the keepers, but ties
        # must keep the LOWER index, so sort by (-|w|, index) via lexsort-free
        # trick: argsort of -|w| with stable kind keeps lower index first.
        order = np.argsort(-groups, axis=2, kind="stable")
        keep = order[:, :, :n]
        gm = np.zeros_like(groups, dtype=np.bool_)
        np.put_along_axis(gm, keep, True, axis=2)
        mask[:, :full] = gm.reshape(rows, full)
    g = cols - full
    if g:
        tail = a[:, full:]
        order = np.argsort(-tail, axis=1, kind="stable")
        keep = order[:, : min(n, g)]
        tm = np.zeros_like(tail, dtype=np.bool_)
        np.put_along_axis(tm, keep, True, axis=1)
        mask[:, full:] = tm
    return mask


@njit(cache=True)
def _nm_mask_nb(w, n, m):
    rows, cols = w.shape
    mask = np.zeros((rows, cols), dtype=np.bool_)
    for r in range(rows):
        start = 0
        while start < cols:
            g = min(m, cols - start)
            k = min(n, g)
            for _ in range(k):
                best = -1
                best_v = -1.0
                for j in range(start, start + g):
                    if mask[r, j]:
                        continue
                    v = abs(w[r, j])
                    if v > best_v:
                        best_v = v
                        best = j
                mask[r, best] = True
            start += m
    return mask


# ---------------------------------------------------------------------------
# Longest common subsequence length over integer id sequences (ROUGE-L).


def lcs_length_np(a, b):
    la, lb = len(a), len(b)
    if la == 0 or lb == 0:
        return 0
    prev = np.zeros(lb + 1, dtype=np.int64)
    cur = np.zeros(lb + 1, dtype=np.int64)
    for i in range(la):
        eq = b == a[i]
        cur[1:] = np.where(eq, prev[:-1] + 1, 0)
        np.maximum.accumulate(np.maximum(cur[1:], prev[1:]), out=cur[1:])
        prev, cur = cur, prev
    return int(prev[lb])


@njit(cache=True)
def _lcs_length_nb(a, b):
    la, lb = len(a), len(b)
    prev = np.zeros(lb + 1, dtype=np.int64)
    cur = np.zeros(lb + 1, dtype=np.int64)
    for i in range(la):
        for j in range(lb):
            if a[i] == b[j]:
                cur[j + 1] = prev[j] + 1
            elif cur[j] > prev[j + 1]:
                cur[j + 1] = cur[j]
            else:
                cur[j + 1] = prev[j + 1]
        prev, cur = cur, prev
    return prev[lb]


def lcs_length_nb(a, b):
    return int(_lcs_length_nb(a, b))


if HAS_NUMBA:
    pack_nibbles = _pack_nibbles_nb
    unpack_nibbles = _unpack_nibbles_nb
    nm_mask_kernel = _nm_mask_nb
    lcs_length = lcs_length_nb
else:
    pack_nibbles = pack_nibbles_np
    unpack_nibbles = unpack_nibbles_np
    nm_mask_kernel = nm_mask_np
    lcs_length = lcs_length_np
