"""
Blocked CPU kernels behind gemm and spmm.

Both kernels walk row tiles (optionally in parallel), then k-tiles, then
output-column tiles. Every output element is owned by one row tile and
accumulated k-tile-major, so results do not depend on the thread count and
the sparse kernel reproduces the dense kernel bit-for-bit on unpacked input.
"""

import logging
from typing import Tuple

import numpy as np

from ..utils.optional_imports import HAS_NUMBA, njit, prange

logger = logging.getLogger(__name__)


def _dense_body(x, w, y, tm, tn, tk, counts):
    rows, depth = x.shape
    outs = w.shape[0]
    n_row_tiles = (rows + tm - 1) // tm
    for rt in prange(n_row_tiles):
        r0 = rt * tm
        r1 = min(r0 + tm, rows)
        for k0 in range(0, depth, tk):
            k1 = min(k0 + tk, depth)
            for j0 in range(0, outs, tn):
                j1 = min(j0 + tn, outs)
                for i in range(r0, r1):
                    for j in range(j0, j1):
                        acc = np.float32(0.0)
                        for k in range(k0, k1):
                            acc += x[i, k] * w[j, k]
                        y[i, j] += acc
                counts[rt] += (r1 - r0) * (j1 - j0) * (k1 - k0)


def _sparse_body(values, meta, w, y, n, m, bits, tm, tn, slots_per_tile, counts):
    rows, slots = values.shape
    outs = w.shape[0]
    mask = (1 << bits) - 1
    row_bytes = meta.shape[1]
    n_row_tiles = (rows + tm - 1) // tm
    for rt in prange(n_row_tiles):
        r0 = rt * tm
        r1 = min(r0 + tm, rows)
        cols = np.empty((r1 - r0, slots_per_tile), dtype=np.int64)
        for p0 in range(0, slots, slots_per_tile):
            p1 = min(p0 + slots_per_tile, slots)
            # decode this tile's metadata once, reuse it for every output column
            for i in range(r0, r1):
                for p in range(p0, p1):
                    bit = p * bits
                    byte = bit >> 3
                    word = np.int64(meta[i, byte])
                    if byte + 1 < row_bytes:
                        word |= np.int64(meta[i, byte + 1]) << 8
                    cols[i - r0, p - p0] = (p // n) * m + ((word >> (bit & 7)) & mask)
            for j0 in range(0, outs, tn):
                j1 = min(j0 + tn, outs)
                for i in range(r0, r1):
                    for j in range(j0, j1):
                        acc = np.float32(0.0)
                        for p in range(p0, p1):
                            acc += values[i, p] * w[j, cols[i - r0, p - p0]]
                        y[i, j] += acc
                counts[rt] += (r1 - r0) * (j1 - j0) * (p1 - p0)


if HAS_NUMBA:
    _dense_serial = njit(cache=True)(_dense_body)
    _dense_parallel = njit(cache=True, parallel=True)(_dense_body)
    _sparse_serial = njit(cache=True)(_sparse_body)
    _sparse_parallel = njit(cache=True, parallel=True)(_sparse_body)
else:
    _dense_serial = _dense_parallel = None
    _sparse_serial = _sparse_parallel = None


def _numpy_dense(x, w, y, tm, tn, tk, counts):
    rows, depth = x.shape
    outs = w.shape[0]
    for rt, r0 in enumerate(range(0, rows, tm)):
        r1 = min(r0 + tm, rows)
        for k0 in range(0, depth, tk):
            k1 = min(k0 + tk, depth)
            for j0 in range(0, outs, tn):
                j1 = min(j0 + tn, outs)
                y[r0:r1, j0:j1] += x[r0:r1, k0:k1] @ w[j0:j1, k0:k1].T
                counts[rt] += (r1 - r0) * (j1 - j0) * (k1 - k0)


def _numpy_sparse(values, meta, w, y, n, m, bits, tm, tn, slots_per_tile, counts):
    rows, slots = values.shape
    outs = w.shape[0]
    total_bits = slots * bits
    unpacked = np.unpackbits(meta, axis=1, count=total_bits, bitorder="little").reshape(rows, slots, bits)
    local = (unpacked.astype(np.int64) << np.arange(bits, dtype=np.int64)).sum(axis=-1)
    cols_all = (np.arange(slots, dtype=np.int64) // n) * m + local
    for rt, r0 in enumerate(range(0, rows, tm)):
        r1 = min(r0 + tm, rows)
        for p0 in range(0, slots, slots_per_tile):
            p1 = min(p0 + slots_per_tile, slots)
            vals = values[r0:r1, p0:p1]
            cols = cols_all[r0:r1, p0:p1]
            for j0 in range(0, outs, tn):
                j1 = min(j0 + tn, outs)
                gathered = w[j0:j1][:, cols]  # (tn, tr, slots)
                y[r0:r1, j0:j1] += np.einsum("rp,jrp->rj", vals, gathered)
                counts[rt] += (r1 - r0) * (j1 - j0) * (p1 - p0)


def dense_matmul(x: np.ndarray, w: np.ndarray, tm: int, tn: int, tk: int, parallel: bool) -> Tuple[np.ndarray, int]:
    """y = x w^T with tile sizes (tm, tn, tk); returns the output and the multiply-add count"""
    y = np.zeros((x.shape[0], w.shape[0]), dtype=np.float32)
    counts = np.zeros((x.shape[0] + tm - 1) // tm, dtype=np.int64)
    if HAS_NUMBA:
        kernel = _dense_parallel if parallel else _dense_serial
        kernel(x, w, y, tm, tn, tk, counts)
    else:
        _numpy_dense(x, w, y, tm, tn, tk, counts)
    return y, int(counts.sum())


def sparse_matmul(
    values: np.ndarray,
    meta: np.ndarray,
    w: np.ndarray,
    n: int,
    m: int,
    bits: int,
    tm: int,
    tn: int,
    slots_per_tile: int,
    parallel: bool,
) -> Tuple[np.ndarray, int]:
    """y = unpack(values, meta) w^T, gathering weight columns through the packed indices"""
    y = np.zeros((values.shape[0], w.shape[0]), dtype=np.float32)
    counts = np.zeros((values.shape[0] + tm - 1) // tm, dtype=np.int64)
    if HAS_NUMBA:
        kernel = _sparse_parallel if parallel else _sparse_serial
        kernel(values, meta, w, y, n, m, bits, tm, tn, slots_per_tile, counts)
    else:
        _numpy_sparse(values, meta, w, y, n, m, bits, tm, tn, slots_per_tile, counts)
    return y, int(counts.sum())
