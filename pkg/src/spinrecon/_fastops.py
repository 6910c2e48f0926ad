"""Numba kernels for the interpolation/activation hot paths.

These are drop-in accelerations of the reference numpy formulations (the
tests compare both paths).  Scatter-accumulating kernels run sequentially so
gradient accumulation stays bitwise deterministic; pure per-element maps may
run in parallel.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

HASH_P1 = np.int64(2654435761)
HASH_P2 = np.int64(805459861)


@njit(cache=True, fastmath=False)
def trilinear_fwd(pos, scale, res, dense, tmask, table, out):
    """Interpolate one level. pos (n,3) in [0,1], table (t, f), out (n, f)."""
    n = pos.shape[0]
    nf = table.shape[1]
    r2 = np.int64(res) * np.int64(res)
    for i in range(n):
        px = pos[i, 0] * scale
        py = pos[i, 1] * scale
        pz = pos[i, 2] * scale
        bx = min(int(px), res - 2)
        by = min(int(py), res - 2)
        bz = min(int(pz), res - 2)
        fx = px - bx
        fy = py - by
        fz = pz - bz
        for f in range(nf):
            out[i, f] = 0.0
        for cx in range(2):
            wx = fx if cx else 1.0 - fx
            x = np.int64(bx + cx)
            for cy in range(2):
                wy = fy if cy else 1.0 - fy
                y = np.int64(by + cy)
                for cz in range(2):
                    wz = fz if cz else 1.0 - fz
                    z = np.int64(bz + cz)
                    if dense:
                        idx = x + np.int64(res) * y + r2 * z
                    else:
                        idx = (x ^ (y * HASH_P1) ^ (z * HASH_P2)) & tmask
                    w = wx * wy * wz
                    for f in range(nf):
                        out[i, f] += w * table[idx, f]


@njit(cache=True, fastmath=False)
def trilinear_bwd(pos, scale, res, dense, tmask, table, g, gtable, gpos,
                  need_table, need_pos):
    """Backward of trilinear_fwd: accumulates into gtable (t, f) and writes
    gpos (n, 3).  Sequential on purpose (deterministic accumulation)."""
    n = pos.shape[0]
    nf = table.shape[1]
    r2 = np.int64(res) * np.int64(res)
    for i in range(n):
        px = pos[i, 0] * scale
        py = pos[i, 1] * scale
        pz = pos[i, 2] * scale
        bx = min(int(px), res - 2)
        by = min(int(py), res - 2)
        bz = min(int(pz), res - 2)
        fx = px - bx
        fy = py - by
        fz = pz - bz
        gx = 0.0
        gy = 0.0
        gz = 0.0
        for cx in range(2):
            wx = fx if cx else 1.0 - fx
            sx = 1.0 if cx else -1.0
            x = np.int64(bx + cx)
            for cy in range(2):
                wy = fy if cy else 1.0 - fy
                sy = 1.0 if cy else -1.0
                y = np.int64(by + cy)
                for cz in range(2):
                    wz = fz if cz else 1.0 - fz
                    sz = 1.0 if cz else -1.0
                    z = np.int64(bz + cz)
                    if dense:
                        idx = x + np.int64(res) * y + r2 * z
                    else:
                        idx = (x ^ (y * HASH_P1) ^ (z * HASH_P2)) & tmask
                    w = wx * wy * wz
                    gdotf = 0.0
                    for f in range(nf):
                        gv = g[i, f]
                        gdotf += gv * table[idx, f]
                        if need_table:
                            gtable[idx, f] += w * gv
                    if need_pos:
                        gx += sx * wy * wz * gdotf
                        gy += sy * wx * wz * gdotf
                        gz += sz * wx * wy * gdotf
        if need_pos:
            gpos[i, 0] = gx * scale
            gpos[i, 1] = gy * scale
            gpos[i, 2] = gz * scale


@njit(cache=True, parallel=True, fastmath=False)
def tanh_bwd_flat(g, out, gx):
    for i in prange(g.size):
        gx[i] = g[i] * (1.0 - out[i] * out[i])


@njit(cache=True, parallel=True, fastmath=False)
def add_bias_inplace(x, b):
    n, m = x.shape
    for i in prange(n):
        for j in range(m):
            x[i, j] += b[j]
