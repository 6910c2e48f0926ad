"""Position and direction encodings.

Multiresolution hash encoding: each level stores a table of learnable
feature vectors addressed either densely (small grids) or through a spatial
hash (large grids).  A queried point is trilinearly interpolated from its 8
surrounding lattice corners.  The interpolation is differentiable w.r.t.
both the table entries and the query position; the position path is what
carries attitude gradients.

Coarse-to-fine masking: level ``l`` output is formed as
``w * f + (1 - w) * detach(f)`` with ``w`` the schedule weight.  The forward
value is always exactly ``f``; the backward pass through both the table and
the position is scaled by ``w`` (0 = fully masked, 1 = fully on).

Direction encoding uses the real spherical-harmonics basis up to degree 4.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _fastops as fastops
from . import diffcore as dc
from .diffcore import Tensor

HASH_PRIMES = (1, 2654435761, 805459861)


@dataclass
class HashGridConfig:
    levels: int = 8
    min_resolution: int = 16
    growth: float = 1.5
    table_size: int = 2 ** 14
    features_per_level: int = 2
    always_on_levels: int = 2

    def __post_init__(self):
        if self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")
        res = self.resolutions()
        if np.any(np.diff(res) <= 0):
            raise ValueError("per-level resolutions must be strictly increasing")

    def resolutions(self) -> np.ndarray:
        ls = np.arange(self.levels)
        return np.floor(self.min_resolution * self.growth ** ls).astype(np.int64)

    @property
    def out_dim(self) -> int:
        return self.levels * self.features_per_level


@dataclass
class ScheduleConfig:
    total_schedule_steps: int = 2000
    easing: str = "cosine"


def init_tables(cfg: HashGridConfig, rng: np.random.Generator,
                dtype=np.float64) -> Tensor:
    """Learnable feature tables, one (table_size, F) block per level,
    stacked into a single (levels * table_size, F) tensor. Uniform init in
    [-1e-4, 1e-4]."""
    shape = (cfg.levels * cfg.table_size, cfg.features_per_level)
    data = rng.uniform(-1e-4, 1e-4, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def hash_index(cells: np.ndarray, resolution: int, table_size: int) -> np.ndarray:
    """Map integer lattice coordinates to table indices for one level.

    Levels whose full lattice fits in the table are indexed densely
    (x + N*y + N^2*z); larger levels use the XOR'd-primes spatial hash
    modulo table size.
    """
    cells = np.asarray(cells, dtype=np.int64)
    single = cells.ndim == 1
    cells = np.atleast_2d(cells)
    if resolution ** 3 <= table_size:
        idx = cells[:, 0] + resolution * cells[:, 1] + resolution * resolution * cells[:, 2]
    else:
        idx = (cells[:, 0] * HASH_PRIMES[0]
               ^ cells[:, 1] * HASH_PRIMES[1]
               ^ cells[:, 2] * HASH_PRIMES[2]) % table_size
    return idx[0] if single else idx


_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)],
                    dtype=np.int64)


def _trilinear_level(xc: Tensor, tables: Tensor, level: int,
                     cfg: HashGridConfig) -> Tensor:
    """Interpolate one level's features at clipped positions ``xc`` (n, 3).

    Fused forward/backward: a single tape node whose backward produces both
    the table scatter-add and the position gradient analytically (numba
    kernels; ``_trilinear_level_reference`` is the equivalent numpy form).
    """
    res = int(cfg.resolutions()[level])
    scale = float(res - 1)
    offset = level * cfg.table_size
    dense = res ** 3 <= cfg.table_size
    tmask = np.int64(cfg.table_size - 1)
    table_view = tables.data[offset:offset + cfg.table_size]
    pos = np.ascontiguousarray(xc.data)

    out_data = np.empty((pos.shape[0], cfg.features_per_level), dtype=tables.dtype)
    fastops.trilinear_fwd(pos, scale, res, dense, tmask, table_view, out_data)
    out = Tensor(out_data)

    if dc._recording(xc, tables):
        def bwd(g):
            need_t = tables.requires_grad
            need_p = xc.requires_grad
            acc = np.zeros_like(tables.data) if need_t else _EMPTY2[tables.dtype.name]
            gpos = np.empty_like(pos) if need_p else _EMPTY2[pos.dtype.name]
            gtab = acc[offset:offset + cfg.table_size] if need_t else acc
            fastops.trilinear_bwd(pos, scale, res, dense, tmask, table_view,
                                  np.ascontiguousarray(g), gtab, gpos,
                                  need_t, need_p)
            if need_t:
                dc._accum(tables, acc, own=True)
            if need_p:
                dc._accum(xc, gpos, own=True)

        dc._record(out, (xc, tables), bwd)
    return out


_EMPTY2 = {"float64": np.empty((0, 3)), "float32": np.empty((0, 3), dtype=np.float32)}


def _trilinear_level_reference(xc: Tensor, tables: Tensor, level: int,
                               cfg: HashGridConfig) -> np.ndarray:
    """Pure-numpy forward of one level (verification twin of the kernel)."""
    res = int(cfg.resolutions()[level])
    scale = float(res - 1)
    offset = level * cfg.table_size
    pos = xc.data * scale
    base = np.minimum(np.floor(pos), res - 2).astype(np.int64)
    np.maximum(base, 0, out=base)
    frac = pos - base
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    out = np.zeros((pos.shape[0], cfg.features_per_level), dtype=tables.dtype)
    for c in range(8):
        ox, oy, oz = _CORNERS[c]
        idx = hash_index(base + _CORNERS[c], res, cfg.table_size) + offset
        w = ((fx if ox else 1.0 - fx)
             * (fy if oy else 1.0 - fy)
             * (fz if oz else 1.0 - fz))
        out += w[:, None] * tables.data[idx]
    return out


def hash_encode(x: Tensor, cfg: HashGridConfig, tables: Tensor,
                level_weights: np.ndarray) -> Tensor:
    """Encode positions in the unit cube into (n, levels * F) features.

    Positions outside [0, 1]^3 are clamped (gradient zero there).  Level
    outputs are combined as ``w*f + (1-w)*detach(f)``: forward values are
    unaffected by the schedule, gradients are scaled by ``level_weights``.
    """
    if not np.all(np.isfinite(x.data)):
        raise ValueError("non-finite positions passed to hash_encode")
    if x.data.min() < -1e-9 or x.data.max() > 1.0 + 1e-9:
        warnings.warn("positions outside the unit cube are clamped", RuntimeWarning)
    xc = dc.clip(x, 0.0, 1.0)
    outs = []
    for level in range(cfg.levels):
        f = _trilinear_level(xc, tables, level, cfg)
        w = float(level_weights[level])
        if w >= 1.0:
            outs.append(f)
        elif w <= 0.0:
            outs.append(dc.detach(f))
        else:
            outs.append(f * w + dc.detach(f) * (1.0 - w))
    return dc.concat(outs, axis=1)


def schedule_weights(step: int, sched: ScheduleConfig, grid: HashGridConfig) -> np.ndarray:
    """Per-level gradient weights in [0, 1] for the coarse-to-fine schedule.

    Progress alpha = levels * min(step/total, 1) sweeps one level after
    another with a cosine ramp; the first ``always_on_levels`` are pinned at 1.
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    total = max(sched.total_schedule_steps, 1)
    alpha = grid.levels * min(step / total, 1.0)
    w = np.ones(grid.levels)
    for k in range(grid.always_on_levels, grid.levels):
        if alpha >= k + 1:
            w[k] = 1.0
        elif alpha <= k:
            w[k] = 0.0
        else:
            w[k] = (1.0 - np.cos((alpha - k) * np.pi)) / 2.0
    return w


# --- real spherical harmonics (orthonormal basis, Cartesian polynomial forms)

_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
       -1.0925484305920792, 0.5462742152960396)
_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
       0.3731763325901154, -0.4570457994644658, 1.445305721320277,
       -0.5900435899266435)


def sh_encode_tensor(x: Tensor, y: Tensor, z: Tensor, degree: int = 4) -> Tensor:
    """SH basis values for unit directions given as (n, 1) component tensors.

    Returns an (n, degree^2) tensor; differentiable w.r.t. the components.
    """
    if not 1 <= degree <= 4:
        raise ValueError("degree must be in [1, 4]")
    ones = Tensor(np.ones_like(x.data))
    cols = [ones * _C0]
    if degree >= 2:
        cols += [y * -_C1, z * _C1, x * -_C1]
    if degree >= 3:
        xx, yy, zz = dc.mul(x, x), dc.mul(y, y), dc.mul(z, z)
        xy, yz, xz = dc.mul(x, y), dc.mul(y, z), dc.mul(x, z)
        cols += [
            xy * _C2[0],
            yz * _C2[1],
            (zz * 2.0 - xx - yy) * _C2[2],
            xz * _C2[3],
            (xx - yy) * _C2[4],
        ]
    if degree >= 4:
        cols += [
            dc.mul(y, xx * 3.0 - yy) * _C3[0],
            dc.mul(xy, z) * _C3[1],
            dc.mul(y, zz * 4.0 - xx - yy) * _C3[2],
            dc.mul(z, zz * 2.0 - xx * 3.0 - yy * 3.0) * _C3[3],
            dc.mul(x, zz * 4.0 - xx - yy) * _C3[4],
            dc.mul(z, xx - yy) * _C3[5],
            dc.mul(x, xx - yy * 3.0) * _C3[6],
        ]
    return dc.concat(cols, axis=1)


def sh_encode(dirs: np.ndarray, degree: int = 4) -> np.ndarray:
    """SH basis for an (n, 3) array of unit directions (values only)."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    norms = np.linalg.norm(dirs, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("sh_encode expects unit directions")
    x = Tensor(dirs[:, 0:1])
    y = Tensor(dirs[:, 1:2])
    z = Tensor(dirs[:, 2:3])
    return sh_encode_tensor(x, y, z, degree).data
