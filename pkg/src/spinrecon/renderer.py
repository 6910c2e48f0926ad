"""Coarse-fine ray sampling, volumetric integration and tone mapping.

The compositing math: alpha_i = 1 - exp(-sigma_i * delta_i), visibility
w_i = alpha_i * prod_{k<i} (1 - alpha_k) (computed via the transmittance
T_i = exp(-cumsum_excl(sigma * delta)), which is the same product in closed
form), pixel radiance C = sum w_i c_i, depth D = sum w_i t_i, accumulation
W = sum w_i.

The coarse pass runs without gradient recording and only drives fine-sample
placement; gradients flow through the merged evaluation pass only (sample
positions are treated as constants, the field values at them are not).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass
class RenderConfig:
    n_coarse: int = 64
    n_fine: int = 64
    fine_floor: float = 1e-2   # uniform probability mass mixed into the fine CDF
    acc_threshold: float = 0.5  # mask for depth-derived products


@dataclass
class RaySampleSet:
    """Per-ray ordered samples; tensors where gradients may flow."""
    t: np.ndarray          # (B, S) distances, strictly increasing
    delta: np.ndarray      # (B, S) gaps, last = far - t_last
    sigma: Tensor          # (B, S)
    c: Tensor | None       # (B, S)
    w: Tensor              # (B, S)


# --- sampling ---------------------------------------------------------------

def coarse_sample(near: np.ndarray, far: np.ndarray, n: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Stratified distances: one uniform draw per equal bin of [near, far]."""
    if n < 2:
        raise ValueError("need at least 2 coarse samples")
    b = near.shape[0]
    u = rng.random((b, n))
    edges = np.arange(n) / n
    span = (far - near)[:, None]
    return near[:, None] + span * (edges[None, :] + u / n)


def fine_sample(t_coarse: np.ndarray, weights: np.ndarray,
                near: np.ndarray, far: np.ndarray, n: int,
                rng: np.random.Generator, floor: float = 1e-2) -> np.ndarray:
    """Inverse-CDF draws from the piecewise-constant coarse-weight density.

    A uniform floor (total mass ``floor``) keeps every bin reachable and
    makes all-zero weights fall back to uniform sampling.
    """
    if np.any(weights < 0):
        raise ValueError("coarse weights must be non-negative")
    b, nc = weights.shape
    mass = weights + floor / nc
    cdf = np.cumsum(mass, axis=1)
    cdf /= cdf[:, -1:]
    cdf = np.concatenate([np.zeros((b, 1)), cdf], axis=1)  # (B, nc+1)

    u = rng.random((b, n))
    # vectorized per-row searchsorted via row offsets (cdf values live in [0,1])
    off = 2.0 * np.arange(b)[:, None]
    k = np.searchsorted((cdf + off).ravel(), (u + off).ravel(), side="right")
    k = k.reshape(b, n) - np.arange(b)[:, None] * (nc + 1) - 1
    k = np.clip(k, 0, nc - 1)

    rows = np.arange(b)[:, None]
    c_lo = cdf[rows, k]
    c_hi = cdf[rows, k + 1]
    frac = (u - c_lo) / np.maximum(c_hi - c_lo, 1e-12)
    span = (far - near)[:, None]
    e_lo = near[:, None] + span * (k / nc)
    return e_lo + frac * span / nc


def merge_samples(t_coarse: np.ndarray, t_fine: np.ndarray) -> np.ndarray:
    return np.sort(np.concatenate([t_coarse, t_fine], axis=1), axis=1)


# --- compositing (numpy reference forms, used by the coarse pass and tests) --

def alpha(sigma, delta):
    """Opacity of one sample: 1 - exp(-sigma * delta)."""
    return 1.0 - np.exp(-np.asarray(sigma) * np.asarray(delta))


def weights_from_alphas(alphas: np.ndarray) -> np.ndarray:
    """w_i = alpha_i * prod_{k<i} (1 - alpha_k) along the last axis."""
    alphas = np.asarray(alphas)
    trans = np.cumprod(1.0 - alphas, axis=-1)
    trans = np.roll(trans, 1, axis=-1)
    trans[..., 0] = 1.0
    return alphas * trans


def render_radiance(samples: RaySampleSet) -> np.ndarray:
    w = samples.w.data if isinstance(samples.w, Tensor) else samples.w
    c = samples.c.data if isinstance(samples.c, Tensor) else samples.c
    return (w * c).sum(axis=-1)


def render_depth(samples: RaySampleSet) -> np.ndarray:
    w = samples.w.data if isinstance(samples.w, Tensor) else samples.w
    return (w * samples.t).sum(axis=-1)


def render_accumulation(samples: RaySampleSet) -> np.ndarray:
    w = samples.w.data if isinstance(samples.w, Tensor) else samples.w
    return w.sum(axis=-1)


# --- differentiable path ----------------------------------------------------

def deltas_from_t(t: np.ndarray, far: np.ndarray) -> np.ndarray:
    d = np.diff(t, axis=1)
    last = np.maximum(far[:, None] - t[:, -1:], 0.0)
    return np.concatenate([d, last], axis=1)


def composite(sigma: Tensor, c: Tensor | None, t: np.ndarray,
              far: np.ndarray) -> dict:
    """Tape-recorded volumetric integration over (B, S) samples.

    Returns tensors: weights (B, S), radiance/depth/acc (B,) — radiance only
    when ``c`` is given — plus the numpy delta array.
    """
    delta = deltas_from_t(t, far)
    sd = dc.mul(sigma, Tensor(delta.astype(sigma.dtype)))
    csum = dc.cumsum(sd, axis=1)
    excl = csum - sd
    trans = dc.exp(dc.neg(excl))
    a = 1.0 - dc.exp(dc.neg(sd))
    w = dc.mul(a, trans)
    out = {
        "weights": w,
        "acc": dc.tsum(w, axis=1),
        "depth": dc.tsum(dc.mul(w, Tensor(t.astype(sigma.dtype))), axis=1),
        "delta": delta,
    }
    if c is not None:
        out["radiance"] = dc.tsum(dc.mul(w, c), axis=1)
    return out


def place_samples(o_np: np.ndarray, d_np: np.ndarray, near: np.ndarray,
                  far: np.ndarray, field_eval, cfg: RenderConfig,
                  rng: np.random.Generator) -> np.ndarray:
    """Coarse-fine sample placement (values only, not differentiable)."""
    b = near.shape[0]
    t_c = coarse_sample(near, far, cfg.n_coarse, rng)
    if cfg.n_fine == 0:
        return t_c
    with dc.no_grad():
        x_c = o_np[:, None, :] + t_c[:, :, None] * d_np[:, None, :]
        idx_c = np.repeat(np.arange(b), cfg.n_coarse)
        sig_c, _ = field_eval(Tensor(x_c.reshape(-1, 3)), idx_c, False)
        sig_c = sig_c.data.reshape(b, cfg.n_coarse)
    delta_c = deltas_from_t(t_c, far)
    w_c = weights_from_alphas(alpha(sig_c, delta_c))
    t_f = fine_sample(t_c, w_c, near, far, cfg.n_fine, rng, cfg.fine_floor)
    return merge_samples(t_c, t_f)


def evaluate_samples(o: Tensor, d: Tensor, t: np.ndarray, near: np.ndarray,
                     far: np.ndarray, field_eval) -> dict:
    """Differentiable evaluation of fixed sample distances ``t`` (B, S).

    Gradients flow through the field values and the ray geometry (positions
    x = o + t d), never through the placement of ``t`` itself.
    """
    b, s = t.shape
    o3 = dc.reshape(o, (b, 1, 3))
    d3 = dc.reshape(d, (b, 1, 3))
    tt = Tensor(t[:, :, None].astype(o.dtype))
    x = dc.reshape(o3 + dc.mul(tt, d3), (b * s, 3))
    ray_idx = np.repeat(np.arange(b), s)

    sigma_flat, c_flat = field_eval(x, ray_idx, True)
    sigma = dc.reshape(sigma_flat, (b, s))
    c = dc.reshape(c_flat, (b, s)) if c_flat is not None else None

    out = composite(sigma, c, t, far)
    out["t"] = t
    out["sigma"] = sigma
    out["c"] = c
    span = np.maximum(far - near, 1e-12)[:, None]
    out["s_mid"] = (t + out["delta"] / 2.0 - near[:, None]) / span
    out["delta_s"] = out["delta"] / span
    out["samples"] = RaySampleSet(t=t, delta=out["delta"], sigma=sigma, c=c,
                                  w=out["weights"])
    return out


def render_rays(o: Tensor, d: Tensor, near: np.ndarray, far: np.ndarray,
                field_eval, cfg: RenderConfig, rng: np.random.Generator) -> dict:
    """Render a batch of rays against a field.

    ``o``/``d`` are (B, 3) tensors (gradients flow into them when they are
    recorded pose quantities); ``field_eval(x, ray_idx, need_radiance)``
    produces per-sample density/radiance.  Returns composited tensors plus
    the sample bookkeeping needed by the losses.
    """
    t = place_samples(o.data, d.data, near, far, field_eval, cfg, rng)
    return evaluate_samples(o, d, t, near, far, field_eval)


def render_full_image(params, level_weights: np.ndarray, cfg: RenderConfig,
                      intrinsics, pose, near: float, far: float,
                      appearance_index: int, rng: np.random.Generator,
                      chunk: int = 2048) -> dict:
    """Render radiance/depth/accumulation maps for one camera (no gradients).

    ``appearance_index`` selects the appearance embedding row (for held-out
    views use the nearest-in-time training image).  Rays are clipped to the
    unit cube so empty background renders exactly zero.
    """
    from . import field as field_mod
    from . import geometry as geo
    from .encoders import sh_encode

    h, w = intrinsics.height, intrinsics.width
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pix = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)
    rays = geo.generate_rays(intrinsics, pose, pix, near, far)
    t0, t1, hit = geo.ray_box_range(rays.origins, rays.dirs, -0.5, 0.5)
    mid = 0.5 * (near + far)
    near_r = np.where(hit, np.maximum(t0, near), mid - 1e-3)
    far_r = np.where(hit, np.minimum(t1, far), mid + 1e-3)

    n = len(rays)
    out = {k: np.zeros(n) for k in ("radiance", "depth", "acc")}
    for s in range(0, n, chunk):
        sl = slice(s, min(s + chunk, n))
        b = sl.stop - sl.start
        sh = Tensor(sh_encode(rays.dirs[sl], params.cfg.sh_degree))
        fe = field_mod.make_field_eval(params, level_weights, sh_per_ray=sh,
                                       app_index_per_ray=np.full(b, appearance_index))
        res = render_rays(Tensor(rays.origins[sl]), Tensor(rays.dirs[sl]),
                          near_r[sl], far_r[sl], fe, cfg, rng)
        for k in ("radiance", "depth", "acc"):
            out[k][sl] = res[k].data
    return {k: v.reshape(h, w) for k, v in out.items()}


def density_normals(points: np.ndarray, density_tensor_fn) -> np.ndarray:
    """Normals at ``points``: the normalized negative density gradient,
    computed with a reverse pass through ``density_tensor_fn`` (a Tensor ->
    Tensor density evaluation)."""
    xs = Tensor(np.asarray(points, dtype=np.float64), requires_grad=True)
    with dc.Tape():
        sigma = density_tensor_fn(xs)
        dc.backward(dc.tsum(sigma))
    grad = xs.grad.copy()
    norms = np.linalg.norm(grad, axis=1, keepdims=True)
    return -grad / np.maximum(norms, 1e-12)


def render_normal_map(params, level_weights: np.ndarray, intrinsics, pose,
                      depth: np.ndarray, acc: np.ndarray,
                      acc_threshold: float = 0.5) -> np.ndarray:
    """Surface normals as the normalized negative density gradient.

    Normals are evaluated at the depth-implied surface point of each pixel
    whose accumulation exceeds the threshold; the gradient comes from the
    differentiation core (backward of the density w.r.t. the positions).
    Returns (h, w, 3) with zeros on background pixels.
    """
    from . import field as field_mod
    from . import geometry as geo
    from .encoders import hash_encode

    h, w = intrinsics.height, intrinsics.width
    mask = acc.ravel() > acc_threshold
    out = np.zeros((h * w, 3))
    if not np.any(mask):
        return out.reshape(h, w, 3)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pix = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)[mask]
    rays = geo.generate_rays(intrinsics, pose, pix, 1.0, 10.0)
    surf = rays.origins + depth.ravel()[mask, None] * rays.dirs

    def field_density(xs):
        feats = hash_encode(xs + 0.5, params.cfg.grid, params.tables, level_weights)
        sigma, _ = field_mod.density_geometry(params, feats)
        return sigma

    out[mask] = density_normals(surf, field_density)
    for t in params.named_parameters().values():
        t.zero_grad()
    return out.reshape(h, w, 3)


# --- tone mapping -----------------------------------------------------------

def tone_map(x, m: float):
    """log(1 + x)/log(1 + m); maps [0, m] monotonically onto [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("tone_map input must be non-negative")
    if m <= 0:
        raise ValueError("tone_map scale must be positive")
    return np.log1p(x) / np.log1p(m)


def tone_unmap(y, m: float):
    """Inverse of tone_map: round-trips to 1e-9 or better."""
    y = np.asarray(y, dtype=np.float64)
    return np.expm1(y * np.log1p(m))


# --- image I/O --------------------------------------------------------------

def write_pgm16(path, img: np.ndarray):
    """16-bit grayscale binary PGM (P5, maxval 65535, big-endian).

    Input values in [0, 1] are quantized to round(x * 65535).
    """
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("write_pgm16 expects a 2-D image")
    q = np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm16(path) -> np.ndarray:
    """Read a 16-bit P5 PGM back to floats in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = []
    pos = 0
    while len(parts) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        parts.append(data[start:pos])
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 65535:
        raise ValueError(f"{path}: expected 16-bit PGM, got maxval {maxval}")
    pos += 1  # single whitespace after maxval
    img = np.frombuffer(data, dtype=">u2", count=w * h, offset=pos)
    return img.reshape(h, w).astype(np.float64) / 65535.0


def write_ppm16(path, img: np.ndarray):
    """16-bit three-channel binary PPM (P6, maxval 65535, big-endian)."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("write_ppm16 expects (h, w, 3)")
    q = np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())
