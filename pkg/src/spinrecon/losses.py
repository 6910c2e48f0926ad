"""Training objectives.

All terms are means over the ray batch so magnitudes are batch-size
independent.  The distortion term uses the O(n) prefix-sum evaluation of
sum_ij w_i w_j |s_i - s_j| (+ the intra-bin w^2 term); the quadratic
double-sum form is kept as a reference for verification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass
class LossWeights:
    lambda_opacity: float = 1e-2
    lambda_radiance: float = 1e-4
    lambda_distortion: float = 2e-2
    lambda_pose_l1: float = 1e-4


def photometric_l2(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error over the ray batch (tone-mapped space)."""
    target = np.asarray(target)
    if pred.data.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.data.shape} vs target {target.shape}")
    diff = pred - Tensor(target.astype(pred.dtype))
    return dc.tmean(dc.mul(diff, diff))


def opacity_loss(acc: Tensor) -> Tensor:
    """Mean of -W log W; zero at W in {0, 1}, maximal at W = 1/e."""
    w = dc.clip(acc, 1e-6, 1.0)
    return dc.tmean(dc.neg(dc.mul(w, dc.log(w))))


def radiance_loss(c: Tensor) -> Tensor:
    """Mean over rays of the summed per-sample radiances (merged samples)."""
    return dc.tmean(dc.tsum(c, axis=1))


def distortion_loss(w: Tensor, s_mid: np.ndarray, delta_s: np.ndarray) -> Tensor:
    """Compactness of the weight distribution along each ray, mean over rays.

    Per ray: sum_ij w_i w_j |s_i - s_j| + (1/3) sum_i w_i^2 ds_i with s the
    ray coordinate normalized to [0, 1].  Prefix-sum form, O(n) per ray.
    """
    s = Tensor(np.asarray(s_mid).astype(w.dtype))
    ds = Tensor(np.asarray(delta_s).astype(w.dtype))
    ws = dc.mul(w, s)
    a = dc.cumsum(w, axis=1) - w         # sum_{j<i} w_j
    b = dc.cumsum(ws, axis=1) - ws       # sum_{j<i} w_j s_j
    pair = dc.tsum(dc.mul(w, dc.mul(s, a) - b), axis=1) * 2.0
    quad = dc.tsum(dc.mul(dc.mul(w, w), ds), axis=1) * (1.0 / 3.0)
    return dc.tmean(pair + quad)


def distortion_loss_bruteforce(w: np.ndarray, s_mid: np.ndarray,
                               delta_s: np.ndarray) -> float:
    """O(n^2) reference evaluation (mean over rays)."""
    w = np.atleast_2d(w)
    s = np.atleast_2d(s_mid)
    ds = np.atleast_2d(delta_s)
    vals = []
    for wi, si, dsi in zip(w, s, ds):
        pair = np.sum(wi[:, None] * wi[None, :] * np.abs(si[:, None] - si[None, :]))
        vals.append(pair + (wi ** 2 * dsi).sum() / 3.0)
    return float(np.mean(vals))


def pose_l1(params: Tensor) -> Tensor:
    """Mean absolute value of the optimized rotation parameters."""
    return dc.tmean(dc.absval(params))


def total_loss(photo: Tensor, weights: LossWeights,
               opacity: Tensor | None = None,
               rad: Tensor | None = None,
               distortion: Tensor | None = None,
               pose_reg: Tensor | None = None) -> tuple[Tensor, dict]:
    """Weighted sum of the active terms; returns (total, per-term floats)."""
    parts = {"photo": float(photo.data)}
    total = photo
    for name, term, lam in (
        ("opacity", opacity, weights.lambda_opacity),
        ("radiance", rad, weights.lambda_radiance),
        ("distortion", distortion, weights.lambda_distortion),
        ("pose_l1", pose_reg, weights.lambda_pose_l1),
    ):
        if term is not None and lam != 0.0:
            total = total + term * lam
            parts[name] = float(term.data)
        else:
            parts[name] = float(term.data) if term is not None else 0.0
    parts["total"] = float(total.data)
    return total, parts
