"""Attitude models: per-image independent rotations or one global uniform
rotation rate, plus the incremental view-introduction schedule.

The first image anchors the reference frame: its pose is always the prior
exactly (independent corrections exist only for images 1..n-1; in global
mode t_0 = 0 makes the anchor automatic).  Camera centers stay on the
fixed-radius orbit: center = R @ (0, 0, -distance).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import geometry as geo
from .diffcore import Tensor

MODE_FIXED = "fixed"
MODE_INDEPENDENT = "independent"
MODE_GLOBAL = "global_uniform"


@dataclass
class IncrementalSchedule:
    init_views: int = 8
    init_steps: int = 2000
    steps_per_new_view: int = 60


def active_views(step: int, sched: IncrementalSchedule, total: int) -> int:
    """Number of training views unlocked at ``step`` (clamped to total)."""
    if step < 0:
        raise ValueError("step must be non-negative")
    extra = max(0, (step - sched.init_steps) // sched.steps_per_new_view)
    return min(total, sched.init_views + extra)


class PoseModel:
    """Camera rotations for every training image, optionally learnable.

    modes:
        fixed        : priors only (baseline experiment)
        independent  : R_i = exp(corr_i) @ prior_i, corr_0 frozen at zero
        global_uniform: R_i = exp(t_i * omega) @ prior_0, 3 parameters total
    """

    def __init__(self, mode: str, prior_rotations: np.ndarray, times: np.ndarray,
                 camera_distance: float, dtype=np.float64):
        if mode not in (MODE_FIXED, MODE_INDEPENDENT, MODE_GLOBAL):
            raise ValueError(f"unknown pose mode {mode!r}")
        self.mode = mode
        self.priors = np.asarray(prior_rotations, dtype=np.float64)
        self.times = np.asarray(times, dtype=np.float64) - float(times[0])
        self.camera_distance = float(camera_distance)
        self.n = self.priors.shape[0]
        self.corrections = None
        self.omega = None
        if mode == MODE_INDEPENDENT:
            self.corrections = Tensor(np.zeros((self.n - 1, 3), dtype=dtype),
                                      requires_grad=True)
        elif mode == MODE_GLOBAL:
            self.omega = Tensor(np.zeros((1, 3), dtype=dtype), requires_grad=True)

    def learnable_parameters(self) -> dict:
        if self.mode == MODE_INDEPENDENT:
            return {"pose.corrections": self.corrections}
        if self.mode == MODE_GLOBAL:
            return {"pose.omega": self.omega}
        return {}

    # --- differentiable path -------------------------------------------------

    def rotations_tensor(self, count: int, dtype=np.float64) -> Tensor:
        """Row-major rotation matrices (count, 9) for images 0..count-1,
        recorded on the tape when the mode has learnable parameters."""
        if not 1 <= count <= self.n:
            raise IndexError(f"count {count} out of range (n={self.n})")
        if self.mode == MODE_FIXED:
            return Tensor(self.priors[:count].reshape(count, 9).astype(dtype))
        if self.mode == MODE_INDEPENDENT:
            corr = dc.slice_axis(self.corrections, 0, 0, count - 1) if count > 1 \
                else None
            anchor = Tensor(self.priors[0].reshape(1, 9).astype(dtype))
            if corr is None:
                return anchor
            r9 = geo.exp_map_tensor(corr)
            composed = _compose_with_const(r9, self.priors[1:count], dtype)
            return dc.concat([anchor, composed], axis=0)
        # global uniform rotation
        t = Tensor(self.times[:count, None].astype(dtype))
        v = dc.mul(t, self.omega)
        r9 = geo.exp_map_tensor(v)
        prior0 = np.broadcast_to(self.priors[0].reshape(1, 3, 3), (count, 3, 3))
        return _compose_with_const(r9, prior0, dtype)

    # --- inference path -------------------------------------------------------

    def estimated_rotations(self) -> np.ndarray:
        """(n, 3, 3) current rotation estimates as plain arrays."""
        if self.mode == MODE_FIXED:
            return self.priors.copy()
        if self.mode == MODE_INDEPENDENT:
            corr = np.concatenate([np.zeros((1, 3)),
                                   self.corrections.data.astype(np.float64)], axis=0)
            return np.einsum("nij,njk->nik", geo.exp_map(corr), self.priors)
        omega = self.omega.data[0].astype(np.float64)
        rots = geo.exp_map(self.times[:, None] * omega[None, :])
        return np.einsum("nij,jk->nik", rots, self.priors[0])

    def camera_pose(self, i: int) -> geo.CameraPose:
        if not 0 <= i < self.n:
            raise IndexError(f"image index {i} out of range")
        r = self.estimated_rotations()[i]
        return geo.CameraPose.looking_at_origin(r, self.camera_distance)

    def pose_at_time(self, t: float) -> geo.CameraPose:
        """Global-mode pose for an arbitrary time (e.g. a validation view)."""
        if self.mode != MODE_GLOBAL:
            raise ValueError("pose_at_time requires global_uniform mode")
        omega = self.omega.data[0].astype(np.float64)
        r = geo.exp_map((t - 0.0) * omega) @ self.priors[0]
        return geo.CameraPose.looking_at_origin(r, self.camera_distance)

    def export_json(self, path):
        rots = self.estimated_rotations()
        entries = []
        for i in range(self.n):
            entries.append({
                "index": i,
                "time": float(self.times[i]),
                "axis_angle": [float(v) for v in geo.log_map(rots[i])],
                "rotation_matrix": [[float(x) for x in row] for row in rots[i]],
            })
        with open(path, "w") as fh:
            json.dump({"mode": self.mode, "poses": entries}, fh, indent=1)


def _compose_with_const(a9: Tensor, b: np.ndarray, dtype) -> Tensor:
    """Per-row matrix product of tape rotations (n, 9) with constant (n, 3, 3)."""
    b = np.asarray(b, dtype=dtype)
    cols = []
    for i in range(3):
        for j in range(3):
            acc = None
            for k in range(3):
                term = dc.mul(dc.slice_axis(a9, 1, 3 * i + k, 3 * i + k + 1),
                              Tensor(b[:, k, j:j + 1]))
                acc = term if acc is None else acc + term
            cols.append(acc)
    return dc.concat(cols, axis=1)


def rot9_rotate(r9: Tensor, v: np.ndarray, dtype=np.float64) -> Tensor:
    """Rotate constant per-row vectors (n, 3) by tape rotations (n, 9)."""
    v = np.asarray(v, dtype=dtype)
    cols = []
    for i in range(3):
        acc = None
        for k in range(3):
            term = dc.mul(dc.slice_axis(r9, 1, 3 * i + k, 3 * i + k + 1),
                          Tensor(v[:, k:k + 1]))
            acc = term if acc is None else acc + term
        cols.append(acc)
    return dc.concat(cols, axis=1)


def rot9_camera_centers(r9: Tensor, distance: float) -> Tensor:
    """Camera centers -distance * (third matrix column) as an (n, 3) tensor."""
    cols = [dc.slice_axis(r9, 1, 2, 3), dc.slice_axis(r9, 1, 5, 6),
            dc.slice_axis(r9, 1, 8, 9)]
    return dc.concat(cols, axis=1) * (-distance)


def init_pose_model(mode: str, gt_rotations: np.ndarray | None, times: np.ndarray,
                    camera_distance: float, perturbation=None,
                    dtype=np.float64) -> PoseModel:
    """Build the pose model for an experiment.

    ``perturbation`` is an optional (mean_deg, std_deg, seed) triple applied
    to every prior except the anchor (image 0): uniformly random axes,
    Gaussian angles.  Requires ground truth.  Global mode needs no priors:
    the anchor defaults to the identity convention (or the ground-truth
    anchor when available, which is the same thing for anchored datasets).
    """
    n = len(times)
    if mode in (MODE_FIXED, MODE_INDEPENDENT) and gt_rotations is None:
        raise ValueError(f"mode {mode!r} requires ground-truth priors in the manifest")
    if perturbation is not None and gt_rotations is None:
        raise ValueError("perturbation requires ground-truth rotations")

    if gt_rotations is not None:
        priors = np.array(gt_rotations, dtype=np.float64, copy=True)
    else:
        priors = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()

    if mode == MODE_GLOBAL:
        priors = np.broadcast_to(priors[0], (n, 3, 3)).copy()

    if perturbation is not None:
        mean_deg, std_deg, seed = perturbation
        rng = np.random.default_rng(seed)
        for i in range(1, n):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = np.radians(rng.normal(mean_deg, std_deg))
            priors[i] = geo.exp_map(angle * axis) @ priors[i]

    return PoseModel(mode, priors, times, camera_distance, dtype=dtype)
