"""Rotations, camera model and ray generation in the object-attached frame.

Conventions:
    * camera space: +x right (columns), +y down (rows), +z optical axis;
      at identity pose the camera sits on the -z axis and looks at the origin.
    * a pose rotation maps camera-space directions into the object frame.
    * the object of interest fits inside the unit cube centered at the origin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

TAYLOR_ANGLE_EPS = 1e-8


def exp_map(v: np.ndarray) -> np.ndarray:
    """Rodrigues formula: axis-angle 3-vector(s) to rotation matrix(es).

    Accepts (3,) or (n, 3); returns (3, 3) or (n, 3, 3).  Smooth at v = 0:
    below ``TAYLOR_ANGLE_EPS`` the sin/cos coefficients switch to their
    second-order Taylor expansions.
    """
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    theta2 = (v * v).sum(axis=1)
    theta = np.sqrt(theta2)
    small = theta < TAYLOR_ANGLE_EPS
    safe = np.where(small, 1.0, theta)
    # A = sin(t)/t, B = (1 - cos t)/t^2 = 2 sin^2(t/2)/t^2 (no cancellation)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, 2.0 * np.sin(safe / 2.0) ** 2 / safe**2)
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    r = np.empty((v.shape[0], 3, 3))
    r[:, 0, 0] = 1.0 - b * (y * y + z * z)
    r[:, 0, 1] = -a * z + b * x * y
    r[:, 0, 2] = a * y + b * x * z
    r[:, 1, 0] = a * z + b * x * y
    r[:, 1, 1] = 1.0 - b * (x * x + z * z)
    r[:, 1, 2] = -a * x + b * y * z
    r[:, 2, 0] = -a * y + b * x * z
    r[:, 2, 1] = a * x + b * y * z
    r[:, 2, 2] = 1.0 - b * (x * x + y * y)
    return r[0] if single else r


def exp_map_tensor(v: Tensor) -> Tensor:
    """Differentiable Rodrigues map for a batch of axis-angle rows.

    Input (n, 3) tensor, output (n, 9) tensor with row-major matrix entries.
    Uses the branch-free form A = sin(t)/t, B = 2 sin^2(t/2)/t^2 with
    t = sqrt(|v|^2 + 1e-24), exact and smooth through v = 0.
    """
    x = dc.slice_axis(v, 1, 0, 1)
    y = dc.slice_axis(v, 1, 1, 2)
    z = dc.slice_axis(v, 1, 2, 3)
    xx, yy, zz = dc.mul(x, x), dc.mul(y, y), dc.mul(z, z)
    t2 = xx + yy + zz
    t2r = t2 + 1e-24
    t = dc.sqrt(t2r)
    a = dc.div(dc.sin(t), t)
    half_sin = dc.sin(t * 0.5)
    b = dc.div(dc.mul(half_sin, half_sin) * 2.0, t2r)
    xy, xz, yz = dc.mul(x, y), dc.mul(x, z), dc.mul(y, z)
    one = Tensor(np.ones_like(x.data))
    cols = [
        one - dc.mul(b, yy + zz),
        dc.mul(b, xy) - dc.mul(a, z),
        dc.mul(a, y) + dc.mul(b, xz),
        dc.mul(a, z) + dc.mul(b, xy),
        one - dc.mul(b, xx + zz),
        dc.mul(b, yz) - dc.mul(a, x),
        dc.mul(b, xz) - dc.mul(a, y),
        dc.mul(a, x) + dc.mul(b, yz),
        one - dc.mul(b, xx + yy),
    ]
    return dc.concat(cols, axis=1)


def log_map(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to canonical axis-angle (angle in [0, pi])."""
    r = np.asarray(r, dtype=np.float64)
    cos_t = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    if theta < TAYLOR_ANGLE_EPS:
        return np.zeros(3)
    skew = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if np.pi - theta > 1e-6:
        return theta * skew / (2.0 * np.sin(theta))
    # near pi the skew part vanishes; recover axis from the symmetric part
    m = (r + np.eye(3)) / 2.0
    axis = np.sqrt(np.maximum(np.diagonal(m), 0.0))
    k = int(np.argmax(axis))
    axis = m[:, k] / max(axis[k], 1e-12)
    axis = axis / np.linalg.norm(axis)
    if np.dot(axis, skew) < 0:
        axis = -axis
    return theta * axis


def canonical_axis_angle(v: np.ndarray) -> np.ndarray:
    """Wrap the rotation angle into [0, pi], flipping the axis if needed."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v)
    if theta < TAYLOR_ANGLE_EPS:
        return v.copy()
    wrapped = np.mod(theta, 2.0 * np.pi)
    axis = v / theta
    if wrapped > np.pi:
        wrapped = 2.0 * np.pi - wrapped
        axis = -axis
    return wrapped * axis


def angular_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Angle in degrees between two rotation matrices, range [0, 180]."""
    arg = (np.trace(a.T @ b) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(arg, -1.0, 1.0))))


def is_rotation(r: np.ndarray, tol: float = 1e-9) -> bool:
    return (np.abs(r.T @ r - np.eye(3)).max() < tol
            and abs(np.linalg.det(r) - 1.0) < tol)


@dataclass
class CameraIntrinsics:
    focal_px: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.focal_px <= 0:
            raise ValueError("focal length must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image bounds")

    def pixel_dirs(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Unnormalized camera-space directions for pixel centers, (n, 3)."""
        u = (np.asarray(cols, dtype=np.float64) - self.cx) / self.focal_px
        v = (np.asarray(rows, dtype=np.float64) - self.cy) / self.focal_px
        return np.stack([u, v, np.ones_like(u)], axis=1)


@dataclass
class CameraPose:
    rotation: np.ndarray  # (3, 3), camera -> object frame
    center: np.ndarray    # (3,), camera position in the object frame

    @classmethod
    def looking_at_origin(cls, rotation: np.ndarray, distance: float) -> "CameraPose":
        center = rotation @ np.array([0.0, 0.0, -distance])
        return cls(rotation=rotation, center=center)


@dataclass
class Rays:
    origins: np.ndarray     # (n, 3)
    dirs: np.ndarray        # (n, 3) unit vectors
    near: np.ndarray        # (n,)
    far: np.ndarray         # (n,)

    def __len__(self):
        return self.origins.shape[0]


def generate_rays(intrinsics: CameraIntrinsics, pose: CameraPose,
                  pixels: np.ndarray, near: float, far: float) -> Rays:
    """Back-project pixel (row, col) pairs into object-frame rays.

    Ray origin is the camera center; directions are the rotated, normalized
    pinhole directions.  ``near``/``far`` are scalar bounds applied to all
    rays (callers may tighten them per ray afterwards).
    """
    pixels = np.asarray(pixels)
    rows, cols = pixels[:, 0], pixels[:, 1]
    if (rows.min() < 0 or rows.max() >= intrinsics.height
            or cols.min() < 0 or cols.max() >= intrinsics.width):
        raise ValueError("pixel coordinates outside image bounds")
    d_cam = intrinsics.pixel_dirs(rows, cols)
    d_obj = d_cam @ pose.rotation.T
    d_obj /= np.linalg.norm(d_obj, axis=1, keepdims=True)
    n = pixels.shape[0]
    origins = np.broadcast_to(pose.center, (n, 3)).copy()
    return Rays(origins=origins, dirs=d_obj,
                near=np.full(n, float(near)), far=np.full(n, float(far)))


def ray_box_range(origins: np.ndarray, dirs: np.ndarray,
                  lo: float, hi: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slab intersection of rays with the axis-aligned cube [lo, hi]^3.

    Returns (t_enter, t_exit, hit_mask); t values only meaningful where hit.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # parallel rays: axis does not constrain if origin inside the slab
    par = dirs == 0.0
    inside = (origins >= lo) & (origins <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    t_enter = tmin.max(axis=1)
    t_exit = tmax.min(axis=1)
    hit = (t_exit > np.maximum(t_enter, 0.0))
    return t_enter, t_exit, hit
