"""Synthetic ground-truth generator: procedural satellite, ray tracer, writer.

This module is the independent oracle for the whole pipeline.  It shares no
code with the volumetric renderer: images come from per-pixel ray-triangle
intersection (Moller-Trumbore) with Lambertian + Phong-style shading, hard
shadows and an exactly black background.

Scene setup: the object sits in the unit cube around the origin and rotates
uniformly about a fixed axis while the camera and the sun stay fixed, the
sun directly behind the camera (optionally offset by a few degrees).  In the
object-attached frame this appears as the camera orbiting the static object;
per-image camera rotations are what the manifest records as ground truth.

Dataset directory layout (byte-exact for identical configs):
    manifest.json       sequence metadata (see DatasetManifest)
    images/NNNN.pgm     16-bit grayscale, pixel = round(raw_radiance / M * 65535)
    gt_cloud.ply        area-weighted surface samples of the true mesh

Raw radiance is what the tracer outputs; tone mapping is applied at load
time so the tone scale M can change without regenerating images.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import geometry as geo
from . import plyio
from .renderer import tone_map, write_pgm16, read_pgm16


@dataclass
class Material:
    albedo: float
    specular: float
    shininess: float


@dataclass
class TriangleMesh:
    vertices: np.ndarray       # (v, 3)
    triangles: np.ndarray      # (t, 3) int indices
    albedo: np.ndarray         # (t,)
    specular: np.ndarray       # (t,)
    shininess: np.ndarray      # (t,)

    @property
    def tri_vertices(self) -> np.ndarray:
        return self.vertices[self.triangles]

    def areas(self) -> np.ndarray:
        tv = self.tri_vertices
        cross = np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


@dataclass
class SatelliteParams:
    bus_size: tuple = (0.36, 0.30, 0.42)
    panel_size: tuple = (0.26, 0.012, 0.30)
    panel_gap: float = 0.03
    dish_radius: float = 0.09
    dish_depth: float = 0.055
    dish_offset_y: float = 0.07
    dish_segments: int = 16
    bus_material: Material = dc_field(default_factory=lambda: Material(0.62, 0.25, 20.0))
    panel_material: Material = dc_field(default_factory=lambda: Material(0.32, 0.55, 60.0))
    dish_material: Material = dc_field(default_factory=lambda: Material(0.85, 0.15, 10.0))


def _quad_grid(origin, du, dv, subdiv):
    verts, tris = [], []
    for i in range(subdiv + 1):
        for j in range(subdiv + 1):
            verts.append(origin + du * (i / subdiv) + dv * (j / subdiv))
    for i in range(subdiv):
        for j in range(subdiv):
            a = i * (subdiv + 1) + j
            b = a + subdiv + 1
            tris.append([a, b + 1, b])
            tris.append([a, a + 1, b + 1])
    return np.array(verts, dtype=np.float64), np.array(tris, dtype=np.int64)


def _append(parts, verts, tris, mat: Material):
    parts.append((verts, tris, mat))


def _solid_box(center, size, subdiv=2):
    """Six outward-facing subdivided faces of an axis-aligned box."""
    c = np.asarray(center, dtype=np.float64)
    h = np.asarray(size, dtype=np.float64) / 2.0
    ex = np.array([size[0], 0, 0])
    ey = np.array([0, size[1], 0])
    ez = np.array([0, 0, size[2]])
    faces = [
        (c + [-h[0], -h[1], +h[2]], ex, ey),    # +z
        (c + [-h[0], +h[1], -h[2]], ex, -ey),   # -z
        (c + [-h[0], +h[1], +h[2]], ex, -ez),   # +y
        (c + [-h[0], -h[1], -h[2]], ex, ez),    # -y
        (c + [+h[0], -h[1], -h[2]], ey, ez),    # +x
        (c + [-h[0], -h[1], +h[2]], ey, -ez),   # -x
    ]
    all_v, all_t = [], []
    offset = 0
    for origin, du, dv in faces:
        v, t = _quad_grid(origin, du, dv, subdiv)
        all_v.append(v)
        all_t.append(t + offset)
        offset += len(v)
    return np.concatenate(all_v), np.concatenate(all_t)


def build_satellite(params: SatelliteParams | None = None) -> TriangleMesh:
    """Procedural satellite: bus + two symmetric solar panels + offset dish.

    The panels are exactly symmetric under a 180-degree rotation about both
    the panel (x) axis and the z axis; the dish is offset in +y so the body
    as a whole is not symmetric (pseudo-symmetry only).
    """
    p = params or SatelliteParams()
    for v in (*p.bus_size, *p.panel_size, p.dish_radius, p.dish_depth):
        if v <= 0:
            raise ValueError("satellite dimensions must be positive")

    parts = []
    _append(parts, *_solid_box((0, 0, 0), p.bus_size, subdiv=2), p.bus_material)
    px = p.bus_size[0] / 2 + p.panel_gap + p.panel_size[0] / 2
    _append(parts, *_solid_box((+px, 0, 0), p.panel_size, subdiv=2), p.panel_material)
    _append(parts, *_solid_box((-px, 0, 0), p.panel_size, subdiv=2), p.panel_material)

    # dish: open cone, rim ring + apex, plus a back cap
    seg = p.dish_segments
    ang = 2 * np.pi * np.arange(seg) / seg
    z0 = p.bus_size[2] / 2
    rim = np.stack([p.dish_radius * np.cos(ang),
                    p.dish_offset_y + p.dish_radius * np.sin(ang),
                    np.full(seg, z0 + p.dish_depth)], axis=1)
    apex = np.array([[0.0, p.dish_offset_y, z0]])
    back = np.array([[0.0, p.dish_offset_y, z0 + p.dish_depth]])
    dish_v = np.concatenate([rim, apex, back])
    side = [[i, (i + 1) % seg, seg] for i in range(seg)]
    cap = [[(i + 1) % seg, i, seg + 1] for i in range(seg)]
    _append(parts, dish_v, np.array(side + cap, dtype=np.int64), p.dish_material)

    verts, tris, alb, spec, shin = [], [], [], [], []
    offset = 0
    for v, t, mat in parts:
        verts.append(v)
        tris.append(np.asarray(t) + offset)
        n = len(t)
        alb.append(np.full(n, mat.albedo))
        spec.append(np.full(n, mat.specular))
        shin.append(np.full(n, mat.shininess))
        offset += len(v)
    mesh = TriangleMesh(np.concatenate(verts), np.concatenate(tris),
                        np.concatenate(alb), np.concatenate(spec),
                        np.concatenate(shin))
    lo, hi = mesh.bounding_box()
    if lo.min() < -0.5 or hi.max() > 0.5:
        raise ValueError("satellite does not fit in the unit cube")
    return mesh


# --- ray tracing -------------------------------------------------------------

def _intersect(origins: np.ndarray, dirs: np.ndarray, mesh: TriangleMesh,
               t_max: float = np.inf):
    """Nearest hit per ray: returns (t, tri_index, hit_mask)."""
    tv = mesh.tri_vertices
    v0 = tv[:, 0]
    e1 = tv[:, 1] - v0
    e2 = tv[:, 2] - v0
    n_rays = origins.shape[0]
    best_t = np.full(n_rays, np.inf)
    best_tri = np.full(n_rays, -1, dtype=np.int64)
    chunk = max(1, 2_000_000 // max(len(tv), 1))
    for s in range(0, n_rays, chunk):
        o = origins[s:s + chunk][:, None, :]     # (r, 1, 3)
        d = dirs[s:s + chunk][:, None, :]
        p = np.cross(d, e2[None, :, :])          # (r, t, 3)
        det = np.einsum("rtk,tk->rt", p, e1)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            tvec = o - v0[None, :, :]
            u = np.einsum("rtk,rtk->rt", tvec, p) * inv
            q = np.cross(tvec, e1[None, :, :])
            v = np.einsum("rtk,rtk->rt", q, np.broadcast_to(d, q.shape)) * inv
            t = np.einsum("rtk,tk->rt", q, e2) * inv
            ok = ((np.abs(det) > 1e-12) & (u >= 0) & (v >= 0) & (u + v <= 1)
                  & (t > 1e-9) & (t < t_max))
        t = np.where(ok, t, np.inf)
        idx = np.argmin(t, axis=1)
        rows = np.arange(t.shape[0])
        tmin = t[rows, idx]
        best_t[s:s + chunk] = tmin
        best_tri[s:s + chunk] = np.where(np.isfinite(tmin), idx, -1)
    hit = best_tri >= 0
    return best_t, best_tri, hit


def _occluded(points: np.ndarray, light_dir: np.ndarray, mesh: TriangleMesh) -> np.ndarray:
    if len(points) == 0:
        return np.zeros(0, dtype=bool)
    origins = points + 1e-6 * light_dir
    dirs = np.broadcast_to(light_dir, points.shape)
    _, _, hit = _intersect(origins, dirs, mesh)
    return hit


def raytrace(mesh: TriangleMesh, intrinsics: geo.CameraIntrinsics,
             pose: geo.CameraPose, sun_dir: np.ndarray,
             supersample: int = 2):
    """Render one view: (raw radiance image, depth, hit mask).

    ``sun_dir`` is the unit vector pointing from the scene toward the sun.
    Shading per hit: albedo * max(0, n.l) + specular * max(0, r.v)^shininess
    with hard shadows from occlusion rays; the background is exactly zero.
    Radiance is supersampled ``supersample``^2 per pixel; depth and mask come
    from the sub-ray grid as mean-over-hits / any-hit.
    """
    sun_dir = np.asarray(sun_dir, dtype=np.float64)
    if abs(np.linalg.norm(sun_dir) - 1.0) > 1e-9:
        raise ValueError("sun_dir must be a unit vector")
    h, w, ss = intrinsics.height, intrinsics.width, supersample
    jj, ii = np.meshgrid(np.arange(w * ss), np.arange(h * ss), indexing="xy")
    # sub-pixel centers expressed in full-resolution pixel coordinates
    rows = (ii.ravel() + 0.5) / ss - 0.5
    cols = (jj.ravel() + 0.5) / ss - 0.5
    d_cam = intrinsics.pixel_dirs(rows, cols)
    d_obj = d_cam @ pose.rotation.T
    d_obj /= np.linalg.norm(d_obj, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.center, d_obj.shape).copy()

    t, tri, hit = _intersect(origins, d_obj, mesh)
    radiance = np.zeros(len(t))
    if np.any(hit):
        hp = origins[hit] + t[hit, None] * d_obj[hit]
        tv = mesh.tri_vertices[tri[hit]]
        n = np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        view = -d_obj[hit]
        # two-sided shading: flip normals toward the viewer
        flip = np.sign(np.einsum("ij,ij->i", n, view))
        n *= np.where(flip == 0, 1.0, flip)[:, None]
        ndl = np.einsum("ij,j->i", n, sun_dir)
        lit = ndl > 0
        shadowed = _occluded(hp, sun_dir, mesh)
        alb = mesh.albedo[tri[hit]]
        spc = mesh.specular[tri[hit]]
        shn = mesh.shininess[tri[hit]]
        refl = 2.0 * ndl[:, None] * n - sun_dir[None, :]
        rdv = np.clip(np.einsum("ij,ij->i", refl, view), 0.0, None)
        shade = alb * np.clip(ndl, 0.0, None) + spc * np.where(lit, rdv, 0.0) ** shn
        shade = np.where(lit & ~shadowed, shade, 0.0)
        radiance[hit] = shade

    if ss > 1:
        rad_img = radiance.reshape(h, ss, w, ss).mean(axis=(1, 3))
        hit4 = hit.reshape(h, ss, w, ss)
        t4 = np.where(hit, t, 0.0).reshape(h, ss, w, ss)
        counts = hit4.sum(axis=(1, 3))
        depth = np.where(counts > 0, t4.sum(axis=(1, 3)) / np.maximum(counts, 1), 0.0)
        mask = counts > 0
    else:
        rad_img = radiance.reshape(h, w)
        depth = np.where(hit, t, 0.0).reshape(h, w)
        mask = hit.reshape(h, w)
    return rad_img, depth, mask


def sample_surface(mesh: TriangleMesh, n: int, seed: int) -> np.ndarray:
    """Area-weighted uniform surface samples, deterministic per seed."""
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    areas = mesh.areas()
    probs = areas / areas.sum()
    tri = rng.choice(len(areas), size=n, p=probs)
    tv = mesh.tri_vertices[tri]
    u1, u2 = rng.random(n), rng.random(n)
    su = np.sqrt(u1)
    b0, b1, b2 = 1.0 - su, su * (1.0 - u2), su * u2
    return b0[:, None] * tv[:, 0] + b1[:, None] * tv[:, 1] + b2[:, None] * tv[:, 2]


# --- dataset generation -------------------------------------------------------

@dataclass
class GenConfig:
    out_dir: str = "dataset"
    n_views: int = 54
    n_val: int = 6
    size: int = 64
    focal_factor: float = 3.2        # focal_px = focal_factor * size
    camera_distance: float = 4.0
    rotation_axis: tuple = (0.15, 0.97, 0.19)
    turns: float = 1.05              # slightly more than a full rotation
    sun_offset_deg: float = 0.0
    tone_map_m: float = 2.0
    scene_to_meters: float = 15.0
    cloud_points: int = 20000
    supersample: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_views < 10:
            raise ValueError("need at least 10 views")
        if self.n_val >= self.n_views:
            raise ValueError("validation split larger than dataset")


def val_indices(n_views: int, n_val: int) -> list[int]:
    """Evenly spaced hold-out indices that never include the anchor."""
    return [int((i + 0.5) * n_views // n_val) for i in range(n_val)]


def generate_sequence(cfg: GenConfig, sat_params: SatelliteParams | None = None) -> str:
    """Render the rotating-satellite sequence and write the dataset directory."""
    mesh = build_satellite(sat_params)
    axis = np.asarray(cfg.rotation_axis, dtype=np.float64)
    axis /= np.linalg.norm(axis)
    n = cfg.n_views
    size = cfg.size
    intr = geo.CameraIntrinsics(focal_px=cfg.focal_factor * size,
                                cx=(size - 1) / 2.0, cy=(size - 1) / 2.0,
                                width=size, height=size)
    vidx = set(val_indices(n, cfg.n_val))

    os.makedirs(os.path.join(cfg.out_dir, "images"), exist_ok=True)
    sun_world = geo.exp_map(np.radians(cfg.sun_offset_deg) * np.array([1.0, 0, 0])) \
        @ np.array([0.0, 0.0, -1.0])

    entries = []
    angles = cfg.turns * 2.0 * np.pi * np.arange(n) / (n - 1)
    for i in range(n):
        r_cam = geo.exp_map(-angles[i] * axis)   # camera rotation in object frame
        pose = geo.CameraPose.looking_at_origin(r_cam, cfg.camera_distance)
        sun_obj = r_cam @ sun_world
        img, _, _ = raytrace(mesh, intr, pose, sun_obj, supersample=cfg.supersample)
        rel = f"images/{i:04d}.pgm"
        write_pgm16(os.path.join(cfg.out_dir, rel), img / cfg.tone_map_m)
        entries.append({
            "path": rel,
            "time": float(i),
            "split": "val" if i in vidx else "train",
            "rotation_aa": [float(v) for v in geo.log_map(r_cam)],
        })

    manifest = {
        "version": 1,
        "width": size, "height": size,
        "focal_px": intr.focal_px, "cx": intr.cx, "cy": intr.cy,
        "camera_distance": cfg.camera_distance,
        "near": cfg.camera_distance - 1.2, "far": cfg.camera_distance + 1.2,
        "tone_map_m": cfg.tone_map_m,
        "scene_to_meters": cfg.scene_to_meters,
        "rotation_axis": [float(v) for v in axis],
        "sun_offset_deg": cfg.sun_offset_deg,
        "seed": cfg.seed,
        "images": entries,
    }
    with open(os.path.join(cfg.out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)

    cloud = sample_surface(mesh, cfg.cloud_points, cfg.seed)
    plyio.write_ply_points(os.path.join(cfg.out_dir, "gt_cloud.ply"), cloud)
    return cfg.out_dir


# --- dataset loading ----------------------------------------------------------

@dataclass
class DatasetManifest:
    root: str
    width: int
    height: int
    intrinsics: geo.CameraIntrinsics
    camera_distance: float
    near: float
    far: float
    tone_map_m: float
    scene_to_meters: float
    paths: list
    times: np.ndarray
    splits: list
    rotations_aa: np.ndarray | None   # (n, 3) ground-truth camera axis-angles

    @property
    def has_ground_truth(self) -> bool:
        return self.rotations_aa is not None

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.splits) if s == split])

    def gt_rotations(self) -> np.ndarray:
        if self.rotations_aa is None:
            raise ValueError("manifest carries no ground-truth rotations")
        return geo.exp_map(self.rotations_aa)

    def load_image_raw(self, i: int) -> np.ndarray:
        px = read_pgm16(os.path.join(self.root, self.paths[i]))
        return px * self.tone_map_m

    def load_image_tonemapped(self, i: int) -> np.ndarray:
        return tone_map(self.load_image_raw(i), self.tone_map_m)


def load_manifest(root: str) -> DatasetManifest:
    with open(os.path.join(root, "manifest.json")) as fh:
        m = json.load(fh)
    times = np.array([e["time"] for e in m["images"]], dtype=np.float64)
    if np.any(np.diff(times) <= 0):
        raise ValueError("manifest times must be strictly increasing")
    splits = [e["split"] for e in m["images"]]
    if splits[0] != "train":
        raise ValueError("the first (anchor) image must be in the train split")
    intr = geo.CameraIntrinsics(focal_px=m["focal_px"], cx=m["cx"], cy=m["cy"],
                                width=m["width"], height=m["height"])
    has_gt = all("rotation_aa" in e for e in m["images"])
    return DatasetManifest(
        root=root, width=m["width"], height=m["height"], intrinsics=intr,
        camera_distance=m["camera_distance"], near=m["near"], far=m["far"],
        tone_map_m=m["tone_map_m"], scene_to_meters=m["scene_to_meters"],
        paths=[e["path"] for e in m["images"]], times=times, splits=splits,
        rotations_aa=np.array([e["rotation_aa"] for e in m["images"]])
        if has_gt else None)
