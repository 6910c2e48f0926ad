"""Point-cloud and mesh extraction from a trained field, plus all
quantitative evaluation: precision/recall in meters, statistical outlier
removal, PSNR and angular pose error.

Precision is the mean distance from each predicted point to its nearest
reference point; recall swaps the roles.  Nearest neighbors use a KD-tree
(exact); brute-force twins exist for verification.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from . import geometry as geo
from . import pose as pose_mod
from . import renderer as ren
from ._mc_tables import EDGE_TABLE, TRI_TABLE
from .synthdata import TriangleMesh


def depth_to_cloud(depths: list, accs: list, poses: list, intrinsics,
                   acc_threshold: float = 0.5) -> np.ndarray:
    """Back-project per-view depth maps into one object-frame point cloud.

    Pixels with accumulation at or below the threshold are dropped.
    """
    pts = []
    h, w = intrinsics.height, intrinsics.width
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pix = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)
    for depth, acc, pose in zip(depths, accs, poses):
        mask = acc.ravel() > acc_threshold
        if not np.any(mask):
            continue
        rays = geo.generate_rays(intrinsics, pose, pix[mask], 1.0, 10.0)
        pts.append(rays.origins + depth.ravel()[mask, None] * rays.dirs)
    if not pts:
        return np.zeros((0, 3))
    return np.concatenate(pts, axis=0)


def outlier_removal(cloud: np.ndarray, k: int = 16,
                    std_factor: float = 2.0) -> np.ndarray:
    """Single-pass statistical outlier removal.

    Each point's mean distance to its k nearest neighbors is compared to the
    cloud-wide mean + std_factor * std of those values.
    """
    if len(cloud) <= k:
        import warnings
        warnings.warn("cloud too small for outlier removal; returning unchanged",
                      RuntimeWarning)
        return cloud
    tree = cKDTree(cloud)
    dist, _ = tree.query(cloud, k=k + 1)   # first neighbor is the point itself
    mean_knn = dist[:, 1:].mean(axis=1)
    # relative epsilon keeps exactly-uniform clouds intact (float-noise ties)
    cutoff = mean_knn.mean() * (1.0 + 1e-9) + std_factor * mean_knn.std()
    return cloud[mean_knn <= cutoff]


def precision(pred: np.ndarray, ref: np.ndarray, scale: float = 1.0) -> float:
    """Mean nearest-neighbor distance from prediction to reference,
    multiplied by ``scale`` (pass the manifest's scene-to-meters factor to
    get meters)."""
    if len(pred) == 0 or len(ref) == 0:
        raise ValueError("precision requires non-empty clouds")
    d, _ = cKDTree(ref).query(pred)
    return float(d.mean() * scale)


def recall(pred: np.ndarray, ref: np.ndarray, scale: float = 1.0) -> float:
    """precision with the roles of the clouds swapped."""
    return precision(ref, pred, scale)


def precision_bruteforce(pred: np.ndarray, ref: np.ndarray, scale: float = 1.0) -> float:
    d2 = ((pred[:, None, :] - ref[None, :, :]) ** 2).sum(-1)
    return float(np.sqrt(d2.min(axis=1)).mean() * scale)


def nearest_distances(pred: np.ndarray, ref: np.ndarray) -> np.ndarray:
    d, _ = cKDTree(ref).query(pred)
    return d


def psnr(pred: np.ndarray, ref: np.ndarray) -> float:
    """10 log10(1/MSE) for images in [0, 1]; identical images report inf."""
    pred, ref = np.asarray(pred), np.asarray(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    mse = float(((pred - ref) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


# --- marching cubes ----------------------------------------------------------

_CORNER_OFFSETS = np.array([
    [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
], dtype=np.int64)

_EDGE_CORNERS = np.array([
    [0, 1], [1, 2], [2, 3], [3, 0],
    [4, 5], [5, 6], [6, 7], [7, 4],
    [0, 4], [1, 5], [2, 6], [3, 7],
], dtype=np.int64)


def marching_cubes(density_fn, resolution: int, threshold: float,
                   lo: float = -0.5, hi: float = 0.5,
                   chunk: int = 131072) -> TriangleMesh:
    """Extract the density isosurface on a regular grid over [lo, hi]^3.

    ``density_fn`` maps (n, 3) positions to (n,) densities.  Classic 256-case
    tables; vertices are linearly interpolated at the threshold crossing.
    Degenerate (zero-area) triangles are dropped; an empty isosurface yields
    an empty mesh with a warning.
    """
    if resolution < 16:
        raise ValueError("grid resolution must be at least 16")
    lin = np.linspace(lo, hi, resolution)
    values = np.empty((resolution,) * 3)
    gx, gy, gz = np.meshgrid(lin, lin, lin, indexing="ij")
    flat = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    for s in range(0, len(flat), chunk):
        values.reshape(-1)[s:s + chunk] = density_fn(flat[s:s + chunk])

    n = resolution - 1
    corner_vals = np.empty((8, n, n, n))
    for c, (dx, dy, dz) in enumerate(_CORNER_OFFSETS):
        corner_vals[c] = values[dx:dx + n, dy:dy + n, dz:dz + n]
    index = np.zeros((n, n, n), dtype=np.uint16)
    for c in range(8):
        index |= (corner_vals[c] > threshold).astype(np.uint16) << c

    cell_ijk = np.stack(np.meshgrid(*[np.arange(n)] * 3, indexing="ij"),
                        axis=-1).reshape(-1, 3)
    index_flat = index.reshape(-1)
    corner_flat = corner_vals.reshape(8, -1)
    step = (hi - lo) / (resolution - 1)

    tris = []
    for case in np.unique(index_flat):
        table = TRI_TABLE[case]
        if not table:
            continue
        cells = np.nonzero(index_flat == case)[0]
        base = lo + cell_ijk[cells] * step   # (m, 3)
        everts = {}
        for e in set(table):
            a, b = _EDGE_CORNERS[e]
            va = corner_flat[a, cells]
            vb = corner_flat[b, cells]
            t = np.clip((threshold - va) / np.where(vb - va == 0, 1e-300, vb - va),
                        0.0, 1.0)
            pa = base + _CORNER_OFFSETS[a] * step
            pb = base + _CORNER_OFFSETS[b] * step
            everts[e] = pa + t[:, None] * (pb - pa)
        for i in range(0, len(table), 3):
            tris.append(np.stack([everts[table[i]], everts[table[i + 1]],
                                  everts[table[i + 2]]], axis=1))

    if not tris:
        import warnings
        warnings.warn("empty isosurface", RuntimeWarning)
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64),
                            np.zeros(0), np.zeros(0), np.zeros(0))

    soup = np.concatenate(tris, axis=0)      # (t, 3, 3)
    # drop degenerate faces
    area = 0.5 * np.linalg.norm(np.cross(soup[:, 1] - soup[:, 0],
                                         soup[:, 2] - soup[:, 0]), axis=1)
    soup = soup[area > 1e-12]
    # merge coincident vertices
    flat_v = soup.reshape(-1, 3)
    keys = np.round(flat_v / (step * 1e-6)).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    verts = np.zeros((len(uniq), 3))
    verts[inverse] = flat_v
    faces = inverse.reshape(-1, 3)
    nt = len(faces)
    return TriangleMesh(verts, faces, np.full(nt, 0.5), np.zeros(nt),
                        np.ones(nt))


def density_grid_fn(params, level_weights: np.ndarray):
    """Bind the trained field into a plain (n,3)->density callable."""
    from . import field as field_mod
    from .diffcore import Tensor
    from .encoders import hash_encode

    def fn(positions: np.ndarray) -> np.ndarray:
        x = Tensor(np.asarray(positions, dtype=params.tables.dtype))
        feats = hash_encode(x + 0.5, params.cfg.grid, params.tables, level_weights)
        sigma, _ = field_mod.density_geometry(params, feats)
        return sigma.data[:, 0].astype(np.float64)

    return fn


def default_density_threshold(manifest, render_cfg: ren.RenderConfig) -> float:
    """Density whose alpha reaches 0.5 at the mean sample spacing."""
    spacing = (manifest.far - manifest.near) / (render_cfg.n_coarse + render_cfg.n_fine)
    return float(np.log(2.0) / spacing)


# --- pose error ----------------------------------------------------------------

def pose_error_report(est_rotations: np.ndarray, gt_rotations: np.ndarray) -> dict:
    """Per-image angular error (degrees) relative to the anchor frame.

    Both sets are re-expressed relative to their own image 0, so a common
    rotation applied to either set leaves the report unchanged.
    """
    if len(est_rotations) != len(gt_rotations):
        raise ValueError("pose sets differ in length")
    errs = []
    for i in range(len(gt_rotations)):
        rel_e = est_rotations[i] @ est_rotations[0].T
        rel_g = gt_rotations[i] @ gt_rotations[0].T
        errs.append(geo.angular_distance(rel_e, rel_g))
    errs = np.array(errs)
    return {"median_deg": float(np.median(errs)),
            "max_deg": float(errs.max()),
            "per_image_deg": [float(e) for e in errs]}


# --- run-level evaluation -------------------------------------------------------

def nearest_train_appearance(manifest, time: float) -> int:
    """Local (train-order) index of the training image closest in time."""
    train_idx = manifest.indices("train")
    return int(np.argmin(np.abs(manifest.times[train_idx] - time)))


def val_pose(model: pose_mod.PoseModel, manifest, dataset_index: int) -> geo.CameraPose:
    """Camera pose used for rendering a held-out view."""
    if model.mode == pose_mod.MODE_GLOBAL:
        return model.pose_at_time(manifest.times[dataset_index]
                                  - manifest.times[0])
    r = manifest.gt_rotations()[dataset_index]
    return geo.CameraPose.looking_at_origin(r, manifest.camera_distance)


def validation_psnr(params, model, manifest, render_cfg: ren.RenderConfig,
                    seed: int = 0) -> list:
    """PSNR of rendered vs reference for every validation image."""
    level_w = np.ones(params.cfg.grid.levels)
    out = []
    for i in manifest.indices("val"):
        rng = np.random.default_rng(seed)
        pose_i = val_pose(model, manifest, int(i))
        app = nearest_train_appearance(manifest, manifest.times[i])
        maps = ren.render_full_image(params, level_w, render_cfg,
                                     manifest.intrinsics, pose_i,
                                     manifest.near, manifest.far, app, rng)
        ref = manifest.load_image_tonemapped(int(i))
        out.append(psnr(maps["radiance"], ref))
    return out


def export_point_cloud(params, model, manifest, render_cfg: ren.RenderConfig,
                       acc_threshold: float = 0.5, seed: int = 0,
                       outlier_k: int = 16, outlier_std: float = 2.0) -> np.ndarray:
    """Depth-map cloud over every training pose, outliers removed."""
    level_w = np.ones(params.cfg.grid.levels)
    depths, accs, poses = [], [], []
    for local in range(model.n):
        rng = np.random.default_rng(seed)
        pose_i = model.camera_pose(local)
        app = local
        maps = ren.render_full_image(params, level_w, render_cfg,
                                     manifest.intrinsics, pose_i,
                                     manifest.near, manifest.far, app, rng)
        depths.append(maps["depth"])
        accs.append(maps["acc"])
        poses.append(pose_i)
    cloud = depth_to_cloud(depths, accs, poses, manifest.intrinsics, acc_threshold)
    return outlier_removal(cloud, k=outlier_k, std_factor=outlier_std)


def evaluate_run(params, model, manifest, render_cfg: ren.RenderConfig,
                 gt_cloud: np.ndarray, seed: int = 0) -> tuple[dict, np.ndarray]:
    """Full metric report plus the filtered predicted cloud."""
    cloud = export_point_cloud(params, model, manifest, render_cfg, seed=seed)
    scale_mm = manifest.scene_to_meters * 1000.0
    if len(cloud) == 0:
        import warnings
        warnings.warn("empty predicted cloud; geometry metrics unavailable",
                      RuntimeWarning)
        geom = {"precision_mm": None, "recall_mm": None}
    else:
        geom = {"precision_mm": precision(cloud, gt_cloud, scale_mm),
                "recall_mm": recall(cloud, gt_cloud, scale_mm)}
    report = dict(geom)
    report["psnr_per_view"] = validation_psnr(params, model, manifest, render_cfg,
                                              seed=seed)
    if manifest.has_ground_truth:
        train_idx = manifest.indices("train")
        gt = manifest.gt_rotations()[train_idx]
        pe = pose_error_report(model.estimated_rotations(), gt)
        report["pose_median_deg"] = pe["median_deg"]
        report["pose_max_deg"] = pe["max_deg"]
    else:
        report["pose_median_deg"] = None
        report["pose_max_deg"] = None
    return report, cloud
