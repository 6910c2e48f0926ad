import json

import numpy as np
import pytest

from spinrecon import geometry as geo
from spinrecon import plyio
from spinrecon import synthdata as sd


def test_satellite_triangle_count_and_bounds():
    mesh = sd.build_satellite()
    assert 100 <= len(mesh.triangles) <= 5000
    lo, hi = mesh.bounding_box()
    assert lo.min() >= -0.5 and hi.max() <= 0.5


def test_satellite_rejects_degenerate_dims():
    with pytest.raises(ValueError):
        sd.build_satellite(sd.SatelliteParams(bus_size=(0.0, 0.1, 0.1)))


def _panel_vertices(params=None):
    p = params or sd.SatelliteParams()
    mesh = sd.build_satellite(p)
    per_box = 6 * 9  # six faces, 3x3 vertex grid each
    start = per_box
    return mesh, mesh.vertices[start:start + 2 * per_box]


def test_panel_pseudo_symmetry():
    mesh, pv = _panel_vertices()
    for axis in ([1.0, 0, 0], [0, 0, 1.0]):   # panel axis and the orthogonal spin axis
        r = geo.exp_map(np.pi * np.asarray(axis))
        rotated = pv @ r.T
        d2 = ((rotated[:, None, :] - pv[None, :, :]) ** 2).sum(-1)
        assert np.sqrt(d2.min(axis=1)).max() < 1e-9


def test_whole_body_not_symmetric():
    mesh = sd.build_satellite()
    r = geo.exp_map(np.array([0, 0, np.pi]))
    rotated = mesh.vertices @ r.T
    d2 = ((rotated[:, None, :] - mesh.vertices[None, :, :]) ** 2).sum(-1)
    assert np.sqrt(d2.min(axis=1)).max() > 0.01  # the dish offset breaks symmetry


def _plate_mesh(albedo=0.8, specular=0.0):
    v = np.array([[-1, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0]], dtype=np.float64)
    t = np.array([[0, 2, 1], [0, 3, 2]])
    n = len(t)
    return sd.TriangleMesh(v, t, np.full(n, albedo), np.full(n, specular),
                           np.full(n, 10.0))


def test_raytrace_lambertian_plate_head_on():
    # camera with an exact-center principal pixel so the axial ray exists
    mesh = _plate_mesh(albedo=0.8)
    intr = geo.CameraIntrinsics(focal_px=64.0, cx=16.0, cy=16.0, width=33, height=33)
    pose = geo.CameraPose.looking_at_origin(np.eye(3), 4.0)
    img, depth, mask = sd.raytrace(mesh, intr, pose, np.array([0.0, 0.0, -1.0]),
                                   supersample=1)
    assert mask[16, 16]
    assert np.isclose(img[16, 16], 0.8, atol=1e-12)   # n.l = 1 head on
    assert abs(depth[16, 16] - 4.0) < 1e-6


def test_raytrace_background_exactly_zero():
    mesh = sd.build_satellite()
    intr = geo.CameraIntrinsics(focal_px=48.0, cx=15.5, cy=15.5, width=32, height=32)
    pose = geo.CameraPose.looking_at_origin(np.eye(3), 4.0)
    img, depth, mask = sd.raytrace(mesh, intr, pose, np.array([0.0, 0.0, -1.0]))
    assert np.all(img[~mask] == 0.0)
    assert np.all(depth[0, :] == 0.0)  # top rows miss the object at this fov
    assert img.min() >= 0.0


def test_raytrace_rejects_non_unit_sun():
    mesh = _plate_mesh()
    intr = geo.CameraIntrinsics(focal_px=16.0, cx=7.5, cy=7.5, width=16, height=16)
    pose = geo.CameraPose.looking_at_origin(np.eye(3), 4.0)
    with pytest.raises(ValueError):
        sd.raytrace(mesh, intr, pose, np.array([0.0, 0.0, -2.0]))


def test_specular_highlight_moves_with_viewpoint():
    mesh = sd.build_satellite()
    intr = geo.CameraIntrinsics(focal_px=128.0, cx=31.5, cy=31.5, width=64, height=64)
    argmaxes = []
    for ang in (0.12, 0.3):
        r = geo.exp_map(ang * np.array([0.0, 1.0, 0.0]))
        pose = geo.CameraPose.looking_at_origin(r, 4.0)
        sun = r @ np.array([0.0, 0.0, -1.0])
        img, _, _ = sd.raytrace(mesh, intr, pose, sun, supersample=1)
        argmaxes.append(np.unravel_index(np.argmax(img), img.shape))
    assert argmaxes[0] != argmaxes[1]


def test_sample_surface_on_planes_and_proportional():
    mesh = sd.build_satellite()
    pts = sd.sample_surface(mesh, 5000, seed=3)
    assert np.array_equal(pts, sd.sample_surface(mesh, 5000, seed=3))
    # every point lies on some triangle's plane
    tv = mesh.tri_vertices
    n = np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    d = np.einsum("tj,tj->t", n, tv[:, 0])
    dist = np.abs(pts @ n.T - d[None, :]).min(axis=1)
    assert dist.max() < 1e-9


def test_sample_surface_area_weighted():
    # two triangles with 4:1 area ratio
    v = np.array([[0, 0, 0], [2, 0, 0], [0, 2, 0], [5, 0, 0], [6, 0, 0], [5, 1, 0]],
                 dtype=np.float64)
    t = np.array([[0, 1, 2], [3, 4, 5]])
    mesh = sd.TriangleMesh(v, t, np.ones(2), np.zeros(2), np.ones(2))
    pts = sd.sample_surface(mesh, 4000, seed=1)
    frac_big = (pts[:, 0] < 4).mean()
    p = 2.0 / 2.5
    sigma = np.sqrt(p * (1 - p) / 4000)
    assert abs(frac_big - p) < 3 * sigma


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds") / "tiny"
    cfg = sd.GenConfig(out_dir=str(out), n_views=12, n_val=2, size=24,
                       supersample=1, seed=5)
    sd.generate_sequence(cfg)
    return out, cfg


def test_generate_sequence_layout(tiny_dataset):
    out, cfg = tiny_dataset
    man = sd.load_manifest(str(out))
    assert len(man.paths) == 12
    assert (out / "gt_cloud.ply").exists()
    assert man.splits[0] == "train"
    assert len(man.indices("val")) == 2
    img = man.load_image_tonemapped(0)
    assert img.shape == (24, 24)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_generate_sequence_val_evenly_spaced():
    idx = sd.val_indices(54, 6)
    assert idx == [4, 13, 22, 31, 40, 49]
    gaps = np.diff(idx)
    assert len(set(gaps.tolist())) == 1


def test_generate_sequence_uniform_rotation(tiny_dataset):
    out, _ = tiny_dataset
    man = sd.load_manifest(str(out))
    rots = man.gt_rotations()
    steps = [geo.angular_distance(rots[i], rots[i + 1]) for i in range(len(rots) - 1)]
    assert np.ptp(steps) < 1e-9


def test_generate_sequence_wraps_past_full_turn(tiny_dataset):
    out, _ = tiny_dataset
    man = sd.load_manifest(str(out))
    first = man.load_image_tonemapped(0)
    last = man.load_image_tonemapped(len(man.paths) - 1)
    assert np.abs(first - last).mean() < 0.05 * first.max()


def test_generate_sequence_deterministic(tmp_path):
    cfg_a = sd.GenConfig(out_dir=str(tmp_path / "a"), n_views=10, n_val=2, size=16,
                         supersample=1, seed=9)
    cfg_b = sd.GenConfig(out_dir=str(tmp_path / "b"), n_views=10, n_val=2, size=16,
                         supersample=1, seed=9)
    sd.generate_sequence(cfg_a)
    sd.generate_sequence(cfg_b)
    for rel in ["manifest.json", "gt_cloud.ply", "images/0003.pgm"]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_gen_config_validation():
    with pytest.raises(ValueError):
        sd.GenConfig(n_views=3)
    with pytest.raises(ValueError):
        sd.GenConfig(n_views=12, n_val=12)


def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(50, 3))
    err = rng.random(50)
    p = tmp_path / "c.ply"
    plyio.write_ply_points(p, pts, err)
    back, back_err = plyio.read_ply_points(p)
    assert np.allclose(back, pts, atol=1e-15)
    assert np.allclose(back_err, err, atol=1e-15)


def test_oracle_independence_no_rendering_imports():
    # the ray tracer must not touch volumetric-rendering code paths; only the
    # shared data-format utilities (tone curve, PGM I/O) may cross the module
    # boundary
    import ast
    import inspect

    tree = ast.parse(inspect.getsource(sd))
    renderer_imports = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom) and node.module and \
                node.module.endswith("renderer"):
            renderer_imports |= {a.name for a in node.names}
    assert renderer_imports <= {"tone_map", "write_pgm16", "read_pgm16"}
    # and none of those appear inside the tracing functions themselves
    for fn in (sd.raytrace, sd._intersect, sd._occluded):
        src = inspect.getsource(fn)
        for name in renderer_imports:
            assert name not in src
