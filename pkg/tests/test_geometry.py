import numpy as np
import pytest

from spinrecon import diffcore as dc
from spinrecon import geometry as geo


def test_exp_map_zero_is_identity():
    assert np.allclose(geo.exp_map(np.zeros(3)), np.eye(3))


def test_exp_map_pi_about_z_flips_x():
    r = geo.exp_map(np.array([0.0, 0.0, np.pi]))
    assert np.allclose(r @ np.array([1.0, 0.0, 0.0]), [-1.0, 0.0, 0.0], atol=1e-12)


def test_exp_map_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    for _ in range(10):
        v = dc.Tensor(rng.normal(scale=1.0, size=(1, 3)), requires_grad=True)
        w = rng.normal(size=(1, 9))

        def f():
            r9 = geo.exp_map_tensor(v)
            return dc.tsum(dc.mul(r9, dc.Tensor(w)))

        err = dc.finite_difference_check(f, v, eps=1e-6)
        assert err < 1e-6, err


def test_exp_map_tensor_smooth_and_correct_at_zero():
    v = dc.Tensor(np.zeros((1, 3)), requires_grad=True)
    with dc.Tape():
        r9 = geo.exp_map_tensor(v)
        dc.backward(dc.tsum(dc.mul(r9, dc.Tensor(np.ones((1, 9))))))
    assert np.allclose(r9.data.reshape(3, 3), np.eye(3))
    assert np.all(np.isfinite(v.grad))
    # gradient of sum of entries of exp([w]) at w=0 is the sum of generators
    expect = np.array([[0.0, 0.0, 0.0]])
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        gen = np.zeros((3, 3))
        gen[2, 1], gen[1, 2] = e[0], -e[0]
        gen[0, 2], gen[2, 0] = e[1], -e[1]
        gen[1, 0], gen[0, 1] = e[2], -e[2]
        expect[0, k] = gen.sum()
    assert np.allclose(v.grad, expect, atol=1e-9)


def test_exp_map_tensor_matches_numpy_version():
    rng = np.random.default_rng(2)
    v = rng.normal(size=(6, 3))
    v[0] = 0.0
    v[1] = [1e-10, 0, 0]
    r_np = geo.exp_map(v)
    r_t = geo.exp_map_tensor(dc.Tensor(v)).data.reshape(-1, 3, 3)
    assert np.allclose(r_np, r_t, atol=1e-12)


def test_exp_map_inverse_is_transpose():
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = rng.normal(scale=2.0, size=3)
        assert np.allclose(geo.exp_map(-v), geo.exp_map(v).T, atol=1e-12)


def test_exp_map_angle_recovery():
    rng = np.random.default_rng(1)
    for _ in range(20):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        theta = rng.uniform(0, np.pi)
        d = geo.angular_distance(geo.exp_map(theta * axis), np.eye(3))
        assert np.isclose(d, np.degrees(theta), atol=1e-7)


def test_angular_distance_same_rotation_zero():
    r = geo.exp_map(np.array([0.3, -0.2, 0.9]))
    assert geo.angular_distance(r, r) < 1e-6


def test_angular_distance_30deg_about_z():
    r = geo.exp_map(np.array([0.0, 0.0, np.radians(30.0)]))
    assert np.isclose(geo.angular_distance(np.eye(3), r), 30.0)


def test_angular_distance_symmetric():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = geo.exp_map(rng.normal(size=3))
        b = geo.exp_map(rng.normal(size=3))
        assert np.isclose(geo.angular_distance(a, b), geo.angular_distance(b, a))


def test_log_map_round_trip():
    rng = np.random.default_rng(4)
    for _ in range(50):
        v = rng.normal(size=3)
        v = geo.canonical_axis_angle(v)
        back = geo.log_map(geo.exp_map(v))
        assert np.allclose(back, v, atol=1e-9)
    # near-pi case
    v = np.array([0.0, 0.0, np.pi - 1e-9])
    assert np.allclose(geo.log_map(geo.exp_map(v)), v, atol=1e-6)


def test_canonical_axis_angle_wraps():
    v = np.array([0.0, 0.0, 1.5 * np.pi])
    w = geo.canonical_axis_angle(v)
    assert np.allclose(w, [0.0, 0.0, -0.5 * np.pi])
    assert np.linalg.norm(w) <= np.pi + 1e-12


def _intrinsics():
    return geo.CameraIntrinsics(focal_px=100.0, cx=31.5, cy=31.5, width=64, height=64)


def test_generate_rays_principal_point_along_axis():
    intr = _intrinsics()
    pose = geo.CameraPose.looking_at_origin(np.eye(3), 4.0)
    rays = geo.generate_rays(intr, pose, np.array([[31.5, 31.5]]), 2.0, 6.0)
    assert np.allclose(rays.dirs[0], [0.0, 0.0, 1.0])
    assert np.allclose(rays.origins[0], [0.0, 0.0, -4.0])


def test_generate_rays_symmetric_pixels():
    intr = _intrinsics()
    pose = geo.CameraPose.looking_at_origin(np.eye(3), 4.0)
    rays = geo.generate_rays(intr, pose, np.array([[31.5, 11.5], [31.5, 51.5]]), 2.0, 6.0)
    d0, d1 = rays.dirs
    assert np.isclose(d0[0], -d1[0])
    assert np.isclose(d0[1], d1[1])
    assert np.isclose(d0[2], d1[2])


def test_generate_rays_equivariant_under_rotation():
    intr = _intrinsics()
    rng = np.random.default_rng(6)
    pix = np.stack([rng.uniform(0, 63, size=10), rng.uniform(0, 63, size=10)], axis=1)
    r = geo.exp_map(rng.normal(size=3))
    base = geo.generate_rays(intr, geo.CameraPose.looking_at_origin(np.eye(3), 4.0), pix, 2, 6)
    rot = geo.generate_rays(intr, geo.CameraPose.looking_at_origin(r, 4.0), pix, 2, 6)
    assert np.allclose(rot.dirs, base.dirs @ r.T, atol=1e-12)


def test_generate_rays_unit_norm():
    intr = _intrinsics()
    pose = geo.CameraPose.looking_at_origin(geo.exp_map(np.array([0.1, 0.4, -0.2])), 4.0)
    pix = np.array([[0, 0], [63, 63], [10, 50]], dtype=float)
    rays = geo.generate_rays(intr, pose, pix, 2.0, 6.0)
    assert np.allclose(np.linalg.norm(rays.dirs, axis=1), 1.0, atol=1e-12)


def test_generate_rays_rejects_out_of_bounds():
    intr = _intrinsics()
    pose = geo.CameraPose.looking_at_origin(np.eye(3), 4.0)
    with pytest.raises(ValueError):
        geo.generate_rays(intr, pose, np.array([[0, 64]]), 2.0, 6.0)


def test_ray_box_range():
    o = np.array([[0.0, 0.0, -4.0], [0.0, 2.0, -4.0]])
    d = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
    t0, t1, hit = geo.ray_box_range(o, d, -0.5, 0.5)
    assert hit[0] and not hit[1]
    assert np.isclose(t0[0], 3.5) and np.isclose(t1[0], 4.5)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        geo.CameraIntrinsics(focal_px=-1.0, cx=32, cy=32, width=64, height=64)
    with pytest.raises(ValueError):
        geo.CameraIntrinsics(focal_px=10.0, cx=65, cy=32, width=64, height=64)
