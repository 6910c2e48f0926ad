import numpy as np
import pytest

from spinrecon import diffcore as dc
from spinrecon import encoders as enc
from spinrecon.diffcore import Tensor


def small_grid():
    return enc.HashGridConfig(levels=4, min_resolution=4, growth=2.0,
                              table_size=2 ** 10, features_per_level=2,
                              always_on_levels=1)


def test_hash_index_zero_cell():
    assert enc.hash_index(np.array([0, 0, 0]), 16, 2 ** 14) == 0
    assert enc.hash_index(np.array([0, 0, 0]), 100, 2 ** 14) == 0


def test_hash_index_unit_x_hashed_level():
    # hashed because 100^3 > 2^14; 1*1 xor 0 xor 0 = 1
    assert enc.hash_index(np.array([1, 0, 0]), 100, 2 ** 14) == 1


def test_hash_index_dense_level_bijection():
    res, t = 16, 2 ** 14
    cells = np.stack(np.meshgrid(*[np.arange(res)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    idx = enc.hash_index(cells, res, t)
    assert idx.min() == 0 and idx.max() == res ** 3 - 1
    assert len(np.unique(idx)) == res ** 3


def test_hash_index_range():
    rng = np.random.default_rng(0)
    cells = rng.integers(0, 181, size=(1000, 3))
    idx = enc.hash_index(cells, 181, 2 ** 14)
    assert idx.min() >= 0 and idx.max() < 2 ** 14


def test_encode_at_corner_returns_corner_feature():
    cfg = small_grid()
    rng = np.random.default_rng(1)
    tables = enc.init_tables(cfg, rng)
    # lattice corner (2,1,3) of level 0 (resolution 4 → scale 3)
    corner = np.array([2, 1, 3])
    x = Tensor((corner / 3.0)[None, :])
    out = enc.hash_encode(x, cfg, tables, np.ones(cfg.levels))
    idx0 = enc.hash_index(np.minimum(corner, 3), 4, cfg.table_size)
    got = out.data[0, :2]
    # corner (.,.,3) has base clipped to 2, frac=1 along z: still exact corner weightings
    expect = tables.data[idx0]
    assert np.allclose(got, expect, atol=1e-15)


def test_encode_position_gradient_matches_fd():
    cfg = small_grid()
    rng = np.random.default_rng(2)
    tables = enc.init_tables(cfg, rng)
    tables.data *= 1e3  # larger features so gradients are not lost in the rel-error floor
    w = np.ones(cfg.levels)
    proj = rng.normal(size=(3, cfg.out_dim))
    x = Tensor(rng.uniform(0.2, 0.8, size=(3, 3)), requires_grad=True)

    def f():
        feats = enc.hash_encode(x, cfg, tables, w)
        return dc.tsum(dc.mul(feats, Tensor(proj)))

    err = dc.finite_difference_check(f, x, eps=1e-6)
    assert err < 1e-4, err


def test_encode_table_gradient_matches_fd():
    cfg = small_grid()
    rng = np.random.default_rng(3)
    tables = enc.init_tables(cfg, rng)
    tables.requires_grad = True
    w = np.ones(cfg.levels)
    x = Tensor(rng.uniform(0.1, 0.9, size=(5, 3)))
    proj = rng.normal(size=(5, cfg.out_dim))

    def f():
        feats = enc.hash_encode(x, cfg, tables, w)
        return dc.tsum(dc.mul(feats, Tensor(proj)))

    # probe a handful of entries that actually receive weight
    with dc.Tape():
        loss = f()
        dc.backward(loss)
    hot = np.argwhere(np.abs(tables.grad) > 1e-6)
    take = [int(i * tables.data.shape[1] + j) for i, j in hot[:10]]
    err = dc.finite_difference_check(f, tables, eps=1e-6, indices=take)
    assert err < 1e-6, err


def test_masked_level_gets_zero_table_gradient():
    cfg = small_grid()
    rng = np.random.default_rng(4)
    tables = enc.init_tables(cfg, rng)
    tables.requires_grad = True
    w = np.ones(cfg.levels)
    w[2] = 0.0
    x = Tensor(rng.uniform(0, 1, size=(20, 3)))
    with dc.Tape():
        feats = enc.hash_encode(x, cfg, tables, w)
        dc.backward(dc.tsum(dc.mul(feats, feats)))
    t = cfg.table_size
    level2 = tables.grad[2 * t:3 * t]
    assert np.all(level2 == 0.0)
    assert np.any(tables.grad[:t] != 0.0)


def test_masking_does_not_change_forward_values():
    cfg = small_grid()
    rng = np.random.default_rng(5)
    tables = enc.init_tables(cfg, rng)
    x = Tensor(rng.uniform(0, 1, size=(7, 3)))
    full = enc.hash_encode(x, cfg, tables, np.ones(cfg.levels)).data
    masked = enc.hash_encode(x, cfg, tables, np.array([1.0, 0.5, 0.0, 0.0])).data
    assert np.array_equal(full, masked)


def test_partial_weight_scales_gradient():
    cfg = small_grid()
    rng = np.random.default_rng(6)
    tables = enc.init_tables(cfg, rng)
    tables.requires_grad = True
    x = Tensor(rng.uniform(0, 1, size=(9, 3)))
    proj = Tensor(rng.normal(size=(9, cfg.out_dim)))

    def grad_for(w ):
        tables.zero_grad()
        with dc.Tape():
            feats = enc.hash_encode(x, cfg, tables, w)
            dc.backward(dc.tsum(dc.mul(feats, proj)))
        return tables.grad.copy()

    g_full = grad_for(np.ones(cfg.levels))
    w = np.ones(cfg.levels)
    w[3] = 0.25
    g_part = grad_for(w)
    t = cfg.table_size
    assert np.allclose(g_part[3 * t:], 0.25 * g_full[3 * t:], atol=1e-15)
    assert np.allclose(g_part[:3 * t], g_full[:3 * t], atol=1e-15)


def test_encode_continuity():
    cfg = small_grid()
    rng = np.random.default_rng(7)
    tables = enc.init_tables(cfg, rng)
    w = np.ones(cfg.levels)
    x0 = rng.uniform(0.1, 0.9, size=(10, 3))
    a = enc.hash_encode(Tensor(x0), cfg, tables, w).data
    b = enc.hash_encode(Tensor(x0 + 1e-9), cfg, tables, w).data
    assert np.abs(a - b).max() < 1e-6


def test_encode_clamps_with_warning():
    cfg = small_grid()
    tables = enc.init_tables(cfg, np.random.default_rng(8))
    with pytest.warns(RuntimeWarning):
        out = enc.hash_encode(Tensor(np.array([[1.5, -0.2, 0.5]])), cfg, tables,
                              np.ones(cfg.levels))
    clamped = enc.hash_encode(Tensor(np.array([[1.0, 0.0, 0.5]])), cfg, tables,
                              np.ones(cfg.levels))
    assert np.allclose(out.data, clamped.data)


def test_encode_rejects_nonfinite():
    cfg = small_grid()
    tables = enc.init_tables(cfg, np.random.default_rng(9))
    with pytest.raises(ValueError):
        enc.hash_encode(Tensor(np.array([[np.nan, 0.0, 0.0]])), cfg, tables,
                        np.ones(cfg.levels))


def test_near_zero_tables_give_near_zero_features():
    cfg = small_grid()
    tables = enc.init_tables(cfg, np.random.default_rng(10))
    x = Tensor(np.random.default_rng(11).uniform(0, 1, size=(50, 3)))
    out = enc.hash_encode(x, cfg, tables, np.ones(cfg.levels))
    assert np.abs(out.data).max() <= 1e-4


# --- schedule

def test_schedule_all_on_after_total():
    grid = enc.HashGridConfig()
    sched = enc.ScheduleConfig(total_schedule_steps=1000)
    assert np.all(enc.schedule_weights(1000, sched, grid) == 1.0)
    assert np.all(enc.schedule_weights(5000, sched, grid) == 1.0)


def test_schedule_step_zero_only_always_on():
    grid = enc.HashGridConfig(always_on_levels=2)
    sched = enc.ScheduleConfig(total_schedule_steps=1000)
    w = enc.schedule_weights(0, sched, grid)
    assert np.all(w[:2] == 1.0)
    assert np.all(w[2:] == 0.0)


def test_schedule_cosine_midpoint():
    grid = enc.HashGridConfig(levels=8, always_on_levels=2)
    sched = enc.ScheduleConfig(total_schedule_steps=8000)
    # alpha = 8 * step/8000 = step/1000; level 4 midpoint at alpha = 4.5
    w = enc.schedule_weights(4500, sched, grid)
    assert np.isclose(w[4], 0.5)


def test_schedule_monotone_per_level():
    grid = enc.HashGridConfig()
    sched = enc.ScheduleConfig(total_schedule_steps=777)
    prev = enc.schedule_weights(0, sched, grid)
    for step in range(0, 1000, 13):
        cur = enc.schedule_weights(step, sched, grid)
        assert np.all(cur >= prev - 1e-12)
        prev = cur


# --- spherical harmonics

def test_sh_degree0_constant():
    d = np.array([[0.3, -0.5, np.sqrt(1 - 0.34)]])
    out = enc.sh_encode(d, degree=4)
    assert np.isclose(out[0, 0], 0.2820948, atol=1e-7)


def test_sh_z_axis_nonzero_only_for_m0():
    out = enc.sh_encode(np.array([[0.0, 0.0, 1.0]]), degree=4)[0]
    # orthonormal basis ordering: m==0 components at l(l+1) positions 0,2,6,12
    m0 = {0, 2, 6, 12}
    for i, v in enumerate(out):
        if i in m0:
            assert abs(v) > 1e-3
        else:
            assert abs(v) < 1e-12


def test_sh_monte_carlo_orthogonality_l1():
    rng = np.random.default_rng(12)
    v = rng.normal(size=(1000, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    basis = enc.sh_encode(v, degree=2)[:, 1:4]
    gram = basis.T @ basis / v.shape[0]
    target = np.eye(3) / (4.0 * np.pi)
    assert np.abs(np.diagonal(gram) - 1 / (4 * np.pi)).max() < 0.05 / (4 * np.pi)
    off = gram - np.diag(np.diagonal(gram))
    assert np.abs(off).max() < 0.05 / (4 * np.pi)


def test_sh_rejects_non_unit():
    with pytest.raises(ValueError):
        enc.sh_encode(np.array([[1.0, 1.0, 0.0]]))


def test_sh_gradient_matches_fd():
    rng = np.random.default_rng(13)
    d = rng.normal(size=(4, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    proj = rng.normal(size=(4, 16))
    comps = [dc.Tensor(d[:, i:i + 1], requires_grad=True) for i in range(3)]

    def f():
        out = enc.sh_encode_tensor(*comps, degree=4)
        return dc.tsum(dc.mul(out, dc.Tensor(proj)))

    for c in comps:
        assert dc.finite_difference_check(f, c, eps=1e-6) < 1e-6


def test_grid_config_rejects_non_increasing_resolutions():
    with pytest.raises(ValueError):
        enc.HashGridConfig(levels=4, min_resolution=4, growth=1.01)
    with pytest.raises(ValueError):
        enc.HashGridConfig(table_size=1000)  # not a power of two


def test_trilinear_kernel_matches_numpy_reference():
    cfg = small_grid()
    rng = np.random.default_rng(20)
    tables = enc.init_tables(cfg, rng)
    tables.data[:] = rng.normal(size=tables.data.shape)
    x = Tensor(rng.uniform(0, 1, size=(64, 3)))
    xc = dc.clip(x, 0.0, 1.0)
    for level in range(cfg.levels):
        fast = enc._trilinear_level(xc, tables, level, cfg).data
        ref = enc._trilinear_level_reference(xc, tables, level, cfg)
        assert np.allclose(fast, ref, atol=1e-14), level
