import numpy as np
import pytest
from scipy.interpolate import RegularGridInterpolator

from texsplat.hashfield import (AnnealState, HashField, contract,
                                contract_backward, encode, encode_backward,
                                hash_index)


def dense_field(rng, levels=2, table_size=2 ** 10, feat_dim=2, n_min=4, n_max=8,
                bound=1.0, spread=1.0):
    f = HashField.create(levels=levels, table_size=table_size, feat_dim=feat_dim,
                         n_min=n_min, n_max=n_max, bound=bound, rng=rng)
    f.tables = rng.uniform(-spread, spread, f.tables.shape)
    return f


def grid_oracle(field, level):
    """Independent trilinear interpolator over a dense level's vertex grid."""
    n = int(field.resolutions[level])
    stride = n + 1
    axes = np.linspace(-field.bound, field.bound, stride)
    grid = np.empty((stride, stride, stride, field.feat_dim))
    for i in range(stride):
        for j in range(stride):
            for k in range(stride):
                grid[i, j, k] = field.tables[level][hash_index((i, j, k), level, field)]
    return RegularGridInterpolator((axes, axes, axes), grid, method="linear")


class TestHashIndex:
    def test_zero_vertex(self, rng):
        f = dense_field(rng)
        assert hash_index((0, 0, 0), 0, f) == 0
        hashed = dense_field(rng, n_min=16, n_max=64)
        assert hash_index((0, 0, 0), 0, hashed) == 0

    def test_dense_row_major(self, rng):
        f = dense_field(rng, n_min=4, n_max=8)
        assert hash_index((1, 2, 3), 0, f) == 1 * 25 + 2 * 5 + 3

    def test_hashed_in_range(self, rng):
        f = dense_field(rng, n_min=16, n_max=64)  # 17^3 > 1024 -> hashed
        assert not f.is_dense(0)
        verts = rng.integers(0, 65, size=(500, 3))
        idx = hash_index(verts, 1, f)
        assert idx.min() >= 0 and idx.max() < f.table_size

    def test_dense_condition_uses_vertex_count(self, rng):
        # 9^3 = 729 <= 1024 dense, 17^3 = 4913 > 1024 hashed
        f = dense_field(rng, n_min=8, n_max=16)
        assert f.is_dense(0) and not f.is_dense(1)


class TestEncode:
    def test_vertex_identity(self, rng):
        f = dense_field(rng)
        n = int(f.resolutions[0])
        stride = n + 1
        # vertex (1, 2, 3) of level 0 at world coords
        world = np.array([1, 2, 3]) / n * 2 * f.bound - f.bound
        out = encode(world, f, None)
        row = f.tables[0][hash_index((1, 2, 3), 0, f)]
        assert np.allclose(out[:f.feat_dim], row, atol=1e-12)

    def test_edge_midpoint_average(self, rng):
        f = dense_field(rng, levels=1, n_min=4, n_max=8)
        n = int(f.resolutions[0])
        a = np.array([1, 2, 3])
        b = np.array([1, 2, 4])
        world = (a + b) / 2 / n * 2 * f.bound - f.bound
        out = encode(world, f, None)
        expect = 0.5 * (f.tables[0][hash_index(a, 0, f)]
                        + f.tables[0][hash_index(b, 0, f)])
        assert np.allclose(out, expect, atol=1e-12)

    def test_anneal_mask_zeroes_fine_levels(self, rng):
        f = HashField.create(levels=6, table_size=2 ** 15, feat_dim=4,
                             n_min=16, n_max=28, rng=rng)
        f.tables = rng.uniform(-1, 1, f.tables.shape)
        x = rng.uniform(-0.9, 0.9, size=(20, 3))
        out = encode(x, f, AnnealState(2))
        full = encode(x, f, None)
        assert np.all(out[:, 3 * 4:] == 0.0)
        assert np.allclose(out[:, :3 * 4], full[:, :3 * 4])

    def test_outside_cube_raises(self, rng):
        f = dense_field(rng)
        with pytest.raises(ValueError, match="contract"):
            encode(np.array([1.5, 0.0, 0.0]), f, None)

    def test_matches_grid_oracle(self, rng):
        f = dense_field(rng, levels=2, n_min=4, n_max=8)
        pts = rng.uniform(-1, 1, size=(200, 3))
        out = encode(pts, f, None)
        for lvl in range(2):
            oracle = grid_oracle(f, lvl)
            ref = oracle(pts)
            got = out[:, lvl * f.feat_dim:(lvl + 1) * f.feat_dim]
            assert np.max(np.abs(got - ref)) < 1e-7

    def test_piecewise_linear_along_axis(self, rng):
        f = dense_field(rng, levels=1, n_min=4, n_max=8)
        n = int(f.resolutions[0])
        # segment inside a single cell of level 0, along x
        y, z = 0.123, -0.345
        cell = 1
        x0 = (-f.bound + cell * 2 * f.bound / n) + 0.01
        x1 = (-f.bound + (cell + 1) * 2 * f.bound / n) - 0.01
        p0 = encode(np.array([x0, y, z]), f, None)
        p1 = encode(np.array([x1, y, z]), f, None)
        for lam in (0.25, 0.5, 0.75):
            x = (1 - lam) * x0 + lam * x1
            mid = encode(np.array([x, y, z]), f, None)
            assert np.allclose(mid, (1 - lam) * p0 + lam * p1, atol=1e-12)


class TestEncodeBackward:
    def test_zero_upstream(self, rng):
        f = dense_field(rng)
        tg, xg = encode_backward(rng.uniform(-1, 1, 3), f, None,
                                 np.zeros(f.out_dim))
        assert np.all(tg == 0) and np.all(xg == 0)

    def test_vertex_unit_upstream(self, rng):
        f = dense_field(rng, levels=1, n_min=4, n_max=8)
        n = int(f.resolutions[0])
        world = np.array([2, 1, 3]) / n * 2 - 1.0
        up = np.zeros(f.out_dim)
        up[1] = 1.0
        tg, _ = encode_backward(world, f, None, up)
        row = hash_index((2, 1, 3), 0, f)
        assert tg[0, row, 1] == pytest.approx(1.0)
        tg[0, row, 1] = 0.0
        assert np.all(np.abs(tg) < 1e-12)

    def test_table_entry_perturbation_matches_weight(self, rng):
        f = dense_field(rng, levels=2, n_min=4, n_max=8)
        x = rng.uniform(-0.95, 0.95, 3)
        up = rng.normal(size=f.out_dim)
        tg, _ = encode_backward(x, f, None, up)
        base = encode(x, f, None)
        eps = 1e-3
        touched = np.argwhere(np.abs(tg) > 1e-12)
        touched_rows = {(lvl, row) for lvl, row, _ in touched}
        assert len(touched_rows) <= 8 * f.levels
        for lvl, row, feat in touched[:6]:
            f.tables[lvl, row, feat] += eps
            moved = encode(x, f, None)
            f.tables[lvl, row, feat] -= eps
            weight = tg[lvl, row, feat] / up[lvl * f.feat_dim + feat]
            delta = (moved - base)[lvl * f.feat_dim + feat]
            assert delta == pytest.approx(eps * weight, abs=1e-7)

    def test_x_grad_matches_finite_differences(self, rng):
        f = dense_field(rng, levels=2, n_min=4, n_max=8)
        for _ in range(10):
            x = rng.uniform(-0.9, 0.9, 3)
            up = rng.normal(size=f.out_dim)
            _, xg = encode_backward(x, f, None, up)
            h = 1e-5
            for k in range(3):
                xp = x.copy(); xp[k] += h
                xm = x.copy(); xm[k] -= h
                fd = (encode(xp, f, None) - encode(xm, f, None)) @ up / (2 * h)
                assert xg[k] == pytest.approx(fd, rel=1e-6, abs=1e-8)

    def test_masked_levels_contribute_nothing(self, rng):
        f = dense_field(rng, levels=2, n_min=4, n_max=8)
        x = rng.uniform(-0.9, 0.9, 3)
        up = rng.normal(size=f.out_dim)
        tg, xg = encode_backward(x, f, AnnealState(0), up)
        assert np.all(tg[1] == 0.0)
        tg_full, _ = encode_backward(x, f, None, up)
        assert np.allclose(tg[0], tg_full[0])

    def test_batch_accumulates(self, rng):
        f = dense_field(rng)
        xs = rng.uniform(-0.9, 0.9, (5, 3))
        ups = rng.normal(size=(5, f.out_dim))
        tg_batch, xg_batch = encode_backward(xs, f, None, ups)
        tg_sum = np.zeros_like(f.tables)
        for i in range(5):
            tg_i, xg_i = encode_backward(xs[i], f, None, ups[i])
            tg_sum += tg_i
            assert np.allclose(xg_batch[i], xg_i)
        assert np.allclose(tg_batch, tg_sum)


class TestContract:
    def test_identity_inside(self, rng):
        x = rng.uniform(-0.5, 0.5, size=(100, 3))
        x /= np.maximum(np.linalg.norm(x, axis=1, keepdims=True) / 0.999, 1.0)
        inside = x[np.linalg.norm(x, axis=1) <= 1.0]
        assert np.array_equal(contract(inside), inside)

    def test_axis_example(self):
        assert np.allclose(contract(np.array([2.0, 0, 0])), [1.5, 0, 0])
        assert np.array_equal(contract(np.array([0.5, 0, 0])), [0.5, 0, 0])

    def test_norm_limit(self, rng):
        d = rng.normal(size=(200, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        far = d * rng.uniform(15, 1e6, size=(200, 1))
        norms = np.linalg.norm(contract(far), axis=1)
        assert np.all(norms > 1.9) and np.all(norms < 2.0)

    def test_exact_continuity_on_unit_sphere(self):
        # points with exact unit norm: both branch formulas agree bitwise
        pts = np.array([[1.0, 0, 0], [0, -1.0, 0], [0.6, 0.8, 0.0],
                        [0.0, -0.6, 0.8]])
        out = contract(pts)
        r = np.linalg.norm(pts, axis=1, keepdims=True)
        branch2 = (2.0 - 1.0 / r) * (pts / r)
        assert np.array_equal(out, pts)
        assert np.array_equal(branch2, pts)


class TestContractBackward:
    def test_identity_inside(self, rng):
        x = rng.uniform(-0.4, 0.4, size=(20, 3))
        up = rng.normal(size=(20, 3))
        assert np.array_equal(contract_backward(x, up), up)

    def test_radial_case(self):
        g = contract_backward(np.array([2.0, 0, 0]), np.array([1.0, 0, 0]))
        assert np.allclose(g, [0.25, 0, 0])

    def test_fd_both_sides_of_sphere(self, rng):
        h = 1e-6
        for r0 in (0.997, 1.003, 1.7, 3.0):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            x = r0 * d
            up = rng.normal(size=3)
            g = contract_backward(x, up)
            for k in range(3):
                xp = x.copy(); xp[k] += h
                xm = x.copy(); xm[k] -= h
                fd = (contract(xp) - contract(xm)) @ up / (2 * h)
                assert g[k] == pytest.approx(fd, rel=2e-5, abs=1e-7)


class TestHashFieldCreate:
    def test_resolutions_strictly_increasing(self, rng):
        f = HashField.create(levels=6, table_size=2 ** 15, feat_dim=2,
                             n_min=16, n_max=512, rng=rng)
        assert np.all(np.diff(f.resolutions) > 0)
        assert f.resolutions[0] == 16
        assert f.resolutions[-1] == 512

    def test_out_dim(self, rng):
        f = HashField.create(levels=3, table_size=2 ** 10, feat_dim=4,
                             n_min=4, n_max=16, rng=rng)
        assert f.out_dim == 12
        assert encode(np.zeros(3), f, None).shape == (12,)

    def test_init_range(self, rng):
        f = HashField.create(levels=2, table_size=2 ** 10, feat_dim=2,
                             n_min=4, n_max=8, rng=rng)
        assert np.max(np.abs(f.tables)) <= 1e-4

    def test_rejects_non_power_of_two(self, rng):
        with pytest.raises(ValueError, match="power of two"):
            HashField(levels=1, table_size=1000, feat_dim=2,
                      resolutions=[4], tables=np.zeros((1, 1000, 2)))
