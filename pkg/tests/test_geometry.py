import numpy as np
import pytest

from texsplat.geometry import (Camera, Surfel, SurfelSet, anisotropy_stats,
                               intersect, intersect_pairs, quat_to_rotmat,
                               rotmat_grad_to_quat, splat_to_world)


def make_surfel(p=(0, 0, 0), q=(1, 0, 0, 0), s=(1.0, 1.0), logit=0.0, sh=None):
    return Surfel(position=p, rotation=q, log_scale=np.log(s),
                  opacity_logit=logit, sh=sh)


class TestSplatToWorld:
    def test_identity_case(self):
        H = splat_to_world(make_surfel())
        assert np.allclose(H @ [2, 3, 0, 1], [2, 3, 0, 1])

    def test_scaled_translated(self):
        H = splat_to_world(make_surfel(p=(1, 0, 0), s=(2.0, 1.0)))
        assert np.allclose(H @ [1, 1, 0, 1], [3, 1, 0, 1])

    def test_rotation_about_x(self):
        q = (np.cos(np.pi / 4), np.sin(np.pi / 4), 0, 0)
        H = splat_to_world(make_surfel(q=q))
        assert np.allclose((H @ [0, 1, 0, 1])[:3], [0, 0, 1], atol=1e-12)

    def test_columns_are_scaled_frame(self):
        s = make_surfel(q=(0.5, 0.5, 0.5, 0.5), s=(2.0, 3.0), p=(1, 2, 3))
        H = splat_to_world(s)
        R = s.rotmat()
        assert np.allclose(H[:3, 0], 2.0 * R[:, 0])
        assert np.allclose(H[:3, 1], 3.0 * R[:, 1])
        assert np.allclose(H[:3, 2], R[:, 2])
        assert np.allclose(H[:3, 3], [1, 2, 3])
        assert np.allclose(H[3], [0, 0, 0, 1])


class TestIntersect:
    def test_center_hit(self):
        hit = intersect([0, 0, 5], [0, 0, -1], make_surfel())
        assert hit is not None
        assert hit.u == pytest.approx(0.0, abs=1e-12)
        assert hit.v == pytest.approx(0.0, abs=1e-12)
        assert hit.depth == pytest.approx(5.0)
        assert hit.weight == pytest.approx(1.0)

    def test_offset_hit_weight(self):
        hit = intersect([1, 0, 5], [0, 0, -1], make_surfel())
        assert hit.u == pytest.approx(1.0)
        assert hit.v == pytest.approx(0.0, abs=1e-12)
        assert hit.weight == pytest.approx(np.exp(-0.5))

    def test_parallel_ray_misses(self):
        assert intersect([0, 0, 5], [1, 0, 0], make_surfel()) is None

    def test_cutoff_beyond_three_sigma(self):
        assert intersect([3.1, 0, 5], [0, 0, -1], make_surfel()) is None
        assert intersect([2.9, 0, 5], [0, 0, -1], make_surfel()) is not None

    def test_near_clip(self):
        assert intersect([0, 0, 0.005], [0, 0, -1], make_surfel()) is None

    def test_behind_ray_misses(self):
        assert intersect([0, 0, -5], [0, 0, -1], make_surfel()) is None

    def test_world_point_reconstructs_from_tangent_map(self, rng):
        for _ in range(50):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            s = make_surfel(p=rng.normal(size=3) * 0.5, q=q,
                            s=np.exp(rng.uniform(-1, 0.5, 2)))
            origin = rng.normal(size=3) + np.array([0, 0, 5.0])
            d = s.position - origin + 0.3 * rng.normal(size=3)
            d /= np.linalg.norm(d)
            hit = intersect(origin, d, s)
            if hit is None:
                continue
            H = splat_to_world(s)
            p_u = (H @ np.array([hit.u, hit.v, 0.0, 1.0]))[:3]
            along = origin + hit.depth * d
            assert np.allclose(p_u, hit.world_point, rtol=1e-9, atol=1e-9)
            assert np.allclose(p_u, along, rtol=1e-6, atol=1e-6)

    def test_rigid_invariance(self, rng):
        s = make_surfel(p=(0.1, -0.2, 0.05), q=(0.9, 0.1, 0.3, -0.2),
                        s=(0.8, 1.3))
        origin = np.array([0.4, 0.2, 4.0])
        d = np.array([-0.05, -0.02, -1.0])
        d /= np.linalg.norm(d)
        base = intersect(origin, d, s)
        for _ in range(20):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            R = quat_to_rotmat(q)
            t = rng.normal(size=3)
            # rotate the surfel quaternion by composing quaternions via R
            new_pos = R @ s.position + t
            # compose rotations on the matrix side, then recover any quaternion
            M = R @ s.rotmat()
            new_q = _mat_to_quat(M)
            s2 = Surfel(new_pos, new_q, s.log_scale, s.opacity_logit)
            hit = intersect(R @ origin + t, R @ d, s2)
            assert hit is not None
            assert np.allclose([hit.u, hit.v, hit.depth, hit.weight],
                               [base.u, base.v, base.depth, base.weight],
                               rtol=1e-6, atol=1e-6)

    def test_weight_symmetric_in_uv(self):
        # G depends on u^2 + v^2 only
        a = intersect([0.7, 0.3, 5], [0, 0, -1], make_surfel())
        b = intersect([-0.7, -0.3, 5], [0, 0, -1], make_surfel())
        assert a.weight == pytest.approx(b.weight, rel=1e-12)


def _mat_to_quat(M):
    w = np.sqrt(max(1.0 + M[0, 0] + M[1, 1] + M[2, 2], 0.0)) / 2.0
    if w > 1e-6:
        return np.array([w, (M[2, 1] - M[1, 2]) / (4 * w),
                         (M[0, 2] - M[2, 0]) / (4 * w),
                         (M[1, 0] - M[0, 1]) / (4 * w)])
    # fall back for near-pi rotations
    x = np.sqrt(max(1.0 + M[0, 0] - M[1, 1] - M[2, 2], 0.0)) / 2.0
    return np.array([(M[2, 1] - M[1, 2]) / (4 * x), x,
                     (M[0, 1] + M[1, 0]) / (4 * x),
                     (M[0, 2] + M[2, 0]) / (4 * x)])


class TestQuaternions:
    def test_rotmat_orthonormal(self, rng):
        q = rng.normal(size=(40, 4))
        R = quat_to_rotmat(q)
        eye = np.einsum("nij,nkj->nik", R, R)
        assert np.allclose(eye, np.broadcast_to(np.eye(3), (40, 3, 3)), atol=1e-12)
        assert np.allclose(np.linalg.det(R), 1.0)

    def test_grad_matches_finite_differences(self, rng):
        q = rng.normal(size=4) * 1.3
        dR = rng.normal(size=(3, 3))
        g = rotmat_grad_to_quat(q, dR)
        h = 1e-6
        for k in range(4):
            qp = q.copy(); qp[k] += h
            qm = q.copy(); qm[k] -= h
            fd = np.sum((quat_to_rotmat(qp) - quat_to_rotmat(qm)) * dR) / (2 * h)
            assert g[k] == pytest.approx(fd, rel=1e-5, abs=1e-9)


class TestAnisotropyStats:
    def test_isotropic(self):
        mean_ratio, needles = anisotropy_stats([make_surfel(), make_surfel()])
        assert mean_ratio == 1.0
        assert needles == 0.0

    def test_single_needle(self):
        mean_ratio, needles = anisotropy_stats([make_surfel(s=(10.0, 0.5))])
        assert mean_ratio == pytest.approx(0.05)
        assert needles == 1.0

    def test_mixed_pair(self):
        stats = anisotropy_stats([make_surfel(), make_surfel(s=(1.0, 0.05))])
        assert stats[0] == pytest.approx(0.525)
        assert stats[1] == pytest.approx(0.5)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            anisotropy_stats([])
        with pytest.raises(ValueError):
            anisotropy_stats(SurfelSet(np.zeros((0, 3)), np.zeros((0, 4)),
                                       np.zeros((0, 2)), np.zeros(0)))

    def test_surfelset_matches_list(self, rng):
        surfels = [make_surfel(s=np.exp(rng.uniform(-2, 1, 2))) for _ in range(9)]
        sset = SurfelSet.from_surfels(surfels)
        assert anisotropy_stats(surfels) == pytest.approx(anisotropy_stats(sset))


class TestCamera:
    def make_cam(self):
        c2w = np.eye(4)
        c2w[:3, 3] = [0, 0, 2.0]
        return Camera.from_fov_x(32, 24, np.deg2rad(60), c2w)

    def test_validate_rejects_sheared_rotation(self):
        cam = self.make_cam()
        cam.world_from_camera[0, 1] = 0.2
        with pytest.raises(ValueError, match="non-rigid"):
            cam.validate()

    def test_project_ray_roundtrip(self):
        cam = self.make_cam()
        cam.validate()
        d = cam.ray_dirs[10, 20]
        point = cam.origin + 3.0 * d
        pix, depth = cam.project(point[None])
        assert pix[0, 0] == pytest.approx(20.5, abs=1e-9)
        assert pix[0, 1] == pytest.approx(10.5, abs=1e-9)
        assert depth[0] > 0

    def test_ray_dirs_unit(self):
        cam = self.make_cam()
        norms = np.linalg.norm(cam.ray_dirs, axis=-1)
        assert np.allclose(norms, 1.0, atol=1e-12)


class TestIntersectPairs:
    def test_matches_scalar_path(self, rng):
        surfels = [make_surfel(p=rng.normal(size=3) * 0.3,
                               q=rng.normal(size=4),
                               s=np.exp(rng.uniform(-1.2, 0.2, 2)))
                   for _ in range(30)]
        sset = SurfelSet.from_surfels(surfels)
        origin = np.array([0.0, 0.1, 4.0])
        dirs = rng.normal(size=(30, 3)) * 0.1 + np.array([0, 0, -1.0])
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        out = intersect_pairs(origin, dirs, sset.positions, sset.rotations(),
                              sset.scales())
        for i, s in enumerate(surfels):
            hit = intersect(origin, dirs[i], s)
            if hit is None:
                assert not out["valid"][i]
            else:
                assert out["valid"][i]
                assert out["u"][i] == pytest.approx(hit.u, rel=1e-12)
                assert out["v"][i] == pytest.approx(hit.v, rel=1e-12)
                assert out["t"][i] == pytest.approx(hit.depth, rel=1e-12)
