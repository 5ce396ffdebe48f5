import numpy as np
import pytest

from camocap.camgeom import Intrinsics, quat_from_axis_angle, quat_to_matrix
from camocap.errors import NotEnoughCorrespondences, ZeroDenominator
from camocap.keystore import CorrespondenceSet
from camocap.pairwise import (
    RansacConfig,
    decompose_essential,
    essential_from_rt,
    estimate_relative_pose,
    sampson_distance,
    sampson_distances,
)

from conftest import relative_pose, ring_cameras, synthetic_pair_correspondences


def rig():
    return ring_cameras(6, radius=3.0, target=(0, 0, 1.0), height=1.6,
                        focal=1800.0, width=3840, height_px=2160)


def rot_angle_deg(ra, rb):
    c = (np.trace(ra.T @ rb) - 1) / 2
    return np.rad2deg(np.arccos(np.clip(c, -1, 1)))


class TestSampson:
    def test_exact_correspondence_is_zero(self, rng):
        rot = quat_to_matrix(quat_from_axis_angle([0, 1, 0], np.deg2rad(25)))
        t = np.array([1.0, 0.2, 0.0])
        e = essential_from_rt(rot, t)
        pts = rng.uniform([-1, -1, 3], [1, 1, 6], size=(50, 3))
        xi = pts[:, :2] / pts[:, 2:3]
        pts_j = pts @ rot.T + t
        xj = pts_j[:, :2] / pts_j[:, 2:3]
        d = sampson_distances(e, xi, xj)
        assert np.all(d < 1e-12)

    def test_matches_first_order_geometric_distance(self):
        # oracle: smallest squared correction of both points that restores
        # the epipolar constraint, found by an independent constrained solve
        from scipy.optimize import minimize

        rot = quat_to_matrix(quat_from_axis_angle([0, 1, 0], np.deg2rad(25)))
        t = np.array([1.0, 0.0, 0.0])
        e = essential_from_rt(rot, t)
        point = np.array([0.2, -0.1, 4.0])
        xi = point[:2] / point[2]
        pj = point @ rot.T + t
        xj = pj[:2] / pj[2]
        line = e @ np.array([xi[0], xi[1], 1.0])
        normal = line[:2] / np.linalg.norm(line[:2])

        def constraint(d):
            a = np.array([xi[0] + d[0], xi[1] + d[1], 1.0])
            b = np.array([pert[0] + d[2], pert[1] + d[3], 1.0])
            return b @ e @ a

        for delta in (1e-4, 1e-3):
            pert = xj + delta * normal
            s = sampson_distance(e, xi, pert)
            sol = minimize(
                lambda d: d @ d,
                np.zeros(4),
                constraints=[{"type": "eq", "fun": constraint}],
                method="SLSQP",
                tol=1e-18,
            )
            assert s == pytest.approx(sol.fun, rel=0.1)

    def test_zero_matrix_raises(self):
        with pytest.raises(ZeroDenominator):
            sampson_distance(np.zeros((3, 3)), np.array([0.1, 0.2]), np.array([0.0, 0.1]))

    def test_scale_invariance(self, rng):
        rot = quat_to_matrix(quat_from_axis_angle([1, 1, 0], 0.4))
        e = essential_from_rt(rot, np.array([0.3, 1.0, 0.1]))
        xi = rng.normal(size=(20, 2)) * 0.3
        xj = rng.normal(size=(20, 2)) * 0.3
        d1 = sampson_distances(e, xi, xj)
        d2 = sampson_distances(-2.7 * e, xi, xj)
        assert np.allclose(d1, d2, rtol=1e-12)


class TestDecompose:
    def test_four_candidates_contain_truth(self, rng):
        for _ in range(10):
            axis = rng.normal(size=3)
            rot = quat_to_matrix(quat_from_axis_angle(axis, rng.uniform(0.1, 1.0)))
            t = rng.normal(size=3)
            t /= np.linalg.norm(t)
            cands = decompose_essential(essential_from_rt(rot, t))
            best_rot = min(rot_angle_deg(rc, rot) for rc, _ in cands)
            best_t = min(np.linalg.norm(tc - t) for _, tc in cands)
            # 1e-4 degrees is the arccos conditioning limit near identity
            assert best_rot < 1e-4
            assert best_t < 1e-6


class TestEstimateRelativePose:
    def test_exact_correspondences(self):
        cams = rig()
        corrs, _ = synthetic_pair_correspondences(cams[0], cams[1], sigma=0.0, seed=1)
        pc = estimate_relative_pose(
            corrs, cams[0].intrinsics, cams[1].intrinsics, RansacConfig(seed=1)
        )
        rot_true, _, tdir_true = relative_pose(cams[0], cams[1])
        assert rot_angle_deg(quat_to_matrix(pc.rotation_q), rot_true) < np.rad2deg(1e-4)
        assert np.arccos(np.clip(abs(pc.translation_dir @ tdir_true), -1, 1)) < 1e-4
        assert pc.score < 1e-12
        assert len(pc.inliers) == 200

    def test_outliers_rejected_and_pose_accurate(self):
        cams = rig()
        rot_true, _, tdir_true = relative_pose(cams[0], cams[1])
        for seed in range(5):
            corrs, outlier_idx = synthetic_pair_correspondences(
                cams[0], cams[1], sigma=0.5, outlier_frac=0.3, seed=seed
            )
            pc = estimate_relative_pose(
                corrs, cams[0].intrinsics, cams[1].intrinsics, RansacConfig(seed=seed)
            )
            assert not set(pc.inliers.tolist()) & set(outlier_idx.tolist())
            assert rot_angle_deg(quat_to_matrix(pc.rotation_q), rot_true) < 0.1
            t_err = np.rad2deg(
                np.arccos(np.clip(abs(pc.translation_dir @ tdir_true), -1, 1))
            )
            assert t_err < 0.5

    def test_too_few_correspondences(self):
        cams = rig()
        corrs, _ = synthetic_pair_correspondences(cams[0], cams[1], n=4, seed=0)
        with pytest.raises(NotEnoughCorrespondences):
            estimate_relative_pose(corrs, cams[0].intrinsics, cams[1].intrinsics)

    def test_determinism(self):
        cams = rig()
        corrs, _ = synthetic_pair_correspondences(
            cams[0], cams[2], sigma=0.5, outlier_frac=0.2, seed=3
        )
        cfg = RansacConfig(seed=99)
        a = estimate_relative_pose(corrs, cams[0].intrinsics, cams[2].intrinsics, cfg)
        b = estimate_relative_pose(corrs, cams[0].intrinsics, cams[2].intrinsics, cfg)
        assert np.array_equal(a.inliers, b.inliers)
        assert np.array_equal(a.essential, b.essential)
        assert np.array_equal(a.rotation_q, b.rotation_q)
        assert a.score == b.score

    def test_epipolar_consistency_of_inliers(self):
        cams = rig()
        cfg = RansacConfig(seed=5)
        corrs, _ = synthetic_pair_correspondences(
            cams[1], cams[3], sigma=0.7, outlier_frac=0.25, seed=5
        )
        pc = estimate_relative_pose(corrs, cams[1].intrinsics, cams[3].intrinsics, cfg)
        xi = cams[1].intrinsics.normalize(corrs.pixels_i[pc.inliers])
        xj = cams[3].intrinsics.normalize(corrs.pixels_j[pc.inliers])
        d = sampson_distances(pc.essential, xi, xj)
        assert np.all(d < cfg.inlier_threshold)
        assert pc.score <= cfg.inlier_threshold

    def test_essential_manifold_invariant(self):
        cams = rig()
        corrs, _ = synthetic_pair_correspondences(cams[2], cams[4], sigma=0.5, seed=8)
        pc = estimate_relative_pose(corrs, cams[2].intrinsics, cams[4].intrinsics,
                                    RansacConfig(seed=8))
        s = np.linalg.svd(pc.essential, compute_uv=False)
        assert s[2] < 1e-6 * s[0]
        assert abs(s[0] - s[1]) < 1e-6 * s[0]
        assert abs(np.linalg.norm(pc.translation_dir) - 1) < 1e-9

    def test_cheirality_of_result(self):
        cams = rig()
        corrs, _ = synthetic_pair_correspondences(
            cams[0], cams[1], sigma=0.5, outlier_frac=0.3, seed=11
        )
        pc = estimate_relative_pose(corrs, cams[0].intrinsics, cams[1].intrinsics,
                                    RansacConfig(seed=11))
        from camocap.pairwise import _depths_two_view

        xi = cams[0].intrinsics.normalize(corrs.pixels_i[pc.inliers])
        xj = cams[1].intrinsics.normalize(corrs.pixels_j[pc.inliers])
        zi, zj = _depths_two_view(
            quat_to_matrix(pc.rotation_q), pc.translation_dir, xi, xj
        )
        assert np.sum((zi > 0) & (zj > 0)) > 0.5 * len(pc.inliers)
