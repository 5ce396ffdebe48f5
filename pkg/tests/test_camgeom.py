import numpy as np
import pytest

from camocap import camgeom as cg
from camocap.camgeom import (
    CameraModel,
    Distortion,
    Intrinsics,
    Pose,
    project,
    triangulate_weighted_dlt,
    undistort_points,
)
from camocap.errors import (
    DegenerateGeometry,
    InsufficientViews,
    InvalidDistortion,
    NonPositiveDepth,
)

from conftest import lookat_pose, ring_cameras


def make_camera(fx=1000.0, fy=1000.0, cx=640.0, cy=360.0, w=1280, h=720, dist=None, pose=None):
    return CameraModel(
        Intrinsics(fx, fy, cx, cy, w, h),
        dist or Distortion(),
        pose or Pose.identity(),
    )


class TestProject:
    def test_optical_axis_maps_to_principal_point(self):
        cam = make_camera()
        pix = project(np.array([0.0, 0.0, 2.0]), cam)
        assert np.allclose(pix, [640.0, 360.0])

    def test_brown_conrady_polynomial(self):
        # u = 1000 * 0.5 * (1 + 0.1 * 0.25) = 512.5 for (0.5, 0, 1) with k1 = 0.1
        cam = make_camera(cx=0.0, cy=0.0, w=2000, h=2000, dist=Distortion(k1=0.1))
        pix = project(np.array([0.5, 0.0, 1.0]), cam)
        assert pix[0] == pytest.approx(512.5, abs=1e-12)
        assert pix[1] == pytest.approx(0.0, abs=1e-12)

    def test_behind_camera_raises(self):
        cam = make_camera()
        with pytest.raises(NonPositiveDepth):
            project(np.array([0.0, 0.0, -1.0]), cam)

    def test_tangential_terms(self):
        dist = Distortion(p1=0.01, p2=-0.02)
        cam = make_camera(cx=0.0, cy=0.0, w=4000, h=4000, dist=dist)
        x, y = 0.3, -0.2
        r2 = x * x + y * y
        xd = x + 2 * 0.01 * x * y + (-0.02) * (r2 + 2 * x * x)
        yd = y + 0.01 * (r2 + 2 * y * y) + 2 * (-0.02) * x * y
        pix = project(np.array([x, y, 1.0]), cam)
        assert np.allclose(pix, [1000 * xd, 1000 * yd], atol=1e-10)


class TestUndistort:
    def test_zero_distortion_is_identity(self, rng):
        cam = make_camera()
        pix = rng.uniform([0, 0], [1280, 720], size=(50, 2))
        out = undistort_points(pix, cam.intrinsics, cam.distortion)
        assert np.allclose(out, pix, atol=1e-12)

    def test_round_trip_single(self):
        intr = Intrinsics(1000, 1000, 640, 360, 1280, 720)
        dist = Distortion(k1=0.1)
        p = np.array([[900.0, 500.0]])
        distorted = intr.denormalize(cg.distort_normalized(intr.normalize(p), dist))
        recovered = undistort_points(distorted, intr, dist)
        assert np.abs(recovered - p).max() < 1e-6

    def test_round_trip_grid(self, rng):
        intr = Intrinsics(1000, 1000, 640, 360, 1280, 720)
        dist = Distortion(k1=-0.3, k2=0.1)
        pix = rng.uniform([0, 0], [1280, 720], size=(100, 2))
        distorted = intr.denormalize(cg.distort_normalized(intr.normalize(pix), dist))
        recovered = undistort_points(distorted, intr, dist)
        assert np.abs(recovered - pix).max() < 1e-6

    def test_undistort_after_project_matches_pinhole(self, rng):
        # random in-frustum points, |k1| <= 0.3
        for seed in range(10):
            r = np.random.default_rng(seed)
            dist = Distortion(k1=r.uniform(-0.3, 0.3), k2=r.uniform(-0.05, 0.05))
            pose = lookat_pose(r.uniform(-0.3, 0.3, 3) + [2, 0, 1.2], (0, 0, 1))
            cam = make_camera(dist=dist, pose=pose)
            pinhole = CameraModel(cam.intrinsics, Distortion(), cam.pose)
            pts = r.uniform([-0.4, -0.4, 0.6], [0.4, 0.4, 1.6], size=(20, 3))
            pix, valid = cg.project_many(pts, cam)
            assert valid.all()
            undist = undistort_points(pix, cam.intrinsics, cam.distortion)
            expected, _ = cg.project_many(pts, pinhole)
            assert np.abs(undist - expected).max() < 1e-6

    def test_folding_distortion_rejected(self):
        with pytest.raises(InvalidDistortion):
            make_camera(dist=Distortion(k1=-2.5))


class TestPoseGroup:
    def test_associativity_and_inverse(self, rng):
        for _ in range(20):
            poses = []
            for _ in range(3):
                q = cg.quat_normalize(rng.normal(size=4))
                poses.append(Pose(q, rng.normal(size=3)))
            p1, p2, p3 = poses
            a = p1.compose(p2).compose(p3)
            b = p1.compose(p2.compose(p3))
            assert np.allclose(a.rotation, b.rotation, atol=1e-9)
            assert np.allclose(a.t, b.t, atol=1e-9)
            ident = p1.compose(p1.inverse())
            assert np.allclose(ident.rotation, np.eye(3), atol=1e-9)
            assert np.allclose(ident.t, 0, atol=1e-9)

    def test_quaternion_norm_enforced(self):
        with pytest.raises(ValueError):
            Pose(np.array([1.0, 0.1, 0.0, 0.0]), np.zeros(3))

    def test_matrix_quaternion_round_trip(self, rng):
        for _ in range(50):
            q = cg.quat_normalize(rng.normal(size=4))
            q2 = cg.quat_from_matrix(cg.quat_to_matrix(q))
            assert min(np.abs(q - q2).max(), np.abs(q + q2).max()) < 1e-12


class TestTriangulation:
    def test_noiseless_two_view(self):
        cams = [
            make_camera(pose=lookat_pose((1, 0, 0), (0, 0, 3))),
            make_camera(pose=lookat_pose((-1, 0, 0), (0, 0, 3))),
        ]
        target = np.array([0.0, 0.0, 3.0])
        obs = [(i, project(target, c), 1.0) for i, c in enumerate(cams)]
        result = triangulate_weighted_dlt(obs, cams)
        assert np.linalg.norm(result - target) < 1e-9

    def test_noisy_view_downweighted(self):
        cams = [
            make_camera(pose=lookat_pose((1, 0, 0), (0, 0, 3))),
            make_camera(pose=lookat_pose((-1, 0, 0), (0, 0, 3))),
            make_camera(pose=lookat_pose((0, 1, 0.2), (0, 0, 3))),
        ]
        target = np.array([0.05, -0.02, 3.0])
        pix = [project(target, c) for c in cams]
        clean = triangulate_weighted_dlt(
            [(0, pix[0], 1.0), (2, pix[2], 1.0)], cams
        )
        noisy = pix[1] + np.array([5.0, 0.0])
        mixed = triangulate_weighted_dlt(
            [(0, pix[0], 1.0), (1, noisy, 0.01), (2, pix[2], 1.0)], cams
        )
        assert np.linalg.norm(mixed - clean) < 1e-3

    def test_single_view_rejected(self):
        cams = [make_camera()]
        with pytest.raises(InsufficientViews):
            triangulate_weighted_dlt([(0, np.array([640.0, 360.0]), 1.0)], cams)

    def test_zero_weights_do_not_count(self):
        cams = ring_cameras(2)
        obs = [(0, np.array([640.0, 360.0]), 1.0), (1, np.array([640.0, 360.0]), 0.0)]
        with pytest.raises(InsufficientViews):
            triangulate_weighted_dlt(obs, cams)

    def test_parallel_rays_degenerate(self):
        # two cameras at the same center: every ray pair is parallel
        pose = lookat_pose((2, 0, 1), (0, 0, 1))
        cams = [make_camera(pose=pose), make_camera(pose=pose)]
        target = np.array([0.0, 0.0, 1.0])
        obs = [(i, project(target, c), 1.0) for i, c in enumerate(cams)]
        with pytest.raises(DegenerateGeometry):
            triangulate_weighted_dlt(obs, cams)

    def test_weight_one_matches_unweighted(self, rng):
        cams = ring_cameras(4)
        for _ in range(20):
            target = rng.uniform([-0.5, -0.5, 0.5], [0.5, 0.5, 1.5])
            pix = [project(target, c) + rng.normal(0, 1.0, 2) for c in cams]
            with_w = triangulate_weighted_dlt(
                [(i, p, 1.0) for i, p in enumerate(pix)], cams
            )
            halved = triangulate_weighted_dlt(
                [(i, p, 0.5) for i, p in enumerate(pix)], cams
            )
            # uniform weights cancel in the homogeneous system
            assert np.abs(with_w - halved).max() < 1e-12 * max(1.0, np.abs(with_w).max())

    def test_reprojection_residual_noiseless(self, rng):
        cams = ring_cameras(5)
        for _ in range(20):
            target = rng.uniform([-0.5, -0.5, 0.5], [0.5, 0.5, 1.5])
            obs = [(i, project(target, c), 1.0) for i, c in enumerate(cams)]
            result = triangulate_weighted_dlt(obs, cams)
            for i, c in enumerate(cams):
                assert np.linalg.norm(project(result, c) - obs[i][1]) < 1e-7


class TestCameraFile:
    def test_round_trip(self, tmp_path, rng):
        cams = {}
        for i in range(3):
            q = cg.quat_normalize(rng.normal(size=4))
            cams[f"cam{i}"] = make_camera(
                fx=900 + 50 * i,
                dist=Distortion(k1=-0.1 * i, k2=0.01, p1=0.001, p2=-0.002, k3=0.0005),
                pose=Pose(q, rng.normal(size=3)),
            )
        path = tmp_path / "cameras.json"
        cg.save_cameras(path, cams, units="scene")
        loaded = cg.load_cameras(path)
        assert set(loaded) == set(cams)
        for cid in cams:
            a, b = cams[cid], loaded[cid]
            assert a.intrinsics == b.intrinsics
            assert a.distortion == b.distortion
            assert np.allclose(a.pose.q, b.pose.q)
            assert np.allclose(a.pose.t, b.pose.t)
