import numpy as np
import pytest

from camocap.camgeom import CameraModel, Distortion, Intrinsics, Pose


def lookat_pose(center, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose for a camera at `center` looking at `target`."""
    center = np.asarray(center, dtype=float)
    z = np.asarray(target, dtype=float) - center
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    if np.linalg.norm(x) < 1e-9:
        x = np.array([1.0, 0.0, 0.0])
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.vstack([x, y, z])
    return Pose.from_rt(rot, -rot @ center)


def ring_cameras(
    n=4,
    radius=2.0,
    target=(0.0, 0.0, 1.0),
    height=1.5,
    focal=1000.0,
    width=1280,
    height_px=720,
    distortion=None,
):
    """Cameras evenly spaced on a circle, all looking at `target`."""
    cams = []
    for i in range(n):
        ang = 2 * np.pi * i / n
        center = np.array([radius * np.cos(ang), radius * np.sin(ang), height])
        intr = Intrinsics(focal, focal, width / 2, height_px / 2, width, height_px)
        cams.append(
            CameraModel(intr, distortion or Distortion(), lookat_pose(center, target))
        )
    return cams


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def relative_pose(cam_i: CameraModel, cam_j: CameraModel):
    """(R, t) with x_cam_j = R @ x_cam_i + t, plus the unit direction."""
    rot = cam_j.pose.rotation @ cam_i.pose.rotation.T
    t = cam_j.pose.t - rot @ cam_i.pose.t
    return rot, t, t / np.linalg.norm(t)


def synthetic_pair_correspondences(
    cam_i,
    cam_j,
    n=200,
    sigma=0.5,
    outlier_frac=0.0,
    seed=0,
    volume=((-1.2, -1.2, 0.1), (1.2, 1.2, 2.3)),
):
    """Correspondence set between two cameras with known outlier labels.

    Outliers are uniform random pixels re-drawn until they sit well off
    the true epipolar geometry, so "all outliers rejected" is a
    well-defined assertion.
    """
    from camocap.camgeom import project_many
    from camocap.keystore import CorrespondenceSet
    from camocap.pairwise import essential_from_rt, sampson_distances

    rng = np.random.default_rng(seed)
    lo, hi = volume
    pts = []
    while len(pts) < n:
        cand = rng.uniform(lo, hi, size=(4 * n, 3))
        pi, vi = project_many(cand, cam_i)
        pj, vj = project_many(cand, cam_j)
        wi, hgt = cam_i.intrinsics.width, cam_i.intrinsics.height
        inside = (
            vi & vj
            & (pi[:, 0] >= 0) & (pi[:, 0] < wi) & (pi[:, 1] >= 0) & (pi[:, 1] < hgt)
            & (pj[:, 0] >= 0) & (pj[:, 0] < wi) & (pj[:, 1] >= 0) & (pj[:, 1] < hgt)
        )
        pts.extend(cand[inside])
    pts = np.array(pts[:n])
    pix_i, _ = project_many(pts, cam_i)
    pix_j, _ = project_many(pts, cam_j)
    pix_i = pix_i + rng.normal(0, sigma, (n, 2))
    pix_j = pix_j + rng.normal(0, sigma, (n, 2))

    rot, _, tdir = relative_pose(cam_i, cam_j)
    e_true = essential_from_rt(rot, tdir)
    n_out = int(round(outlier_frac * n))
    outlier_idx = rng.choice(n, n_out, replace=False) if n_out else np.array([], int)
    for idx in outlier_idx:
        while True:
            candidate = rng.uniform(
                [0, 0], [cam_j.intrinsics.width, cam_j.intrinsics.height]
            )
            d = sampson_distances(
                e_true,
                cam_i.intrinsics.normalize(pix_i[idx][None, :]),
                cam_j.intrinsics.normalize(candidate[None, :]),
            )[0]
            if d > 1e-4:  # 10x the default inlier threshold
                pix_j[idx] = candidate
                break
    src = np.column_stack([np.arange(n), np.zeros(n, int), np.zeros(n, int)])
    corrs = CorrespondenceSet("ci", "cj", pix_i, pix_j, np.ones(n), src)
    return corrs, outlier_idx
