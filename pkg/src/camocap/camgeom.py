"""Camera models, projection, undistortion and weighted-DLT triangulation.

Conventions used across the package:

* Poses are world-to-camera: ``x_cam = R @ x_world + t``. Rotations are
  stored as unit quaternions ``[w, x, y, z]``.
* Normalized coordinates are pinhole coordinates at unit focal length,
  i.e. ``(x, y) = (X/Z, Y/Z)`` in the camera frame, before distortion.
* Lens distortion follows the Brown-Conrady model with radial terms
  ``k1, k2, k3`` and tangential terms ``p1, p2``, applied in normalized
  coordinates.

All value types are frozen dataclasses, so every operation here is a pure
function and safe to call concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateGeometry,
    InsufficientViews,
    InvalidDistortion,
    NoConvergence,
    NonPositiveDepth,
)

__all__ = [
    "Intrinsics",
    "Distortion",
    "Pose",
    "CameraModel",
    "project",
    "project_many",
    "undistort_points",
    "triangulate_weighted_dlt",
    "load_cameras",
    "save_cameras",
]


# quaternion helpers ([w, x, y, z], unit norm)

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    q = q / n
    # canonical sign: w >= 0 keeps serialized poses reproducible
    if q[0] < 0:
        q = -q
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Convert a rotation matrix to a unit quaternion (Shepperd's method)."""
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    return quat_normalize(q)


def quat_from_axis_angle(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = 0.5 * angle_rad
    return quat_normalize(np.concatenate([[np.cos(half)], np.sin(half) * axis / n]))


def quat_from_rotvec(w: np.ndarray) -> np.ndarray:
    """Exponential map so(3) -> unit quaternion."""
    w = np.asarray(w, dtype=float)
    angle = np.linalg.norm(w)
    if angle < 1e-300:
        return np.array([1.0, 0.0, 0.0, 0.0])
    return quat_from_axis_angle(w, angle)


def rotation_angle(q: np.ndarray) -> float:
    """Geodesic rotation angle of a unit quaternion, in radians."""
    w = min(1.0, abs(float(q[0])))
    return 2.0 * np.arccos(w)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def normalize(self, pixels: np.ndarray) -> np.ndarray:
        """Pixels -> normalized coordinates (K^-1 applied)."""
        p = np.atleast_2d(np.asarray(pixels, dtype=float))
        return np.column_stack([(p[:, 0] - self.cx) / self.fx, (p[:, 1] - self.cy) / self.fy])

    def denormalize(self, normalized: np.ndarray) -> np.ndarray:
        n = np.atleast_2d(np.asarray(normalized, dtype=float))
        return np.column_stack([n[:, 0] * self.fx + self.cx, n[:, 1] * self.fy + self.cy])


@dataclass(frozen=True)
class Distortion:
    """Brown-Conrady coefficients; all zero means pinhole."""

    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self):
        vals = [self.k1, self.k2, self.k3, self.p1, self.p2]
        if not np.all(np.isfinite(vals)):
            raise ValueError("distortion coefficients must be finite")

    @property
    def is_zero(self) -> bool:
        return self.k1 == self.k2 == self.k3 == self.p1 == self.p2 == 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.k1, self.k2, self.k3, self.p1, self.p2])


def distort_normalized(xy: np.ndarray, dist: Distortion) -> np.ndarray:
    """Apply Brown-Conrady distortion to normalized coordinates (N, 2)."""
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    x, y = xy[:, 0], xy[:, 1]
    r2 = x * x + y * y
    radial = 1.0 + r2 * (dist.k1 + r2 * (dist.k2 + r2 * dist.k3))
    xd = x * radial + 2.0 * dist.p1 * x * y + dist.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + dist.p1 * (r2 + 2.0 * y * y) + 2.0 * dist.p2 * x * y
    return np.column_stack([xd, yd])


def distortion_jacobian(xy: np.ndarray, dist: Distortion) -> np.ndarray:
    """Jacobian of the distortion map wrt (x, y); shape (N, 2, 2)."""
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    x, y = xy[:, 0], xy[:, 1]
    r2 = x * x + y * y
    radial = 1.0 + r2 * (dist.k1 + r2 * (dist.k2 + r2 * dist.k3))
    dradial = dist.k1 + r2 * (2.0 * dist.k2 + 3.0 * dist.k3 * r2)
    jac = np.empty((xy.shape[0], 2, 2))
    jac[:, 0, 0] = radial + 2.0 * x * x * dradial + 2.0 * dist.p1 * y + 6.0 * dist.p2 * x
    jac[:, 0, 1] = 2.0 * x * y * dradial + 2.0 * dist.p1 * x + 2.0 * dist.p2 * y
    jac[:, 1, 0] = jac[:, 0, 1]
    jac[:, 1, 1] = radial + 2.0 * y * y * dradial + 6.0 * dist.p1 * y + 2.0 * dist.p2 * x
    return jac


def check_distortion_injective(intr: Intrinsics, dist: Distortion, grid: int = 24) -> None:
    """Numerically verify the distortion map is injective over the image.

    Samples the normalized image domain on a grid and requires the map's
    Jacobian determinant to stay positive (orientation-preserving local
    diffeomorphism). Raises InvalidDistortion otherwise.
    """
    if dist.is_zero:
        return
    us = np.linspace(0.0, intr.width, grid)
    vs = np.linspace(0.0, intr.height, grid)
    uu, vv = np.meshgrid(us, vs)
    pts = intr.normalize(np.column_stack([uu.ravel(), vv.ravel()]))
    det = np.linalg.det(distortion_jacobian(pts, dist))
    if np.any(det <= 0):
        raise InvalidDistortion(
            "distortion map folds over inside the image domain "
            f"(min jacobian det {det.min():.3g})"
        )


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform: x_cam = R @ x_world + t."""

    q: np.ndarray  # unit quaternion [w, x, y, z]
    t: np.ndarray  # translation, scene units

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(4)
        t = np.asarray(self.t, dtype=float).reshape(3)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"quaternion norm {n} deviates from 1 by more than 1e-9")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_rt(rotation: np.ndarray, translation: np.ndarray) -> "Pose":
        return Pose(quat_from_matrix(rotation), np.asarray(translation, dtype=float))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def compose(self, other: "Pose") -> "Pose":
        """Return self applied after other: (self o other)(x) = self(other(x))."""
        q = quat_normalize(quat_multiply(self.q, other.q))
        t = self.rotation @ other.t + self.t
        return Pose(q, t)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(quat_conjugate(self.q), -rt @ self.t)

    def transform(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts @ self.rotation.T + self.t

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.t


@dataclass(frozen=True)
class CameraModel:
    """A fully parameterized camera: intrinsics, distortion and pose."""

    intrinsics: Intrinsics
    distortion: Distortion
    pose: Pose

    def __post_init__(self):
        check_distortion_injective(self.intrinsics, self.distortion)

    def with_pose(self, pose: Pose) -> "CameraModel":
        return replace(self, pose=pose)


def project(point_world: np.ndarray, camera: CameraModel) -> np.ndarray:
    """Project one world point to pixel coordinates.

    Raises NonPositiveDepth when the point is at or behind the camera
    plane; callers treat that as "not visible in this view".
    """
    xc = camera.pose.transform(point_world)[0]
    if xc[2] <= 0:
        raise NonPositiveDepth(f"camera-frame depth {xc[2]:.6g} <= 0")
    xy = xc[:2] / xc[2]
    xyd = distort_normalized(xy[None, :], camera.distortion)
    return camera.intrinsics.denormalize(xyd)[0]


def project_many(points_world: np.ndarray, camera: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection.

    Returns (pixels (N, 2), valid (N,)); invalid rows (non-positive depth)
    contain NaN.
    """
    pts = np.atleast_2d(np.asarray(points_world, dtype=float))
    xc = camera.pose.transform(pts)
    valid = xc[:, 2] > 0
    pix = np.full((pts.shape[0], 2), np.nan)
    if np.any(valid):
        xy = xc[valid, :2] / xc[valid, 2:3]
        xyd = distort_normalized(xy, camera.distortion)
        pix[valid] = camera.intrinsics.denormalize(xyd)
    return pix, valid


def undistort_normalized(
    xyd: np.ndarray,
    dist: Distortion,
    max_iter: int = 50,
    tol: float = 1e-10,
) -> np.ndarray:
    """Invert the distortion map with a damped Newton iteration.

    Operates in normalized coordinates; converges to ``tol`` (about 1e-7 px
    at f=1000) for barrel distortion up to GoPro levels.
    """
    target = np.atleast_2d(np.asarray(xyd, dtype=float))
    if dist.is_zero:
        return target.copy()
    xy = target.copy()
    err = distort_normalized(xy, dist) - target
    for _ in range(max_iter):
        norms = np.linalg.norm(err, axis=1)
        active = norms > tol
        if not np.any(active):
            return xy
        jac = distortion_jacobian(xy[active], dist)
        step = np.linalg.solve(jac, err[active][:, :, None])[:, :, 0]
        # damped update: halve until the residual does not increase
        scale = np.ones(step.shape[0])
        for _ in range(20):
            trial = xy[active] - step * scale[:, None]
            trial_err = distort_normalized(trial, dist) - target[active]
            worse = np.linalg.norm(trial_err, axis=1) > norms[active]
            if not np.any(worse):
                break
            scale[worse] *= 0.5
        xy[active] = xy[active] - step * scale[:, None]
        err[active] = distort_normalized(xy[active], dist) - target[active]
    if np.any(np.linalg.norm(err, axis=1) > tol):
        raise NoConvergence(
            f"undistortion did not reach {tol} after {max_iter} iterations"
        )
    return xy


def undistort_points(
    pixels: Sequence[np.ndarray] | np.ndarray,
    intrinsics: Intrinsics,
    distortion: Distortion,
) -> np.ndarray:
    """Map observed pixels to ideal pinhole pixels (distortion removed)."""
    pix = np.atleast_2d(np.asarray(pixels, dtype=float))
    xyd = intrinsics.normalize(pix)
    xy = undistort_normalized(xyd, distortion)
    return intrinsics.denormalize(xy)


# triangulation

def triangulate_weighted_dlt(
    observations: Iterable[tuple[int, np.ndarray, float]],
    cameras: Sequence[CameraModel],
    degeneracy_ratio: float = 0.99,
) -> np.ndarray:
    """Triangulate one point from weighted undistorted pixel observations.

    Each observation is ``(camera_index, pixel, weight)`` with the pixel
    already undistorted. Rows of the homogeneous system are built from
    normalized coordinates (intrinsics removed) so the system is well
    conditioned, and each view's two rows are scaled by its weight.

    Raises InsufficientViews with fewer than two positively weighted
    observations and DegenerateGeometry when the two smallest singular
    values are nearly equal (rays close to parallel).
    """
    obs = [(int(ci), np.asarray(px, dtype=float), float(w)) for ci, px, w in observations]
    obs = [o for o in obs if o[2] > 0]
    if len(obs) < 2:
        raise InsufficientViews(f"{len(obs)} weighted observations, need >= 2")

    rows = np.empty((2 * len(obs), 4))
    for r, (ci, px, w) in enumerate(obs):
        cam = cameras[ci]
        x, y = cam.intrinsics.normalize(px[None, :])[0]
        pose = cam.pose
        p = np.hstack([pose.rotation, pose.t[:, None]])  # normalized projection [R|t]
        rows[2 * r] = w * (x * p[2] - p[0])
        rows[2 * r + 1] = w * (y * p[2] - p[1])

    _, s, vt = np.linalg.svd(rows, full_matrices=True)
    if s.shape[0] == 4 and s[2] > 0 and s[3] / s[2] > degeneracy_ratio:
        raise DegenerateGeometry(
            f"smallest singular values nearly equal (ratio {s[3] / s[2]:.4f})"
        )
    hom = vt[-1]
    if abs(hom[3]) < 1e-14 * np.linalg.norm(hom[:3]):
        raise DegenerateGeometry("triangulated point at infinity")
    return hom[:3] / hom[3]


# camera file I/O
#
# File schema, one object per camera:
#   {id, width, height, fx, fy, cx, cy,
#    dist: [k1, k2, p1, p2, k3], q: [w, x, y, z], t: [x, y, z]}
# The quaternion is world-to-camera. Translations are in scene units
# before metric scaling and in meters afterwards; the wrapper's "units"
# field records which.

def camera_to_record(cam_id: str, cam: CameraModel) -> dict:
    i, d, p = cam.intrinsics, cam.distortion, cam.pose
    return {
        "id": cam_id,
        "width": i.width,
        "height": i.height,
        "fx": i.fx,
        "fy": i.fy,
        "cx": i.cx,
        "cy": i.cy,
        "dist": [d.k1, d.k2, d.p1, d.p2, d.k3],
        "q": [float(v) for v in p.q],
        "t": [float(v) for v in p.t],
    }


def camera_from_record(rec: dict) -> tuple[str, CameraModel]:
    intr = Intrinsics(
        fx=float(rec["fx"]),
        fy=float(rec["fy"]),
        cx=float(rec["cx"]),
        cy=float(rec["cy"]),
        width=int(rec["width"]),
        height=int(rec["height"]),
    )
    k1, k2, p1, p2, k3 = [float(v) for v in rec["dist"]]
    dist = Distortion(k1=k1, k2=k2, k3=k3, p1=p1, p2=p2)
    pose = Pose(np.array(rec["q"], dtype=float), np.array(rec["t"], dtype=float))
    return str(rec["id"]), CameraModel(intr, dist, pose)


def save_cameras(path: str | Path, cameras: dict[str, CameraModel], units: str = "scene") -> None:
    payload = {
        "units": units,
        "cameras": [camera_to_record(cid, cam) for cid, cam in sorted(cameras.items())],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_cameras(path: str | Path) -> dict[str, CameraModel]:
    data = json.loads(Path(path).read_text())
    records = data["cameras"] if isinstance(data, dict) else data
    return dict(camera_from_record(rec) for rec in records)
