"""Full-sequence triangulation, 3D confidence scores and pointmap merging.

Every joint observed with positive confidence in at least two views is
triangulated by weighted DLT after undistortion. Each triangulated point
gets a confidence in [0, 1] built from pairwise view agreement: per view
the reprojection residual is normalized by the focal length and mapped
through an exponential decay, pairs of views combine through geometric
means weighted by the detector confidences, and the point score is the
mean over all contributing pairs. One valid pair is therefore required
for a nonzero score, matching the two-view minimum for triangulation.

Depth rasters (externally produced, metric) can be merged into a world
point cloud: each pixel is undistorted, back-projected to its camera-
space ray at the stored depth and moved to world coordinates.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camgeom import (
    CameraModel,
    project_many,
    triangulate_weighted_dlt,
    undistort_points,
)
from .errors import DegenerateGeometry, DimensionMismatch, InsufficientViews
from .keystore import DetectionTimeline

logger = logging.getLogger(__name__)

__all__ = [
    "ConfidenceParams",
    "SkeletonFrame",
    "SkeletonSequence",
    "triangulate_sequence",
    "point_confidence",
    "merge_pointmaps",
    "read_depth_map",
    "write_depth_map",
    "write_skeletons",
    "read_skeletons",
    "write_ply",
]


@dataclass(frozen=True)
class ConfidenceParams:
    """Decay rate applied to focal-normalized reprojection residuals."""

    decay: float = 500.0

    def __post_init__(self):
        if self.decay <= 0:
            raise ValueError("decay must be positive")


@dataclass
class SkeletonFrame:
    frame_index: int          # global timeline group index
    person_id: int
    joints: np.ndarray        # (K, 3) scene units
    confidences: np.ndarray   # (K,) in [0, 1]
    visible: np.ndarray       # (K,) bool

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=float)
        self.confidences = np.asarray(self.confidences, dtype=float)
        self.visible = np.asarray(self.visible, dtype=bool)


@dataclass
class SkeletonSequence:
    frames: list[SkeletonFrame] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)


def point_confidence(
    point: np.ndarray,
    observations: list[tuple[int, np.ndarray, float]],
    cameras: list[CameraModel],
    params: ConfidenceParams = ConfidenceParams(),
) -> float:
    """Pairwise reprojection consensus score of one 3D point.

    `observations` holds (camera_index, observed_pixel, weight) entries;
    weights are the 2D detector confidences. Views behind the point score
    zero. Returns 0 when fewer than two views have positive weight.
    """
    point = np.asarray(point, dtype=float)
    if not np.all(np.isfinite(point)):
        return 0.0
    contributing = [(ci, px, w) for ci, px, w in observations if w > 0]
    if len(contributing) < 2:
        return 0.0
    scores = np.empty(len(contributing))
    weights = np.empty(len(contributing))
    for k, (ci, pix, w) in enumerate(contributing):
        cam = cameras[ci]
        proj, valid = project_many(point[None, :], cam)
        if not valid[0]:
            scores[k] = 0.0
        else:
            residual = np.linalg.norm(proj[0] - np.asarray(pix, dtype=float))
            scores[k] = np.exp(-params.decay * residual / cam.intrinsics.fx)
        weights[k] = w
    total = 0.0
    n_pairs = 0
    for a in range(len(contributing)):
        for b in range(a + 1, len(contributing)):
            total += np.sqrt(weights[a] * weights[b]) * np.sqrt(scores[a] * scores[b])
            n_pairs += 1
    return float(total / n_pairs) if n_pairs else 0.0


def triangulate_sequence(
    timeline: DetectionTimeline,
    cameras: dict[str, CameraModel],
    params: ConfidenceParams = ConfidenceParams(),
) -> SkeletonSequence:
    """Triangulate every (frame group, person, joint) with two or more views.

    Joints that cannot be triangulated (too few views, degenerate rays,
    or a result behind a contributing camera) are marked invisible with
    confidence zero; nothing raises per joint.
    """
    cam_ids = sorted(cameras)
    cam_pos = {cid: k for k, cid in enumerate(cam_ids)}
    cam_list = [cameras[cid] for cid in cam_ids]
    n_joints = timeline.skeleton.n_joints
    sequence = SkeletonSequence()

    for gidx, group in enumerate(timeline.groups):
        per_person: dict[int, list[tuple[str, np.ndarray]]] = {}
        for cam_id, fpos in group.members.items():
            frame = timeline.cameras[cam_id].frames[fpos]
            for pid, kp in frame.persons.items():
                per_person.setdefault(pid, []).append((cam_id, kp))
        for pid in sorted(per_person):
            views = per_person[pid]
            joints = np.zeros((n_joints, 3))
            confs = np.zeros(n_joints)
            visible = np.zeros(n_joints, dtype=bool)
            undistorted: dict[str, np.ndarray] = {}
            for cam_id, kp in views:
                cam = cameras[cam_id]
                undistorted[cam_id] = undistort_points(
                    kp[:, :2], cam.intrinsics, cam.distortion
                )
            for j in range(n_joints):
                obs = [
                    (cam_pos[cam_id], undistorted[cam_id][j], float(kp[j, 2]))
                    for cam_id, kp in views
                    if kp[j, 2] > 0
                ]
                if len(obs) < 2:
                    continue
                try:
                    xyz = triangulate_weighted_dlt(obs, cam_list)
                except (InsufficientViews, DegenerateGeometry):
                    continue
                raw_obs = [
                    (cam_pos[cam_id], kp[j, :2], float(kp[j, 2]))
                    for cam_id, kp in views
                    if kp[j, 2] > 0
                ]
                joints[j] = xyz
                confs[j] = point_confidence(xyz, raw_obs, cam_list, params)
                visible[j] = True
            if visible.any():
                sequence.frames.append(
                    SkeletonFrame(gidx, pid, joints, confs, visible)
                )
    return sequence


# depth rasters: binary format "KDM1", u32 width, u32 height (little
# endian), then width*height float32 z-depths in meters, row major,
# NaN marking invalid pixels. Rasters are aligned with the original
# (distorted) image grid; the value is the camera-space z of the surface
# along the ray through that pixel.

_DEPTH_MAGIC = b"KDM1"


def write_depth_map(path: str | Path, depth: np.ndarray) -> None:
    depth = np.asarray(depth, dtype="<f4")
    if depth.ndim != 2:
        raise ValueError("depth map must be 2-D")
    height, width = depth.shape
    with open(path, "wb") as fh:
        fh.write(_DEPTH_MAGIC)
        fh.write(struct.pack("<II", width, height))
        fh.write(depth.tobytes())


def read_depth_map(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _DEPTH_MAGIC:
        raise ValueError(f"{path}: not a depth raster (bad magic)")
    width, height = struct.unpack("<II", raw[4:12])
    data = np.frombuffer(raw[12:], dtype="<f4", count=width * height)
    return data.reshape(height, width).astype(np.float64)


def merge_pointmaps(
    depth_maps: dict[str, np.ndarray],
    cameras: dict[str, CameraModel],
    stride: int = 1,
) -> np.ndarray:
    """Back-project per-view depth rasters into one world point cloud.

    Pixels are sampled on a stride grid; NaN depths are skipped. The
    pixel is undistorted first, then back-projected through the pinhole
    intrinsics at its stored z-depth and moved to world coordinates.
    """
    clouds = []
    for cam_id in sorted(depth_maps):
        cam = cameras[cam_id]
        depth = np.asarray(depth_maps[cam_id], dtype=float)
        intr = cam.intrinsics
        if depth.shape != (intr.height, intr.width):
            raise DimensionMismatch(
                f"{cam_id}: depth raster {depth.shape} vs image "
                f"({intr.height}, {intr.width})"
            )
        vs, us = np.mgrid[0 : intr.height : stride, 0 : intr.width : stride]
        z = depth[vs, us].ravel()
        keep = np.isfinite(z) & (z > 0)
        if not np.any(keep):
            continue
        pix = np.column_stack([us.ravel()[keep], vs.ravel()[keep]]).astype(float)
        xy = intr.normalize(undistort_points(pix, intr, cam.distortion))
        zk = z[keep]
        cam_pts = np.column_stack([xy[:, 0] * zk, xy[:, 1] * zk, zk])
        rot = cam.pose.rotation
        world = (cam_pts - cam.pose.t) @ rot
        clouds.append(world)
    if not clouds:
        return np.empty((0, 3))
    return np.vstack(clouds)


# skeleton JSONL: {"frame_index", "person_id", "joints": [[x, y, z, s], ...]}
# with invisible joints written as [0, 0, 0, 0]; a joint is visible iff
# its confidence is strictly positive.

def write_skeletons(path: str | Path, sequence: SkeletonSequence) -> None:
    with open(path, "w") as fh:
        for frame in sequence.frames:
            joints = []
            for j in range(len(frame.joints)):
                if frame.visible[j]:
                    x, y, z = frame.joints[j]
                    joints.append([float(x), float(y), float(z), float(frame.confidences[j])])
                else:
                    joints.append([0.0, 0.0, 0.0, 0.0])
            fh.write(
                json.dumps(
                    {
                        "frame_index": frame.frame_index,
                        "person_id": frame.person_id,
                        "joints": joints,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_skeletons(path: str | Path) -> SkeletonSequence:
    sequence = SkeletonSequence()
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            joints = np.asarray(rec["joints"], dtype=float)
            confs = joints[:, 3]
            sequence.frames.append(
                SkeletonFrame(
                    int(rec["frame_index"]),
                    int(rec["person_id"]),
                    joints[:, :3],
                    confs,
                    confs > 0,
                )
            )
    return sequence


def write_ply(path: str | Path, points: np.ndarray, binary: bool = True) -> None:
    """Point cloud writer (x, y, z float32), binary little-endian or ascii."""
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    if binary:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(pts.tobytes())
    else:
        with open(path, "w") as fh:
            fh.write("\n".join(header) + "\n")
            for x, y, z in pts:
                fh.write(f"{x} {y} {z}\n")
