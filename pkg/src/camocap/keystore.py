"""Keypoint detections on a synchronized global timeline.

Detection files are JSON Lines with one record per (camera, frame,
person): ``{"camera_id": str, "frame_index": int, "person_id": int,
"keypoints": [[u, v, w], ...]}``, accompanied by a sidecar skeleton file
``{"names": [...], "bones": [[a, b], ...]}`` naming the keypoints and
their connectivity.

The global clock places camera k's frame i at ``i / frame_rate - lag_k``;
frames from different cameras are paired by nearest timestamp within a
strict half-period tolerance. Correspondences across a camera pair carry
the geometric mean of the two detector confidences and feed the RANSAC
sampling pool.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .audiosync import SyncResult
from .errors import (
    EmptyPool,
    InconsistentFrameRate,
    MissingLag,
    NoSharedFrames,
)

__all__ = [
    "SkeletonDef",
    "FrameDetections",
    "CameraTimeline",
    "DetectionTimeline",
    "Correspondence",
    "CorrespondenceSet",
    "load_skeleton_def",
    "load_detection_file",
    "build_timeline",
    "score_and_filter_pairs",
    "sample_correspondences",
]


@dataclass(frozen=True)
class SkeletonDef:
    """Keypoint names and bone connectivity shared by all cameras."""

    names: tuple[str, ...]
    bones: tuple[tuple[int, int], ...]

    @property
    def n_joints(self) -> int:
        return len(self.names)


@dataclass
class FrameDetections:
    camera_id: str
    frame_index: int
    timestamp: float
    # person_id -> (K, 3) array of [u, v, confidence]
    persons: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class CameraTimeline:
    camera_id: str
    frame_rate: float
    frames: list[FrameDetections]

    def frame_by_position(self, pos: int) -> FrameDetections:
        return self.frames[pos]


@dataclass
class FrameGroup:
    """Frames from several cameras captured at (nearly) the same instant."""

    time: float
    members: dict[str, int]  # camera_id -> position into CameraTimeline.frames


@dataclass
class DetectionTimeline:
    cameras: dict[str, CameraTimeline]
    groups: list[FrameGroup]
    skeleton: SkeletonDef
    reference: str

    def paired_groups(self, cam_i: str, cam_j: str) -> list[FrameGroup]:
        return [g for g in self.groups if cam_i in g.members and cam_j in g.members]


@dataclass(frozen=True)
class Correspondence:
    cam_i: str
    cam_j: str
    pixel_i: np.ndarray
    pixel_j: np.ndarray
    confidence: float  # sqrt(w_i * w_j)
    frame_index: int   # group index on the global timeline
    person_id: int
    keypoint_id: int


class CorrespondenceSet:
    """Column-oriented container behaving like a sequence of Correspondence."""

    def __init__(
        self,
        cam_i: str,
        cam_j: str,
        pixels_i: np.ndarray,
        pixels_j: np.ndarray,
        confidences: np.ndarray,
        sources: np.ndarray,
    ):
        self.cam_i = cam_i
        self.cam_j = cam_j
        self.pixels_i = np.asarray(pixels_i, dtype=float).reshape(-1, 2)
        self.pixels_j = np.asarray(pixels_j, dtype=float).reshape(-1, 2)
        self.confidences = np.asarray(confidences, dtype=float).reshape(-1)
        self.sources = np.asarray(sources, dtype=np.int64).reshape(-1, 3)
        n = len(self.confidences)
        if not (len(self.pixels_i) == len(self.pixels_j) == len(self.sources) == n):
            raise ValueError("correspondence columns disagree in length")

    def __len__(self) -> int:
        return len(self.confidences)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            i = int(idx)
            return Correspondence(
                self.cam_i,
                self.cam_j,
                self.pixels_i[i],
                self.pixels_j[i],
                float(self.confidences[i]),
                int(self.sources[i, 0]),
                int(self.sources[i, 1]),
                int(self.sources[i, 2]),
            )
        return self.select(np.arange(len(self))[idx])

    def select(self, indices: np.ndarray) -> "CorrespondenceSet":
        idx = np.asarray(indices)
        return CorrespondenceSet(
            self.cam_i,
            self.cam_j,
            self.pixels_i[idx],
            self.pixels_j[idx],
            self.confidences[idx],
            self.sources[idx],
        )


def load_skeleton_def(path: str | Path) -> SkeletonDef:
    data = json.loads(Path(path).read_text())
    return SkeletonDef(
        names=tuple(str(n) for n in data["names"]),
        bones=tuple((int(a), int(b)) for a, b in data["bones"]),
    )


def load_detection_file(path: str | Path) -> list[dict]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def _camera_timeline(
    camera_id: str,
    records: Sequence[Mapping],
    lag: float,
    frame_rate: float,
    n_joints: int,
) -> CameraTimeline:
    by_frame: dict[int, FrameDetections] = {}
    timestamps: dict[int, float] = {}
    for rec in records:
        idx = int(rec["frame_index"])
        ts = idx / frame_rate - lag
        frame = by_frame.get(idx)
        if frame is None:
            frame = FrameDetections(camera_id, idx, ts)
            by_frame[idx] = frame
        kp = np.asarray(rec["keypoints"], dtype=float)
        if kp.shape != (n_joints, 3):
            raise ValueError(
                f"{camera_id} frame {idx}: keypoints shape {kp.shape}, "
                f"expected ({n_joints}, 3)"
            )
        frame.persons[int(rec["person_id"])] = kp
        if "timestamp" in rec:
            timestamps[idx] = float(rec["timestamp"])
    if len(timestamps) >= 2:
        idxs = sorted(timestamps)
        spans = [
            (timestamps[b] - timestamps[a]) / (b - a)
            for a, b in zip(idxs, idxs[1:])
            if b > a
        ]
        implied = float(np.median(spans))
        if implied > 0 and abs(1.0 / implied - frame_rate) > 0.01 * frame_rate:
            raise InconsistentFrameRate(
                f"{camera_id}: declared {frame_rate} Hz but timestamps imply "
                f"{1.0 / implied:.3f} Hz"
            )
    frames = [by_frame[i] for i in sorted(by_frame)]
    return CameraTimeline(camera_id, frame_rate, frames)


def build_timeline(
    detections: Mapping[str, Sequence[Mapping]],
    sync: SyncResult,
    frame_rates: Mapping[str, float],
    skeleton: SkeletonDef,
) -> DetectionTimeline:
    """Place every camera's detections on the shared global clock.

    `detections` maps camera id to its parsed JSONL records. Pairing uses
    the sync reference camera as the anchor; a frame of another camera
    joins an anchor group when it is that group's nearest frame and the
    time difference is strictly below half the larger frame period.
    """
    cameras: dict[str, CameraTimeline] = {}
    for cam_id in sorted(detections):
        if cam_id not in sync.lags:
            raise MissingLag(f"camera {cam_id} has no synchronization lag")
        cameras[cam_id] = _camera_timeline(
            cam_id,
            detections[cam_id],
            sync.lags[cam_id],
            float(frame_rates[cam_id]),
            skeleton.n_joints,
        )

    reference = sync.reference if sync.reference in cameras else sorted(cameras)[0]
    anchor = cameras[reference]
    groups = [
        FrameGroup(time=f.timestamp, members={reference: pos})
        for pos, f in enumerate(anchor.frames)
    ]
    anchor_times = np.array([f.timestamp for f in anchor.frames])

    for cam_id, tl in cameras.items():
        if cam_id == reference:
            continue
        # strictly-below comparison with a relative epsilon, so a lag of
        # exactly half a period rejects despite float rounding
        tol = 0.5 * max(1.0 / tl.frame_rate, 1.0 / anchor.frame_rate) * (1.0 - 1e-9)
        times = np.array([f.timestamp for f in tl.frames])
        if times.size == 0:
            continue
        # nearest anchor group for each frame, keeping only the closest
        # claimant when two frames contend for the same group
        pos_right = np.searchsorted(anchor_times, times)
        claimed: dict[int, tuple[float, int]] = {}
        for pos, t in enumerate(times):
            r = pos_right[pos]
            candidates = [c for c in (r - 1, r) if 0 <= c < anchor_times.size]
            if not candidates:
                continue
            best = min(candidates, key=lambda c: abs(anchor_times[c] - t))
            dt = abs(anchor_times[best] - t)
            if dt < tol and (best not in claimed or dt < claimed[best][0]):
                claimed[best] = (dt, pos)
        for gidx, (_, pos) in claimed.items():
            groups[gidx].members[cam_id] = pos

    return DetectionTimeline(cameras, groups, skeleton, reference)


def pair_confidence(w_i: np.ndarray, w_j: np.ndarray) -> np.ndarray:
    """Geometric mean of the two detector confidences."""
    return np.sqrt(np.asarray(w_i, dtype=float) * np.asarray(w_j, dtype=float))


def score_and_filter_pairs(
    timeline: DetectionTimeline,
    cam_i: str,
    cam_j: str,
    tau: float = 0.7,
) -> CorrespondenceSet:
    """Correspondences between two cameras with pair confidence above tau.

    For every paired frame, same-person, same-keypoint detection visible
    in both views, the pair score is sqrt(w_i * w_j); entries at or below
    tau are dropped.
    """
    shared = timeline.paired_groups(cam_i, cam_j)
    if not shared:
        raise NoSharedFrames(f"cameras {cam_i} and {cam_j} share no paired frames")
    px_i, px_j, conf, src = [], [], [], []
    for gidx, group in enumerate(timeline.groups):
        if cam_i not in group.members or cam_j not in group.members:
            continue
        frame_i = timeline.cameras[cam_i].frames[group.members[cam_i]]
        frame_j = timeline.cameras[cam_j].frames[group.members[cam_j]]
        for person in sorted(set(frame_i.persons) & set(frame_j.persons)):
            kp_i = frame_i.persons[person]
            kp_j = frame_j.persons[person]
            score = pair_confidence(kp_i[:, 2], kp_j[:, 2])
            keep = np.nonzero(score > tau)[0]
            if keep.size:
                px_i.append(kp_i[keep, :2])
                px_j.append(kp_j[keep, :2])
                conf.append(score[keep])
                src.append(
                    np.column_stack(
                        [np.full(keep.size, gidx), np.full(keep.size, person), keep]
                    )
                )
    if not conf:
        return CorrespondenceSet(
            cam_i, cam_j, np.empty((0, 2)), np.empty((0, 2)), np.empty(0), np.empty((0, 3))
        )
    return CorrespondenceSet(
        cam_i,
        cam_j,
        np.vstack(px_i),
        np.vstack(px_j),
        np.concatenate(conf),
        np.vstack(src),
    )


def sample_correspondences(
    pool: CorrespondenceSet,
    budget: int,
    seed: int,
) -> CorrespondenceSet:
    """Uniform sample without replacement of at most `budget` entries."""
    if len(pool) == 0:
        raise EmptyPool("no correspondences to sample from")
    if len(pool) <= budget:
        return pool.select(np.arange(len(pool)))
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pool), size=budget, replace=False)
    return pool.select(idx)
