"""Global metric scale recovery.

Two independent estimators produce the factor alpha that converts scene
units to meters:

* bone prior: a joint-level linear body model (mean joint positions
  plus a shape basis) supplies metric bone lengths. Alpha and the shape
  coefficients are optimized jointly so the scaled skeleton's bone
  lengths match the model's, each bone weighted by the geometric mean of
  its endpoint confidences and robustified with a Huber loss. Alpha is
  optimized in log space, so it stays positive.
* metric depth: externally supplied metric depth rasters are sampled at
  projected joint pixels; alpha is the confidence-weighted mean ratio of
  sampled metric depth over the joint's camera-space depth.

`apply_scale` multiplies every 3D position and camera translation by
alpha, leaving rotations, intrinsics, distortion and confidences
untouched, which preserves all reprojection residuals exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .camgeom import CameraModel, Pose, project_many
from .errors import NoDepthSamples, NonPositiveScale, NoReliableBones
from .lift3d import SkeletonFrame, SkeletonSequence

logger = logging.getLogger(__name__)

__all__ = [
    "ShapePrior",
    "ScaleResult",
    "BonePriorConfig",
    "DepthScaleConfig",
    "load_shape_prior",
    "default_shape_prior",
    "estimate_scale_bone_prior",
    "estimate_scale_depth",
    "apply_scale",
    "Scene",
]


@dataclass(frozen=True)
class ShapePrior:
    """Joint-level linear body model: joints(beta) = mean + basis @ beta."""

    names: tuple[str, ...]
    bones: tuple[tuple[int, int], ...]
    mean_joints: np.ndarray       # (K, 3) meters
    shape_basis: np.ndarray       # (K, 3, n_shape) meters per unit coefficient

    def __post_init__(self):
        mean = np.asarray(self.mean_joints, dtype=float)
        basis = np.asarray(self.shape_basis, dtype=float)
        if mean.shape != (len(self.names), 3):
            raise ValueError("mean joints shape mismatch")
        if basis.shape[:2] != mean.shape:
            raise ValueError("shape basis shape mismatch")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(basis))):
            raise ValueError("prior contains non-finite values")
        for a, b in self.bones:
            if not (0 <= a < len(self.names) and 0 <= b < len(self.names)):
                raise ValueError(f"bone ({a}, {b}) references a missing joint")
        object.__setattr__(self, "mean_joints", mean)
        object.__setattr__(self, "shape_basis", basis)

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    def joints(self, beta: np.ndarray) -> np.ndarray:
        """Model joints for shape coefficients beta; exactly linear."""
        beta = np.asarray(beta, dtype=float)
        return self.mean_joints + self.shape_basis @ beta

    def bone_lengths(self, beta: np.ndarray) -> np.ndarray:
        j = self.joints(beta)
        a = np.array([p for p, _ in self.bones])
        b = np.array([q for _, q in self.bones])
        return np.linalg.norm(j[a] - j[b], axis=1)


def load_shape_prior(path: str | Path) -> ShapePrior:
    data = json.loads(Path(path).read_text())
    return ShapePrior(
        names=tuple(data["names"]),
        bones=tuple((int(a), int(b)) for a, b in data["bones"]),
        mean_joints=np.asarray(data["mean"], dtype=float),
        shape_basis=np.asarray(data["basis"], dtype=float),
    )


def default_shape_prior() -> ShapePrior:
    """The 17-joint prior shipped with the package."""
    with resources.files("camocap.assets").joinpath("shape_prior_17.json").open() as fh:
        data = json.load(fh)
    return ShapePrior(
        names=tuple(data["names"]),
        bones=tuple((int(a), int(b)) for a, b in data["bones"]),
        mean_joints=np.asarray(data["mean"], dtype=float),
        shape_basis=np.asarray(data["basis"], dtype=float),
    )


@dataclass(frozen=True)
class BonePriorConfig:
    # lambda_beta is calibrated against the mean-normalized bone loss in
    # squared meters: shape modes move bones by centimeters, so the data
    # term per unit coefficient is ~3e-4 and a heavier penalty would pin
    # the shape to the mean
    lambda_bones: float = 1.0
    lambda_beta: float = 1e-6
    huber_delta: float = 0.05     # meters
    max_iterations: int = 500


@dataclass(frozen=True)
class DepthScaleConfig:
    zeta: float = 0.5             # keypoint confidence floor for sampling
    decay: float = 500.0          # frame selection score decay


@dataclass
class ScaleResult:
    alpha: float
    beta: dict[int, np.ndarray] = field(default_factory=dict)  # per person
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.alpha > 0 and np.isfinite(self.alpha)):
            raise ValueError(f"alpha must be positive and finite, got {self.alpha}")


def _weighted_median(values: np.ndarray, weights: np.ndarray) -> float:
    order = np.argsort(values)
    v, w = values[order], weights[order]
    cum = np.cumsum(w)
    return float(v[np.searchsorted(cum, 0.5 * cum[-1])])


def _aggregate_bones(
    frames: list[SkeletonFrame], bones: tuple[tuple[int, int], ...]
) -> tuple[np.ndarray, np.ndarray]:
    """Per-bone raw length (confidence-weighted median over frames) and
    confidence (median of the per-frame geometric-mean endpoint scores)."""
    n = len(bones)
    lengths = np.zeros(n)
    confs = np.zeros(n)
    for b, (i, j) in enumerate(bones):
        ls, ws = [], []
        for fr in frames:
            if fr.visible[i] and fr.visible[j]:
                s = np.sqrt(fr.confidences[i] * fr.confidences[j])
                if s > 0:
                    ls.append(np.linalg.norm(fr.joints[i] - fr.joints[j]))
                    ws.append(s)
        if ls:
            ls, ws = np.array(ls), np.array(ws)
            lengths[b] = _weighted_median(ls, ws)
            confs[b] = float(np.median(ws))
    return lengths, confs


def _huber(r: np.ndarray, delta: float) -> np.ndarray:
    out = 0.5 * r**2
    tail = np.abs(r) > delta
    out[tail] = delta * (np.abs(r[tail]) - 0.5 * delta)
    return out


def _huber_grad(r: np.ndarray, delta: float) -> np.ndarray:
    return np.clip(r, -delta, delta)


def estimate_scale_bone_prior(
    skeletons: SkeletonSequence,
    prior: ShapePrior,
    cfg: BonePriorConfig = BonePriorConfig(),
) -> ScaleResult:
    """Recover alpha (and per-person shape coefficients) from bone lengths.

    Bone observations are aggregated over frames by confidence-weighted
    median before optimization. The initial alpha is the confidence-
    weighted mean ratio between the mean-shape bone lengths and the raw
    (unscaled) observed lengths; L-BFGS then minimizes the Huber bone
    consistency loss plus the squared-norm shape penalty over
    (log alpha, beta per person).
    """
    by_person: dict[int, list[SkeletonFrame]] = {}
    for fr in skeletons:
        by_person.setdefault(fr.person_id, []).append(fr)
    if not by_person:
        raise NoReliableBones("no skeleton frames")

    persons = sorted(by_person)
    bone_data = {}
    for pid in persons:
        lengths, confs = _aggregate_bones(by_person[pid], prior.bones)
        usable = (confs > 0) & (lengths > 0)
        if np.any(usable):
            bone_data[pid] = (lengths, confs, usable)
    if not bone_data:
        raise NoReliableBones("no bone has positive confidence at both endpoints")
    persons = [p for p in persons if p in bone_data]

    model_mean_lengths = prior.bone_lengths(np.zeros(prior.n_shape))
    num = 0.0
    den = 0.0
    for pid in persons:
        lengths, confs, usable = bone_data[pid]
        num += float(np.sum(confs[usable] * model_mean_lengths[usable] / lengths[usable]))
        den += float(np.sum(confs[usable]))
    alpha0 = num / den

    n_shape = prior.n_shape
    edge_a = np.array([a for a, _ in prior.bones])
    edge_b = np.array([b for _, b in prior.bones])

    def unpack(x):
        alpha = np.exp(x[0])
        betas = {
            pid: x[1 + k * n_shape : 1 + (k + 1) * n_shape]
            for k, pid in enumerate(persons)
        }
        return alpha, betas

    def objective(x):
        alpha, betas = unpack(x)
        value = 0.0
        grad = np.zeros_like(x)
        for k, pid in enumerate(persons):
            lengths, confs, usable = bone_data[pid]
            beta = betas[pid]
            joints = prior.joints(beta)
            diff = joints[edge_a] - joints[edge_b]
            model_len = np.linalg.norm(diff, axis=1)
            r = alpha * lengths - model_len
            w = confs * usable
            wsum = w.sum()
            value += cfg.lambda_bones * float(np.sum(w * _huber(r, cfg.huber_delta))) / wsum
            hg = _huber_grad(r, cfg.huber_delta)
            # d r / d log alpha = alpha * raw length
            grad[0] += cfg.lambda_bones * float(np.sum(w * hg * alpha * lengths)) / wsum
            # d model_len / d beta via the basis difference per bone
            basis_diff = prior.shape_basis[edge_a] - prior.shape_basis[edge_b]
            unit = diff / np.maximum(model_len[:, None], 1e-12)
            dlen = np.einsum("bi,bis->bs", unit, basis_diff)
            gb = -cfg.lambda_bones * np.einsum("b,bs->s", w * hg, dlen) / wsum
            gb += 2.0 * cfg.lambda_beta * beta
            value += cfg.lambda_beta * float(beta @ beta)
            grad[1 + k * n_shape : 1 + (k + 1) * n_shape] = gb
        return value, grad

    x0 = np.concatenate([[np.log(alpha0)], np.zeros(n_shape * len(persons))])
    result = minimize(
        objective,
        x0,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": cfg.max_iterations, "gtol": 1e-12, "ftol": 1e-15},
    )
    alpha, betas = unpack(result.x)
    residuals = {}
    for pid in persons:
        lengths, confs, usable = bone_data[pid]
        model_len = prior.bone_lengths(betas[pid])
        residuals[pid] = (alpha * lengths - model_len)[usable]
    logger.debug("bone-prior scale %.6g (init %.6g)", alpha, alpha0)
    return ScaleResult(
        alpha=float(alpha),
        beta={pid: betas[pid].copy() for pid in persons},
        diagnostics={
            "alpha_init": alpha0,
            "objective": float(result.fun),
            "bone_residuals_m": {p: r.tolist() for p, r in residuals.items()},
        },
    )


def estimate_scale_depth(
    skeletons: SkeletonSequence,
    cameras: dict[str, CameraModel],
    depth_maps: dict[str, dict[int, np.ndarray]],
    cfg: DepthScaleConfig = DepthScaleConfig(),
    timeline=None,
) -> ScaleResult:
    """Recover alpha from metric depth rasters.

    `depth_maps` maps camera id to {camera frame index: raster}. Per view
    the raster frame with the best agreement score is selected: the mean
    over joints of exp(-decay * residual / fx), where the residual is the
    distance between the reprojected joint and the recorded 2D detection.
    Detections come from `timeline` (a DetectionTimeline); without one,
    camera frame indices are assumed to equal timeline group indices and
    the stored 3D confidences rank the frames instead.

    Depth is sampled at the projected pixel (distortion applied, nearest
    pixel), skipping NaN and out-of-bounds samples; joints below the
    confidence floor zeta are ignored. Alpha is the confidence-weighted
    mean of metric-over-scene depth ratios across all views.
    """
    frames_by_group: dict[int, list[SkeletonFrame]] = {}
    for fr in skeletons:
        frames_by_group.setdefault(fr.frame_index, []).append(fr)

    ratios, weights, per_view = [], [], {}
    for cam_id in sorted(depth_maps):
        cam = cameras[cam_id]
        available = depth_maps[cam_id]
        if not available:
            continue
        local_to_group = None
        if timeline is not None:
            ctl = timeline.cameras[cam_id]
            local_to_group = {}
            for gidx, group in enumerate(timeline.groups):
                if cam_id in group.members:
                    local = ctl.frames[group.members[cam_id]].frame_index
                    local_to_group[local] = gidx

        best = None  # (score, -local_idx, local_idx, gidx)
        for local_idx in sorted(available):
            gidx = (
                local_to_group.get(local_idx)
                if local_to_group is not None
                else local_idx
            )
            if gidx is None or gidx not in frames_by_group:
                continue
            score = _frame_agreement(
                frames_by_group[gidx], cam_id, cam, cfg, timeline, gidx
            )
            if score is not None and (best is None or score > best[0]):
                best = (score, local_idx, gidx)
        if best is None:
            continue
        _, local_idx, gidx = best
        raster = np.asarray(available[local_idx], dtype=float)

        samples = 0
        for fr in frames_by_group[gidx]:
            det_conf = _detection_confidences(timeline, cam_id, gidx, fr)
            conf = det_conf if det_conf is not None else fr.confidences
            keep = np.nonzero(fr.visible & (conf > cfg.zeta))[0]
            if keep.size == 0:
                continue
            pts = fr.joints[keep]
            cam_pts = cam.pose.transform(pts)
            proj, valid = project_many(pts, cam)
            for row, j in enumerate(keep):
                if not valid[row]:
                    continue
                u = int(round(proj[row, 0]))
                v = int(round(proj[row, 1]))
                if not (0 <= u < raster.shape[1] and 0 <= v < raster.shape[0]):
                    continue
                d_metric = raster[v, u]
                d_scene = cam_pts[row, 2]
                if np.isnan(d_metric) or d_metric <= 0 or d_scene <= 0:
                    continue
                ratios.append(d_metric / d_scene)
                weights.append(float(conf[j]))
                samples += 1
        per_view[cam_id] = {"frame": local_idx, "samples": samples}
    if not ratios:
        raise NoDepthSamples("no valid depth sample above the confidence floor")
    ratios = np.array(ratios)
    weights = np.array(weights)
    alpha = float(np.sum(weights * ratios) / np.sum(weights))
    logger.debug("depth scale %.6g from %d samples", alpha, len(ratios))
    return ScaleResult(alpha=alpha, diagnostics={"views": per_view})


def _detection_confidences(timeline, cam_id, gidx, frame: SkeletonFrame):
    """Per-joint 2D detection confidences for one view, if recoverable."""
    if timeline is None:
        return None
    group = timeline.groups[gidx]
    if cam_id not in group.members:
        return None
    det = timeline.cameras[cam_id].frames[group.members[cam_id]]
    kp = det.persons.get(frame.person_id)
    return kp[:, 2] if kp is not None else None


def _frame_agreement(frames, cam_id, cam, cfg, timeline, gidx):
    """Mean exp(-decay * focal-normalized reprojection residual) over joints."""
    scores = []
    for fr in frames:
        vis = np.nonzero(fr.visible)[0]
        if vis.size == 0:
            continue
        proj, valid = project_many(fr.joints[vis], cam)
        if timeline is not None:
            group = timeline.groups[gidx]
            if cam_id not in group.members:
                continue
            det = timeline.cameras[cam_id].frames[group.members[cam_id]]
            kp = det.persons.get(fr.person_id)
            if kp is None:
                continue
            ok = valid & (kp[vis, 2] > 0)
            if not ok.any():
                continue
            residual = np.linalg.norm(proj[ok] - kp[vis][ok, :2], axis=1)
            scores.append(float(np.mean(np.exp(-cfg.decay * residual / cam.intrinsics.fx))))
        else:
            conf = np.clip(fr.confidences[vis], 0.0, 1.0)
            if valid.any():
                scores.append(float(np.mean(conf[valid])))
    if not scores:
        return None
    return float(np.mean(scores))


@dataclass
class Scene:
    """A reconstruction bundle: cameras, skeletons and point clouds."""

    cameras: dict[str, CameraModel]
    skeletons: SkeletonSequence
    point_clouds: dict[str, np.ndarray] = field(default_factory=dict)


def apply_scale(scene: Scene, alpha: float) -> Scene:
    """Scale all 3D positions and camera translations by alpha.

    Rotations, intrinsics, distortion and confidences are unchanged, so
    every reprojection residual is preserved.
    """
    if not (alpha > 0 and np.isfinite(alpha)):
        raise NonPositiveScale(f"scale must be positive, got {alpha}")
    cameras = {
        cid: cam.with_pose(Pose(cam.pose.q, cam.pose.t * alpha))
        for cid, cam in scene.cameras.items()
    }
    frames = [
        SkeletonFrame(
            fr.frame_index,
            fr.person_id,
            fr.joints * alpha,
            fr.confidences.copy(),
            fr.visible.copy(),
        )
        for fr in scene.skeletons
    ]
    clouds = {k: v * alpha for k, v in scene.point_clouds.items()}
    return Scene(cameras, SkeletonSequence(frames), clouds)
