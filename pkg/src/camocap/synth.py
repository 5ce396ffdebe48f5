"""Synthetic multi-camera scenes with exact ground truth.

A scene holds cameras on a ring looking at the working volume, a
prior-generated skeleton animated by a bounded random walk plus small
per-joint oscillation, noisy 2D detections with a documented
noise-to-confidence model, lag-shifted audio tracks and metric depth
rasters. Everything derives from one seed, so identical configs produce
byte-identical datasets.

Detection confidence model: a detection displaced by gaussian noise n
gets confidence ``clamp(exp(-|n| / (4 * sigma)) + jitter, 0, 1)`` with
jitter uniform in [-0.05, 0.05]; occluded joints instead get uniform
confidence in [0, 0.2] and a large uniform position error. This makes
confidence genuinely informative about error magnitude, which the
confidence-weighted stages rely on.

Depth rasters contain the camera-space z of the scene surface (ground
plane plus per-joint discs) along each pixel's ray, NaN where the ray
escapes; sampling one at a projected ground-truth joint returns that
joint's depth up to pixel quantization.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audiosync import AudioTrack, save_wav
from .camgeom import (
    CameraModel,
    Distortion,
    Intrinsics,
    Pose,
    project_many,
    quat_from_axis_angle,
    quat_multiply,
    quat_normalize,
    save_cameras,
    undistort_points,
)
from .errors import InvalidConfig
from .keystore import SkeletonDef
from .lift3d import SkeletonFrame, SkeletonSequence, write_depth_map, write_skeletons
from .metricscale import ShapePrior, default_shape_prior

logger = logging.getLogger(__name__)

__all__ = ["SceneConfig", "SyntheticScene", "generate_scene", "perturb_cameras", "write_dataset"]


@dataclass(frozen=True)
class SceneConfig:
    n_cameras: int = 6
    ring_radius: float = 3.0          # meters
    ring_height: float = 1.6
    height_jitter: float = 0.15
    image_width: int = 1280
    image_height: int = 720
    focal_range: tuple[float, float] = (950.0, 1150.0)
    k1_range: tuple[float, float] = (-0.3, -0.1)
    k2_range: tuple[float, float] = (0.0, 0.02)
    p_range: tuple[float, float] = (-0.001, 0.001)
    k3_range: tuple[float, float] = (0.0, 0.0)
    n_frames: int = 500
    frame_rate: float = 50.0
    n_persons: int = 1
    beta_scale: float = 1.0           # std of sampled shape coefficients
    walk_extent: float = 0.8          # root random-walk bound, meters
    oscillation_amp: float = 0.012    # per-joint wobble, meters
    noise_sigma: float = 1.0          # detection noise, pixels
    occlusion_rate: float = 0.1
    audio_lag_range: tuple[float, float] = (-2.0, 2.0)
    audio_sample_rate: int = 48000
    depth_frames: tuple[int, ...] = (0,)
    seed: int = 0

    def __post_init__(self):
        if self.n_cameras < 2:
            raise InvalidConfig("need at least two cameras")
        if self.n_frames < 1 or self.frame_rate <= 0:
            raise InvalidConfig("need frames at a positive rate")
        if not (0.0 <= self.occlusion_rate <= 1.0):
            raise InvalidConfig("occlusion rate must be in [0, 1]")
        if self.noise_sigma < 0:
            raise InvalidConfig("noise sigma must be nonnegative")


@dataclass
class SyntheticScene:
    config: SceneConfig
    cameras: dict[str, CameraModel]            # ground truth, metric
    skeletons: SkeletonSequence                # ground truth joints, metric
    skeleton_def: SkeletonDef
    detections: dict[str, list[dict]]          # JSONL-ready records per camera
    audio: dict[str, AudioTrack]
    audio_lags: dict[str, float]               # content delay vs reference, s
    depth_maps: dict[str, dict[int, np.ndarray]]
    betas: dict[int, np.ndarray]
    frame_rates: dict[str, float] = field(default_factory=dict)

    @property
    def reference_camera(self) -> str:
        return sorted(self.cameras)[0]


def _lookat(center: np.ndarray, target: np.ndarray) -> Pose:
    z = target - center
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(z, up)
    n = np.linalg.norm(x)
    x = np.array([1.0, 0.0, 0.0]) if n < 1e-9 else x / n
    y = np.cross(z, x)
    rot = np.vstack([x, y, z])
    return Pose.from_rt(rot, -rot @ center)


def _make_cameras(cfg: SceneConfig, rng: np.random.Generator) -> dict[str, CameraModel]:
    cams = {}
    target = np.array([0.0, 0.0, 1.0])
    for k in range(cfg.n_cameras):
        ang = 2 * np.pi * k / cfg.n_cameras
        center = np.array(
            [
                cfg.ring_radius * np.cos(ang),
                cfg.ring_radius * np.sin(ang),
                cfg.ring_height + rng.uniform(-cfg.height_jitter, cfg.height_jitter),
            ]
        )
        focal = rng.uniform(*cfg.focal_range)
        intr = Intrinsics(
            fx=focal,
            fy=focal,
            cx=cfg.image_width / 2.0,
            cy=cfg.image_height / 2.0,
            width=cfg.image_width,
            height=cfg.image_height,
        )
        dist = Distortion(
            k1=rng.uniform(*cfg.k1_range),
            k2=rng.uniform(*cfg.k2_range),
            k3=rng.uniform(*cfg.k3_range),
            p1=rng.uniform(*cfg.p_range),
            p2=rng.uniform(*cfg.p_range),
        )
        cams[f"cam{k:02d}"] = CameraModel(intr, dist, _lookat(center, target))
    return cams


def _animate_skeletons(
    cfg: SceneConfig, prior: ShapePrior, rng: np.random.Generator
) -> tuple[SkeletonSequence, dict[int, np.ndarray]]:
    betas = {}
    rest: dict[int, np.ndarray] = {}
    for pid in range(cfg.n_persons):
        beta = rng.normal(0.0, cfg.beta_scale, prior.n_shape)
        betas[pid] = beta
        rest[pid] = prior.joints(beta)

    n_joints = len(prior.names)
    phases = rng.uniform(0, 2 * np.pi, (cfg.n_persons, n_joints, 3))
    freqs = rng.uniform(0.5, 2.0, (cfg.n_persons, n_joints, 3))
    frames = []
    roots = {
        pid: np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), 0.0])
        for pid in range(cfg.n_persons)
    }
    headings = {pid: rng.uniform(0, 2 * np.pi) for pid in range(cfg.n_persons)}
    for f in range(cfg.n_frames):
        t = f / cfg.frame_rate
        for pid in range(cfg.n_persons):
            step = rng.normal(0.0, 0.01, 2)
            roots[pid][:2] = np.clip(roots[pid][:2] + step, -cfg.walk_extent, cfg.walk_extent)
            headings[pid] += rng.normal(0.0, 0.02)
            rot = quat_from_axis_angle([0, 0, 1], headings[pid])
            from .camgeom import quat_to_matrix

            r = quat_to_matrix(rot)
            pelvis = rest[pid][0]
            joints = (rest[pid] - pelvis) @ r.T + pelvis + roots[pid]
            joints = joints + cfg.oscillation_amp * np.sin(
                2 * np.pi * freqs[pid] * t + phases[pid]
            )
            frames.append(
                SkeletonFrame(
                    frame_index=f,
                    person_id=pid,
                    joints=joints,
                    confidences=np.ones(n_joints),
                    visible=np.ones(n_joints, dtype=bool),
                )
            )
    return SkeletonSequence(frames), betas


def _detect(
    cfg: SceneConfig,
    cameras: dict[str, CameraModel],
    skeletons: SkeletonSequence,
    rng: np.random.Generator,
) -> dict[str, list[dict]]:
    detections: dict[str, list[dict]] = {cid: [] for cid in cameras}
    sigma_conf = 4.0 * max(cfg.noise_sigma, 0.5)
    for cam_id in sorted(cameras):
        cam = cameras[cam_id]
        for fr in skeletons:
            pix, valid = project_many(fr.joints, cam)
            n_joints = len(fr.joints)
            noise = rng.normal(0.0, cfg.noise_sigma, (n_joints, 2))
            occluded = rng.uniform(size=n_joints) < cfg.occlusion_rate
            jitter = rng.uniform(-0.05, 0.05, n_joints)
            occ_noise = rng.uniform(-30.0, 30.0, (n_joints, 2))
            occ_conf = rng.uniform(0.0, 0.2, n_joints)
            rows = np.zeros((n_joints, 3))
            for j in range(n_joints):
                if not valid[j]:
                    continue
                u, v = pix[j]
                if not (-0.25 * cfg.image_width <= u < 1.25 * cfg.image_width):
                    continue
                if not (-0.25 * cfg.image_height <= v < 1.25 * cfg.image_height):
                    continue
                if occluded[j]:
                    rows[j, :2] = pix[j] + occ_noise[j]
                    rows[j, 2] = occ_conf[j]
                else:
                    rows[j, :2] = pix[j] + noise[j]
                    conf = np.exp(-np.linalg.norm(noise[j]) / sigma_conf) + jitter[j]
                    rows[j, 2] = np.clip(conf, 0.0, 1.0)
            detections[cam_id].append(
                {
                    "camera_id": cam_id,
                    "frame_index": fr.frame_index,
                    "person_id": fr.person_id,
                    "keypoints": [[float(a), float(b), float(c)] for a, b, c in rows],
                }
            )
    return detections


def _make_audio(
    cfg: SceneConfig, camera_ids: list[str], rng: np.random.Generator
) -> tuple[dict[str, AudioTrack], dict[str, float]]:
    fs = cfg.audio_sample_rate
    duration = cfg.n_frames / cfg.frame_rate + 2.0
    n = int(duration * fs)
    max_lag = max(abs(cfg.audio_lag_range[0]), abs(cfg.audio_lag_range[1]))
    pad = int(np.ceil(max_lag * fs)) + 1
    master = rng.normal(0.0, 0.2, n + 2 * pad)
    lags = {}
    tracks = {}
    for k, cam_id in enumerate(sorted(camera_ids)):
        if k == 0:
            lag = 0.0
        else:
            lag = float(rng.uniform(*cfg.audio_lag_range))
        shift = int(round(lag * fs))
        lags[cam_id] = shift / fs
        start = pad - shift
        track = master[start : start + n] + rng.normal(0.0, 0.02, n)
        tracks[cam_id] = AudioTrack(np.clip(track, -1.0, 1.0), float(fs))
    return tracks, lags


def _render_depth(
    cfg: SceneConfig,
    cam: CameraModel,
    skeletons_at_frame: list[SkeletonFrame],
    splat_px: int = 2,
) -> np.ndarray:
    """Z-depth raster: ground plane plus discs at the joints, NaN sky."""
    intr = cam.intrinsics
    us, vs = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    pix = np.column_stack([us.ravel(), vs.ravel()]).astype(float)
    xy = intr.normalize(undistort_points(pix, intr, cam.distortion))
    rot = cam.pose.rotation
    center = cam.pose.center()
    dirs = np.column_stack([xy[:, 0], xy[:, 1], np.ones(len(xy))]) @ rot
    # ray: p = center + s * dirs_world, ground plane z = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        s = -center[2] / dirs[:, 2]
    depth = np.where((s > 0) & np.isfinite(s), s, np.nan)
    raster = depth.reshape(intr.height, intr.width)
    # joint discs: exact camera-space z, kept when nearer than the plane
    for fr in skeletons_at_frame:
        cam_pts = cam.pose.transform(fr.joints)
        proj, valid = project_many(fr.joints, cam)
        for j in range(len(fr.joints)):
            if not valid[j]:
                continue
            u, v = int(round(proj[j, 0])), int(round(proj[j, 1]))
            z = cam_pts[j, 2]
            for dv in range(-splat_px, splat_px + 1):
                for du in range(-splat_px, splat_px + 1):
                    uu, vv = u + du, v + dv
                    if 0 <= uu < intr.width and 0 <= vv < intr.height:
                        old = raster[vv, uu]
                        if np.isnan(old) or z < old:
                            raster[vv, uu] = z
    return raster


def generate_scene(config: SceneConfig) -> SyntheticScene:
    """Build the full synthetic scene; the seed determines every byte."""
    rng = np.random.default_rng(config.seed)
    prior = default_shape_prior()
    cameras = _make_cameras(config, rng)
    skeletons, betas = _animate_skeletons(config, prior, rng)
    detections = _detect(config, cameras, skeletons, rng)
    audio, lags = _make_audio(config, list(cameras), rng)
    by_frame: dict[int, list[SkeletonFrame]] = {}
    for fr in skeletons:
        by_frame.setdefault(fr.frame_index, []).append(fr)
    depth_maps = {
        cam_id: {
            f: _render_depth(config, cameras[cam_id], by_frame.get(f, []))
            for f in config.depth_frames
        }
        for cam_id in sorted(cameras)
    }
    skeleton_def = SkeletonDef(
        names=prior.names, bones=tuple((a, b) for a, b in prior.bones)
    )
    return SyntheticScene(
        config=config,
        cameras=cameras,
        skeletons=skeletons,
        skeleton_def=skeleton_def,
        detections=detections,
        audio=audio,
        audio_lags=lags,
        depth_maps=depth_maps,
        betas=betas,
        frame_rates={cid: config.frame_rate for cid in cameras},
    )


def perturb_cameras(
    cameras: dict[str, CameraModel],
    rot_deg: float = 0.0,
    trans_frac: float = 0.0,
    focal_frac: float = 0.0,
    dist_delta: float = 0.0,
    seed: int = 0,
    keep_first: bool = True,
) -> tuple[dict[str, CameraModel], dict[str, dict]]:
    """Perturb cameras by exactly the stated magnitudes.

    Rotations move by `rot_deg` about a random axis, translations by a
    random direction of norm `trans_frac` times the mean pairwise camera
    center distance, focal lengths scale by (1 + focal_frac), and each
    distortion coefficient shifts uniformly within [-dist_delta,
    dist_delta]. The first camera (sorted order) stays untouched when
    `keep_first`, matching the gauge convention. Returns the perturbed
    cameras and the exact perturbations applied.
    """
    rng = np.random.default_rng(seed)
    ids = sorted(cameras)
    centers = np.stack([cameras[c].pose.center() for c in ids])
    dists = [
        np.linalg.norm(centers[i] - centers[j])
        for i in range(len(ids))
        for j in range(i + 1, len(ids))
    ]
    baseline = float(np.mean(dists)) if dists else 1.0
    out = {}
    applied = {}
    for k, cam_id in enumerate(ids):
        cam = cameras[cam_id]
        if keep_first and k == 0:
            out[cam_id] = cam
            applied[cam_id] = {"rot_deg": 0.0, "trans": [0.0, 0.0, 0.0], "focal_scale": 1.0}
            continue
        axis = rng.normal(size=3)
        dq = quat_from_axis_angle(axis, np.deg2rad(rot_deg))
        q = quat_normalize(quat_multiply(dq, cam.pose.q))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        dt = direction * trans_frac * baseline
        pose = Pose(q, cam.pose.t + dt)
        intr = Intrinsics(
            fx=cam.intrinsics.fx * (1.0 + focal_frac),
            fy=cam.intrinsics.fy * (1.0 + focal_frac),
            cx=cam.intrinsics.cx,
            cy=cam.intrinsics.cy,
            width=cam.intrinsics.width,
            height=cam.intrinsics.height,
        )
        shift = rng.uniform(-dist_delta, dist_delta, 5) if dist_delta else np.zeros(5)
        d = cam.distortion
        dist = Distortion(
            k1=d.k1 + shift[0], k2=d.k2 + shift[1], k3=d.k3 + shift[2],
            p1=d.p1 + shift[3], p2=d.p2 + shift[4],
        )
        out[cam_id] = CameraModel(intr, dist, pose)
        applied[cam_id] = {
            "rot_deg": rot_deg,
            "trans": dt.tolist(),
            "focal_scale": 1.0 + focal_frac,
            "dist_shift": shift.tolist(),
        }
    return out, applied


def write_dataset(scene: SyntheticScene, root: str | Path) -> None:
    """Write the scene as a pipeline input directory plus ground truth.

    Layout: keypoints/<cam>.jsonl, skeleton.json, audio/<cam>.wav,
    depth/<cam>/<frame>.kdm, meta.json, and ground_truth/ holding the
    metric cameras, skeletons, per-camera content lags and shape
    coefficients.
    """
    root = Path(root)
    (root / "keypoints").mkdir(parents=True, exist_ok=True)
    (root / "audio").mkdir(exist_ok=True)
    (root / "ground_truth").mkdir(exist_ok=True)

    for cam_id, records in scene.detections.items():
        with open(root / "keypoints" / f"{cam_id}.jsonl", "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    (root / "skeleton.json").write_text(
        json.dumps(
            {
                "names": list(scene.skeleton_def.names),
                "bones": [list(b) for b in scene.skeleton_def.bones],
            },
            sort_keys=True,
        )
        + "\n"
    )

    for cam_id, track in scene.audio.items():
        save_wav(root / "audio" / f"{cam_id}.wav", track)

    for cam_id, frames in scene.depth_maps.items():
        ddir = root / "depth" / cam_id
        ddir.mkdir(parents=True, exist_ok=True)
        for fidx, raster in frames.items():
            write_depth_map(ddir / f"{fidx:06d}.kdm", raster)

    meta = {
        "reference_camera": scene.reference_camera,
        "cameras": {
            cid: {
                "frame_rate": scene.frame_rates[cid],
                "width": scene.cameras[cid].intrinsics.width,
                "height": scene.cameras[cid].intrinsics.height,
            }
            for cid in sorted(scene.cameras)
        },
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    save_cameras(root / "ground_truth" / "cameras.json", scene.cameras, units="m")
    write_skeletons(root / "ground_truth" / "skeletons.jsonl", scene.skeletons)
    (root / "ground_truth" / "sync.json").write_text(
        json.dumps(scene.audio_lags, indent=2, sort_keys=True) + "\n"
    )
    (root / "ground_truth" / "shape.json").write_text(
        json.dumps({str(p): b.tolist() for p, b in scene.betas.items()}, sort_keys=True)
        + "\n"
    )
