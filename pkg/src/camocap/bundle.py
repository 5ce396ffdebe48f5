"""Three-pass bundle adjustment over a confidence-selected point subset.

The objective is the confidence-weighted, Huber-robustified mean of
reprojection residual norms:

    L = sum_n w_n * huber_delta(|proj(X_n) - pix_n|) / sum_n w_n

Pass one frees camera poses (except the gauge camera) and points, pass
two adds focal lengths, pass three adds Brown-Conrady coefficients; the
principal point stays fixed throughout. Each pass runs Levenberg-
Marquardt with analytic Jacobians, eliminating the point blocks through
the Schur complement so the damped solve happens only on the small
camera system. Steps are accepted only when the true objective
decreases, which makes the reported objective trace non-increasing by
construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .camgeom import (
    CameraModel,
    Distortion,
    Intrinsics,
    Pose,
    distortion_jacobian,
    distort_normalized,
    quat_from_rotvec,
    quat_multiply,
    quat_normalize,
    quat_to_matrix,
    triangulate_weighted_dlt,
    undistort_points,
)
from .errors import (
    DegenerateGeometry,
    DivergedPass,
    InsufficientViews,
    InvalidDistortion,
    NoTriangulablePoints,
    RankDeficient,
)
from .keystore import DetectionTimeline

logger = logging.getLogger(__name__)

__all__ = [
    "BaConfig",
    "BaProblem",
    "PassReport",
    "select_ba_points",
    "run_bundle_adjustment",
    "DEFAULT_PASSES",
]

DEFAULT_PASSES = ("pose", "focal", "distortion")

# distortion coefficient order used throughout this module
_DIST_FIELDS = ("k1", "k2", "k3", "p1", "p2")


@dataclass(frozen=True)
class BaConfig:
    huber_delta: float = 2.0            # pixels
    max_iterations: int = 50            # per pass
    tie_focal: bool = True              # single focal scale, aspect fixed
    free_distortion: tuple[bool, bool, bool, bool, bool] = (True,) * 5
    ftol: float = 1e-12
    lm_lambda0: float = 1e-6
    retriangulate_focal_change: float = 0.05


@dataclass
class BaProblem:
    camera_ids: list[str]
    cameras: list[CameraModel]
    points: np.ndarray            # (P, 3)
    obs_cam: np.ndarray           # (N,) camera indices
    obs_pt: np.ndarray            # (N,) point indices
    obs_px: np.ndarray            # (N, 2) raw (distorted) pixels
    obs_w: np.ndarray             # (N,) confidence weights in [0, 1]
    huber_delta: float = 2.0
    gauge_index: int | None = 0   # camera whose pose never moves

    def __post_init__(self):
        counts = np.bincount(self.obs_pt, weights=(self.obs_w > 0), minlength=len(self.points))
        if np.any(counts < 2):
            bad = int(np.count_nonzero(counts < 2))
            raise ValueError(f"{bad} points have fewer than two weighted observations")
        if np.any((self.obs_w < 0) | (self.obs_w > 1)):
            raise ValueError("observation weights must lie in [0, 1]")


@dataclass
class PassReport:
    name: str
    iterations: int
    initial_objective: float
    final_objective: float
    rms_px: float                 # per-axis RMS of residuals over weighted obs
    objective_trace: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "pass": self.name,
            "iterations": self.iterations,
            "initial_objective": self.initial_objective,
            "final_objective": self.final_objective,
            "rms_px": self.rms_px,
        }


def select_ba_points(
    timeline: DetectionTimeline,
    cameras: dict[str, CameraModel],
    kappa: float = 0.5,
    budget: int = 5000,
    seed: int = 0,
    huber_delta: float = 2.0,
    gauge_camera: str | None = None,
) -> BaProblem:
    """Pick keypoints confidently seen in two or more views and build a problem.

    A keypoint qualifies when at least two views exceed the confidence
    threshold kappa. Qualifying keypoints are uniformly subsampled to the
    budget with a seeded generator, then triangulated by weighted DLT
    using the current cameras to initialize the 3D points. Observations
    with nonpositive initial depth are dropped, and points left with
    fewer than two views are discarded.
    """
    cam_ids = sorted(cameras)
    cam_pos = {cid: k for k, cid in enumerate(cam_ids)}
    candidates = []
    for gidx, group in enumerate(timeline.groups):
        persons: dict[int, list[tuple[str, np.ndarray]]] = {}
        for cam_id, fpos in group.members.items():
            frame = timeline.cameras[cam_id].frames[fpos]
            for pid, kp in frame.persons.items():
                persons.setdefault(pid, []).append((cam_id, kp))
        for pid, views in persons.items():
            if len(views) < 2:
                continue
            confs = np.stack([kp[:, 2] for _, kp in views])
            strong = (confs > kappa).sum(axis=0)
            for joint in np.nonzero(strong >= 2)[0]:
                candidates.append((gidx, pid, int(joint), views))
    if not candidates:
        raise NoTriangulablePoints("no keypoint is confident in two or more views")

    rng = np.random.default_rng(seed)
    if len(candidates) > budget:
        chosen = rng.choice(len(candidates), size=budget, replace=False)
        candidates = [candidates[int(i)] for i in chosen]

    points, obs_cam, obs_pt, obs_px, obs_w = [], [], [], [], []
    for gidx, pid, joint, views in candidates:
        obs = []
        for cam_id, kp in views:
            w = float(kp[joint, 2])
            if w <= 0:
                continue
            cam = cameras[cam_id]
            pix = undistort_points(kp[joint, :2], cam.intrinsics, cam.distortion)[0]
            obs.append((cam_pos[cam_id], pix, w, kp[joint, :2]))
        if len(obs) < 2:
            continue
        try:
            xyz = triangulate_weighted_dlt(
                [(ci, px, w) for ci, px, w, _ in obs],
                [cameras[cid] for cid in cam_ids],
            )
        except (InsufficientViews, DegenerateGeometry):
            continue
        kept = []
        for ci, _, w, raw in obs:
            z = cameras[cam_ids[ci]].pose.transform(xyz)[0, 2]
            if z > 0:
                kept.append((ci, raw, w))
        if len(kept) < 2:
            continue
        pt_index = len(points)
        points.append(xyz)
        for ci, raw, w in kept:
            obs_cam.append(ci)
            obs_pt.append(pt_index)
            obs_px.append(raw)
            obs_w.append(w)
    if not points:
        raise NoTriangulablePoints("triangulation failed for every candidate keypoint")

    gauge = cam_pos[gauge_camera] if gauge_camera is not None else 0
    return BaProblem(
        camera_ids=cam_ids,
        cameras=[cameras[cid] for cid in cam_ids],
        points=np.array(points),
        obs_cam=np.array(obs_cam),
        obs_pt=np.array(obs_pt),
        obs_px=np.array(obs_px),
        obs_w=np.array(obs_w),
        huber_delta=huber_delta,
        gauge_index=gauge,
    )


class _State:
    """Mutable camera and point parameters in array form."""

    def __init__(self, cameras: list[CameraModel], points: np.ndarray):
        self.quats = np.stack([c.pose.q for c in cameras])
        self.ts = np.stack([c.pose.t for c in cameras])
        self.fx = np.array([c.intrinsics.fx for c in cameras], dtype=float)
        self.fy = np.array([c.intrinsics.fy for c in cameras], dtype=float)
        self.aspect = self.fy / self.fx
        self.cx = np.array([c.intrinsics.cx for c in cameras])
        self.cy = np.array([c.intrinsics.cy for c in cameras])
        self.dist = np.stack([c.distortion.as_array() for c in cameras])
        self.points = np.array(points, dtype=float)
        self.templates = cameras

    def copy(self) -> "_State":
        out = object.__new__(_State)
        out.quats = self.quats.copy()
        out.ts = self.ts.copy()
        out.fx = self.fx.copy()
        out.fy = self.fy.copy()
        out.aspect = self.aspect
        out.cx = self.cx
        out.cy = self.cy
        out.dist = self.dist.copy()
        out.points = self.points.copy()
        out.templates = self.templates
        return out

    def rotations(self) -> np.ndarray:
        return np.stack([quat_to_matrix(q) for q in self.quats])

    def to_cameras(self) -> list[CameraModel]:
        out = []
        for k, tpl in enumerate(self.templates):
            intr = replace(tpl.intrinsics, fx=float(self.fx[k]), fy=float(self.fy[k]))
            d = self.dist[k]
            dist = Distortion(k1=d[0], k2=d[1], k3=d[2], p1=d[3], p2=d[4])
            pose = Pose(quat_normalize(self.quats[k]), self.ts[k])
            out.append(CameraModel(intr, dist, pose))
        return out


def _huber(eps: np.ndarray, delta: float) -> np.ndarray:
    out = 0.5 * eps**2
    tail = eps > delta
    out[tail] = delta * (eps[tail] - 0.5 * delta)
    return out


def _residuals(state: _State, problem: BaProblem) -> tuple[np.ndarray, np.ndarray]:
    """Per-observation residual vectors and camera-frame depths."""
    rot = state.rotations()
    xc = (
        np.einsum("nij,nj->ni", rot[problem.obs_cam], state.points[problem.obs_pt])
        + state.ts[problem.obs_cam]
    )
    z = xc[:, 2]
    safe_z = np.where(z > 0, z, np.nan)
    xy = xc[:, :2] / safe_z[:, None]
    cam = problem.obs_cam
    x, y = xy[:, 0], xy[:, 1]
    k1, k2, k3 = state.dist[cam, 0], state.dist[cam, 1], state.dist[cam, 2]
    p1, p2 = state.dist[cam, 3], state.dist[cam, 4]
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = x * radial + 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
    yd = y * radial + p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
    u = state.fx[cam] * xd + state.cx[cam]
    v = state.fy[cam] * yd + state.cy[cam]
    res = np.column_stack([u, v]) - problem.obs_px
    return res, z


def _objective(state: _State, problem: BaProblem) -> float:
    res, z = _residuals(state, problem)
    if np.any(z[problem.obs_w > 0] <= 0):
        return np.inf
    eps = np.linalg.norm(res, axis=1)
    w_sum = problem.obs_w.sum()
    value = float((problem.obs_w * _huber(eps, problem.huber_delta)).sum() / w_sum)
    return value if np.isfinite(value) else np.inf


def _rms_px(state: _State, problem: BaProblem) -> float:
    res, _ = _residuals(state, problem)
    res = res[problem.obs_w > 0]
    res = res[np.all(np.isfinite(res), axis=1)]
    if res.size == 0:
        return float("nan")
    return float(np.sqrt(np.mean(res**2)))


@dataclass
class _Layout:
    """Active camera parameter layout for one pass."""

    pose: bool
    focal: bool
    distortion: bool
    tie_focal: bool
    free_dist: np.ndarray         # bool (5,)
    cam_slices: list[slice]       # per camera, into the camera block
    cam_sizes: list[int]
    total: int


def _make_layout(problem: BaProblem, stage: str, cfg: BaConfig) -> _Layout:
    pose = True
    focal = stage in ("focal", "distortion")
    distortion = stage == "distortion"
    free_dist = np.array(cfg.free_distortion, dtype=bool)
    slices, sizes = [], []
    offset = 0
    for k in range(len(problem.cameras)):
        size = 0
        if pose and k != problem.gauge_index:
            size += 6
        if focal:
            size += 1 if cfg.tie_focal else 2
        if distortion:
            size += int(free_dist.sum())
        slices.append(slice(offset, offset + size))
        sizes.append(size)
        offset += size
    return _Layout(pose, focal, distortion, cfg.tie_focal, free_dist, slices, sizes, offset)


def _linearize(state: _State, problem: BaProblem, layout: _Layout):
    """Residuals, robust weights and all Jacobian blocks at the current state.

    Returns (res, eff_w, jac_pt (N,2,3), jac_cam list per camera of
    (n_c, 2, kc), obs index arrays per camera). eff_w already folds the
    detector weight, the Huber slope and the 1/sum(w) normalization, so
    gradient = sum eff_w * J^T r and the Gauss-Newton Hessian uses the
    same weights.
    """
    rot = state.rotations()
    cam = problem.obs_cam
    res, z = _residuals(state, problem)
    eps = np.linalg.norm(res, axis=1)
    slope = np.ones_like(eps)
    tail = eps > problem.huber_delta
    slope[tail] = problem.huber_delta / eps[tail]
    eff_w = problem.obs_w * slope / problem.obs_w.sum()

    xc = (
        np.einsum("nij,nj->ni", rot[cam], state.points[problem.obs_pt])
        + state.ts[cam]
    )
    zs = xc[:, 2]
    x = xc[:, 0] / zs
    y = xc[:, 1] / zs
    k1, k2, k3 = state.dist[cam, 0], state.dist[cam, 1], state.dist[cam, 2]
    p1, p2 = state.dist[cam, 3], state.dist[cam, 4]
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    dradial = k1 + r2 * (2 * k2 + 3 * k3 * r2)

    # chain: pixel <- F - distortion - perspective <- camera point
    ddist = np.empty((len(cam), 2, 2))
    ddist[:, 0, 0] = radial + 2 * x * x * dradial + 2 * p1 * y + 6 * p2 * x
    ddist[:, 0, 1] = 2 * x * y * dradial + 2 * p1 * x + 2 * p2 * y
    ddist[:, 1, 0] = ddist[:, 0, 1]
    ddist[:, 1, 1] = radial + 2 * y * y * dradial + 6 * p1 * y + 2 * p2 * x

    dpersp = np.zeros((len(cam), 2, 3))
    inv_z = 1.0 / zs
    dpersp[:, 0, 0] = inv_z
    dpersp[:, 0, 2] = -x * inv_z
    dpersp[:, 1, 1] = inv_z
    dpersp[:, 1, 2] = -y * inv_z

    focal_mat = np.zeros((len(cam), 2, 2))
    focal_mat[:, 0, 0] = state.fx[cam]
    focal_mat[:, 1, 1] = state.fy[cam]

    dpix_dxc = np.einsum("nij,njk,nkl->nil", focal_mat, ddist, dpersp)
    jac_pt = np.einsum("nij,njk->nik", dpix_dxc, rot[cam])

    xd = x * radial + 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
    yd = y * radial + p1 * (r2 + 2 * y * y) + 2 * p2 * x * y

    jac_cam: list[np.ndarray] = []
    cam_obs: list[np.ndarray] = []
    for k in range(len(problem.cameras)):
        idx = np.nonzero(cam == k)[0]
        cam_obs.append(idx)
        kc = layout.cam_sizes[k]
        jc = np.zeros((idx.size, 2, kc))
        col = 0
        if layout.pose and k != problem.gauge_index:
            # rotation increment (left multiplication): dxc/dw = -[R X]x
            rx = -(xc[idx] - state.ts[k])
            skew = np.zeros((idx.size, 3, 3))
            skew[:, 0, 1] = -rx[:, 2]
            skew[:, 0, 2] = rx[:, 1]
            skew[:, 1, 0] = rx[:, 2]
            skew[:, 1, 2] = -rx[:, 0]
            skew[:, 2, 0] = -rx[:, 1]
            skew[:, 2, 1] = rx[:, 0]
            jc[:, :, col : col + 3] = np.einsum("nij,njk->nik", dpix_dxc[idx], skew)
            jc[:, :, col + 3 : col + 6] = dpix_dxc[idx]
            col += 6
        if layout.focal:
            if layout.tie_focal:
                jc[:, 0, col] = xd[idx]
                jc[:, 1, col] = state.aspect[k] * yd[idx]
                col += 1
            else:
                jc[:, 0, col] = xd[idx]
                jc[:, 1, col + 1] = yd[idx]
                col += 2
        if layout.distortion:
            r2i, xi, yi = r2[idx], x[idx], y[idx]
            full = np.zeros((idx.size, 2, 5))
            full[:, 0, 0] = xi * r2i
            full[:, 1, 0] = yi * r2i
            full[:, 0, 1] = xi * r2i**2
            full[:, 1, 1] = yi * r2i**2
            full[:, 0, 2] = xi * r2i**3
            full[:, 1, 2] = yi * r2i**3
            full[:, 0, 3] = 2 * xi * yi
            full[:, 1, 3] = r2i + 2 * yi**2
            full[:, 0, 4] = r2i + 2 * xi**2
            full[:, 1, 4] = 2 * xi * yi
            full[:, 0, :] *= state.fx[k]
            full[:, 1, :] *= state.fy[k]
            jc[:, :, col:] = full[:, :, layout.free_dist]
        jac_cam.append(jc)
    return res, eff_w, jac_pt, jac_cam, cam_obs


def objective_and_gradient(
    state: _State, problem: BaProblem, layout: _Layout
) -> tuple[float, np.ndarray]:
    """Objective value and its analytic gradient over all free parameters.

    Parameter order: camera blocks in camera order (pose increment,
    focal, free distortion coefficients), then point coordinates.
    """
    value = _objective(state, problem)
    res, eff_w, jac_pt, jac_cam, cam_obs = _linearize(state, problem, layout)
    grad = np.zeros(layout.total + 3 * len(state.points))
    for k, idx in enumerate(cam_obs):
        if layout.cam_sizes[k] == 0 or idx.size == 0:
            continue
        g = np.einsum("n,nik,ni->k", eff_w[idx], jac_cam[k], res[idx])
        grad[layout.cam_slices[k]] = g
    gp = np.zeros((len(state.points), 3))
    contrib = np.einsum("n,nik,ni->nk", eff_w, jac_pt, res)
    np.add.at(gp, problem.obs_pt, contrib)
    grad[layout.total :] = gp.ravel()
    return value, grad


def _apply_step(state: _State, problem: BaProblem, layout: _Layout, delta: np.ndarray) -> _State:
    out = state.copy()
    for k in range(len(problem.cameras)):
        block = delta[layout.cam_slices[k]]
        col = 0
        if layout.pose and k != problem.gauge_index:
            dq = quat_from_rotvec(block[col : col + 3])
            out.quats[k] = quat_normalize(quat_multiply(dq, out.quats[k]))
            out.ts[k] = out.ts[k] + block[col + 3 : col + 6]
            col += 6
        if layout.focal:
            if layout.tie_focal:
                out.fx[k] = out.fx[k] + block[col]
                out.fy[k] = out.fx[k] * out.aspect[k]
                col += 1
            else:
                out.fx[k] = out.fx[k] + block[col]
                out.fy[k] = out.fy[k] + block[col + 1]
                col += 2
        if layout.distortion:
            d = out.dist[k].copy()
            d[layout.free_dist] += block[col:]
            out.dist[k] = d
    out.points = out.points + delta[layout.total :].reshape(-1, 3)
    return out


def _lm_pass(
    state: _State,
    problem: BaProblem,
    stage: str,
    cfg: BaConfig,
) -> tuple[_State, PassReport]:
    if problem.gauge_index is None:
        raise RankDeficient("no gauge camera: camera pose gauge is not fixed")
    layout = _make_layout(problem, stage, cfg)
    n_pts = len(state.points)
    current = _objective(state, problem)
    if not np.isfinite(current):
        raise DivergedPass(f"pass {stage}: objective is not finite at start")
    trace = [current]
    lam = cfg.lm_lambda0
    iterations = 0

    for _ in range(cfg.max_iterations):
        res, eff_w, jac_pt, jac_cam, cam_obs = _linearize(state, problem, layout)

        # normal equation blocks
        hpp = np.zeros((n_pts, 3, 3))
        gp = np.zeros((n_pts, 3))
        np.add.at(
            hpp, problem.obs_pt, np.einsum("n,nik,nil->nkl", eff_w, jac_pt, jac_pt)
        )
        np.add.at(gp, problem.obs_pt, np.einsum("n,nik,ni->nk", eff_w, jac_pt, res))

        hcc = [None] * len(problem.cameras)
        gc = [None] * len(problem.cameras)
        wcp = [None] * len(problem.cameras)  # (P, kc, 3) cross blocks
        for k, idx in enumerate(cam_obs):
            kc = layout.cam_sizes[k]
            if kc == 0:
                continue
            jc = jac_cam[k]
            hcc[k] = np.einsum("n,nik,nil->kl", eff_w[idx], jc, jc)
            gc[k] = np.einsum("n,nik,ni->k", eff_w[idx], jc, res[idx])
            cross = np.einsum("n,nik,nil->nkl", eff_w[idx], jc, jac_pt[idx])
            acc = np.zeros((n_pts, kc, 3))
            np.add.at(acc, problem.obs_pt[idx], cross)
            wcp[k] = acc

        accepted = False
        for _ in range(25):
            iterations += 1
            # damped point blocks, inverted in closed form per point
            hpp_d = hpp.copy()
            diag = np.arange(3)
            hpp_d[:, diag, diag] += lam * np.maximum(hpp[:, diag, diag], 1e-12)
            try:
                hpp_inv = np.linalg.inv(hpp_d)
            except np.linalg.LinAlgError:
                lam *= 4.0
                continue

            total = layout.total
            s_mat = np.zeros((total, total))
            rhs = np.zeros(total)
            for k in range(len(problem.cameras)):
                if layout.cam_sizes[k] == 0:
                    continue
                hk = hcc[k].copy()
                dk = np.arange(layout.cam_sizes[k])
                hk[dk, dk] += lam * np.maximum(np.diag(hcc[k]), 1e-12)
                s_mat[layout.cam_slices[k], layout.cam_slices[k]] = hk
                rhs[layout.cam_slices[k]] = -gc[k] + np.einsum(
                    "mkj,mjl,ml->k", wcp[k], hpp_inv, gp
                )
                for k2 in range(len(problem.cameras)):
                    if layout.cam_sizes[k2] == 0:
                        continue
                    s_mat[layout.cam_slices[k], layout.cam_slices[k2]] -= np.einsum(
                        "mkj,mjl,mnl->kn", wcp[k], hpp_inv, wcp[k2]
                    )
            try:
                delta_c = np.linalg.solve(s_mat, rhs) if total else np.zeros(0)
            except np.linalg.LinAlgError:
                raise RankDeficient("camera system singular despite damping")

            back = -gp.copy()
            for k in range(len(problem.cameras)):
                if layout.cam_sizes[k] == 0:
                    continue
                back -= np.einsum("mkj,k->mj", wcp[k], delta_c[layout.cam_slices[k]])
            delta_p = np.einsum("mij,mj->mi", hpp_inv, back)

            delta = np.concatenate([delta_c, delta_p.ravel()])
            trial = _apply_step(state, problem, layout, delta)
            value = _objective(trial, problem)
            if value < current:
                state = trial
                current = value
                trace.append(value)
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                break
            lam *= 4.0
            if lam > 1e10:
                break
        if not accepted:
            break
        if len(trace) >= 2 and (trace[-2] - trace[-1]) <= cfg.ftol * max(trace[-2], 1e-30):
            break

    report = PassReport(
        name=stage,
        iterations=iterations,
        initial_objective=trace[0],
        final_objective=current,
        rms_px=_rms_px(state, problem),
        objective_trace=trace,
    )
    return state, report


def _retriangulate(state: _State, problem: BaProblem) -> None:
    cameras = state.to_cameras()
    for m in range(len(state.points)):
        mask = problem.obs_pt == m
        obs = []
        for ci, px, w in zip(
            problem.obs_cam[mask], problem.obs_px[mask], problem.obs_w[mask]
        ):
            cam = cameras[ci]
            und = undistort_points(px, cam.intrinsics, cam.distortion)[0]
            obs.append((int(ci), und, float(w)))
        try:
            state.points[m] = triangulate_weighted_dlt(obs, cameras)
        except (InsufficientViews, DegenerateGeometry):
            pass  # keep the current estimate


def run_bundle_adjustment(
    problem: BaProblem,
    passes: tuple[str, ...] = DEFAULT_PASSES,
    cfg: BaConfig = BaConfig(),
) -> tuple[list[CameraModel], np.ndarray, list[PassReport]]:
    """Run the configured passes and return refined cameras and points.

    The gauge camera's pose is bitwise untouched. Points are re-initialized
    by weighted DLT before the distortion pass when the focal pass moved
    any focal length by more than the configured fraction.
    """
    if not passes:
        raise ValueError("pass list is empty")
    state = _State(problem.cameras, problem.points)
    reports = []
    focal_before = state.fx.copy()
    for stage in passes:
        if stage not in ("pose", "focal", "distortion"):
            raise ValueError(f"unknown pass {stage!r}")
        if stage == "distortion":
            change = np.abs(state.fx - focal_before) / focal_before
            if np.any(change > cfg.retriangulate_focal_change):
                logger.debug("focal moved %.1f%%, re-triangulating points",
                             100 * change.max())
                _retriangulate(state, problem)
        state, report = _lm_pass(state, problem, stage, cfg)
        reports.append(report)
        logger.info(
            "bundle pass %-10s iters=%3d objective %.4g -> %.4g rms %.3f px",
            stage, report.iterations, report.initial_objective,
            report.final_objective, report.rms_px,
        )
    try:
        cameras = state.to_cameras()
    except (InvalidDistortion, ValueError) as exc:
        raise DivergedPass(f"optimized parameters are invalid: {exc}") from exc
    return cameras, state.points.copy(), reports
