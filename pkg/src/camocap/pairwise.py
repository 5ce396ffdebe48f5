"""Pairwise essential-matrix estimation with confidence-sampled RANSAC.

The essential matrix between cameras i and j satisfies
``x_j^T E x_i = 0`` for normalized image points and decomposes as
``E = [t]x R`` where ``x_cam_j = R @ x_cam_i + t``. Minimal hypotheses
come from a five-point solver (null-space expansion of the epipolar
system, the ten cubic manifold constraints, and an action-matrix
eigendecomposition of the resulting polynomial system). Inliers are
judged by the Sampson distance in normalized coordinates, the final
model is re-fit linearly on inliers and projected back onto the
essential manifold, and the winning (R, t) candidate is the one placing
the most inliers in front of both cameras.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .camgeom import Intrinsics, quat_from_matrix
from .errors import (
    DegenerateConfiguration,
    LowInlierRatio,
    NotEnoughCorrespondences,
    ZeroDenominator,
)
from .keystore import CorrespondenceSet

logger = logging.getLogger(__name__)

__all__ = [
    "PairCalibration",
    "RansacConfig",
    "sampson_distance",
    "sampson_distances",
    "estimate_relative_pose",
    "decompose_essential",
    "essential_from_rt",
]


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 2000
    inlier_threshold: float = 1e-5  # Sampson distance, normalized coordinates
    seed: int = 0
    min_inlier_ratio: float = 0.2
    confidence: float = 0.9999  # adaptive early-exit target


@dataclass
class PairCalibration:
    """Relative geometry of one camera pair, direction cam_i -> cam_j."""

    cam_i: str
    cam_j: str
    essential: np.ndarray           # 3x3, unit Frobenius norm
    rotation_q: np.ndarray          # quaternion of R with x_j = R x_i + t
    translation_dir: np.ndarray     # unit vector t-hat
    inliers: np.ndarray             # indices into the sampled correspondence set
    score: float                    # mean Sampson distance over inliers
    used_linear_fallback: bool = False


def _homogeneous(points: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] == 3:
        return pts
    return np.column_stack([pts, np.ones(len(pts))])


def sampson_distances(essential: np.ndarray, x_i: np.ndarray, x_j: np.ndarray) -> np.ndarray:
    """Vectorized Sampson distance for normalized correspondences.

    Returns ``(x_j^T E x_i)^2 / ((E x_i)_x^2 + (E x_i)_y^2 +
    (E^T x_j)_x^2 + (E^T x_j)_y^2)`` per correspondence; entries whose
    denominator vanishes come back as +inf.
    """
    xi = _homogeneous(x_i)
    xj = _homogeneous(x_j)
    exi = xi @ essential.T          # (N, 3) = E x_i
    etxj = xj @ essential           # (N, 3) = E^T x_j
    num = np.einsum("ij,ij->i", xj, exi) ** 2
    den = exi[:, 0] ** 2 + exi[:, 1] ** 2 + etxj[:, 0] ** 2 + etxj[:, 1] ** 2
    out = np.full(len(xi), np.inf)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def sampson_distance(essential: np.ndarray, x_i: np.ndarray, x_j: np.ndarray) -> float:
    """Sampson distance of a single normalized correspondence."""
    d = sampson_distances(essential, np.asarray(x_i)[None, :], np.asarray(x_j)[None, :])[0]
    if not np.isfinite(d):
        raise ZeroDenominator("all four epipolar gradient terms vanish")
    return float(d)


# five-point solver
#
# Monomial orderings used below:
#   degree 1:  x, y, z, 1
#   degree 2:  x2, xy, xz, y2, yz, z2, x, y, z, 1
#   degree 3:  x3, x2y, x2z, xy2, xyz, xz2, y3, y2z, yz2, z3,
#              x2, xy, xz, y2, yz, z2, x, y, z, 1
# The tail ten monomials of the cubic ordering double as the quotient
# basis of the action matrix.

_MUL1 = np.array(
    [
        [0, 1, 2, 6],
        [1, 3, 4, 7],
        [2, 4, 5, 8],
        [6, 7, 8, 9],
    ]
)
_MUL2 = np.array(
    [
        [0, 1, 2, 10],
        [1, 3, 4, 11],
        [2, 4, 5, 12],
        [3, 6, 7, 13],
        [4, 7, 8, 14],
        [5, 8, 9, 15],
        [10, 11, 12, 16],
        [11, 13, 14, 17],
        [12, 14, 15, 18],
        [16, 17, 18, 19],
    ]
)


def _poly_mul_11(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros(10)
    for i in range(4):
        if a[i] == 0.0:
            continue
        for j in range(4):
            out[_MUL1[i, j]] += a[i] * b[j]
    return out


def _poly_mul_21(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros(20)
    for i in range(10):
        if a[i] == 0.0:
            continue
        for j in range(4):
            out[_MUL2[i, j]] += a[i] * b[j]
    return out


def _five_point_candidates(x_i: np.ndarray, x_j: np.ndarray) -> list[np.ndarray]:
    """Essential matrix candidates for exactly five correspondences."""
    xi = _homogeneous(x_i)
    xj = _homogeneous(x_j)
    # epipolar rows: coefficient of E[a, b] is x_j[a] * x_i[b] (row-major E)
    q = np.einsum("na,nb->nab", xj, xi).reshape(-1, 9)
    _, _, vt = np.linalg.svd(q)
    basis = vt[-4:]  # E = x*B0 + y*B1 + z*B2 + B3

    # each entry of E is a degree-1 polynomial with coefficients (x, y, z, 1)
    ent = basis.reshape(4, 3, 3).transpose(1, 2, 0).copy()

    def e(a, b):
        return ent[a, b]

    rows = np.zeros((10, 20))
    # det(E) = 0
    det = np.zeros(20)
    for (a, b, c), sign in ((( 0, 1, 2), 1.0), ((1, 2, 0), 1.0), ((2, 0, 1), 1.0)):
        m = _poly_mul_11(e(1, b), e(2, c)) - _poly_mul_11(e(1, c), e(2, b))
        det += sign * _poly_mul_21(m, e(0, a))
    rows[0] = det

    # 2 E E^T E - trace(E E^T) E = 0, nine equations of degree 3
    gram = np.empty((3, 3, 10))
    for a in range(3):
        for b in range(3):
            acc = np.zeros(10)
            for k in range(3):
                acc += _poly_mul_11(e(a, k), e(b, k))
            gram[a, b] = acc
    trace = gram[0, 0] + gram[1, 1] + gram[2, 2]
    r = 1
    for a in range(3):
        for b in range(3):
            acc = np.zeros(20)
            for k in range(3):
                coeff = 2.0 * gram[a, k] - (trace if k == a else 0.0)
                acc += _poly_mul_21(coeff, e(k, b))
            rows[r] = acc
            r += 1

    lead = rows[:, :10]
    tail = rows[:, 10:]
    try:
        reduced = np.linalg.solve(lead, tail)
    except np.linalg.LinAlgError:
        return []

    action = np.zeros((10, 10))
    action[0:6] = -reduced[0:6]
    action[6, 0] = 1.0  # x * x  -> x2
    action[7, 1] = 1.0  # x * y  -> xy
    action[8, 2] = 1.0  # x * z  -> xz
    action[9, 6] = 1.0  # x * 1  -> x
    try:
        eigvals, eigvecs = np.linalg.eig(action)
    except np.linalg.LinAlgError:
        return []

    candidates = []
    for k in range(10):
        if abs(eigvals[k].imag) > 1e-8 * (1.0 + abs(eigvals[k].real)):
            continue
        v = eigvecs[:, k].real
        if abs(v[9]) < 1e-12:
            continue
        x, y, z = v[6] / v[9], v[7] / v[9], v[8] / v[9]
        em = (x * basis[0] + y * basis[1] + z * basis[2] + basis[3]).reshape(3, 3)
        n = np.linalg.norm(em)
        if n > 0 and np.isfinite(n):
            candidates.append(em / n)
    return candidates


def _eight_point(x_i: np.ndarray, x_j: np.ndarray) -> np.ndarray | None:
    """Linear essential-matrix fit projected onto the essential manifold."""
    xi = _homogeneous(x_i)
    xj = _homogeneous(x_j)
    q = np.einsum("na,nb->nab", xj, xi).reshape(-1, 9)
    _, _, vt = np.linalg.svd(q)
    em = vt[-1].reshape(3, 3)
    u, s, v = np.linalg.svd(em)
    if s[1] <= 0:
        return None
    sigma = (s[0] + s[1]) / 2.0
    em = u @ np.diag([sigma, sigma, 0.0]) @ v
    n = np.linalg.norm(em)
    return em / n if n > 0 else None


def essential_from_rt(rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
    """E = [t]x R, normalized to unit Frobenius norm."""
    t = np.asarray(translation, dtype=float)
    skew = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    em = skew @ np.asarray(rotation, dtype=float)
    return em / np.linalg.norm(em)


def _sampson_signed(essential: np.ndarray, x_i: np.ndarray, x_j: np.ndarray) -> np.ndarray:
    """First-order geometric epipolar residual (signed square root)."""
    xi = _homogeneous(x_i)
    xj = _homogeneous(x_j)
    exi = xi @ essential.T
    etxj = xj @ essential
    num = np.einsum("ij,ij->i", xj, exi)
    den = np.sqrt(exi[:, 0] ** 2 + exi[:, 1] ** 2 + etxj[:, 0] ** 2 + etxj[:, 1] ** 2)
    return num / np.maximum(den, 1e-300)


def _refine_pose_sampson(
    rotation: np.ndarray,
    translation: np.ndarray,
    x_i: np.ndarray,
    x_j: np.ndarray,
    iterations: int = 30,
) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Newton polish of (R, t-hat) on the Sampson cost.

    Five degrees of freedom: a rotation increment and a two-dimensional
    move of the translation direction on its tangent plane. The numeric
    Jacobian is cheap because the residual vector is fully vectorized.
    """
    from .camgeom import quat_from_rotvec, quat_to_matrix

    rot = rotation.copy()
    tdir = translation / np.linalg.norm(translation)
    for _ in range(iterations):
        ref = np.array([1.0, 0.0, 0.0]) if abs(tdir[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        b1 = np.cross(tdir, ref)
        b1 /= np.linalg.norm(b1)
        b2 = np.cross(tdir, b1)

        def residuals(p):
            r = quat_to_matrix(quat_from_rotvec(p[:3])) @ rot
            t = tdir + b1 * p[3] + b2 * p[4]
            return _sampson_signed(essential_from_rt(r, t / np.linalg.norm(t)), x_i, x_j)

        base = residuals(np.zeros(5))
        jac = np.empty((base.size, 5))
        h = 1e-7
        for k in range(5):
            dp = np.zeros(5)
            dp[k] = h
            jac[:, k] = (residuals(dp) - residuals(-dp)) / (2 * h)
        try:
            step = np.linalg.solve(jac.T @ jac + 1e-14 * np.eye(5), -(jac.T @ base))
        except np.linalg.LinAlgError:
            break
        if (residuals(step) ** 2).sum() >= (base**2).sum():
            break
        rot = quat_to_matrix(quat_from_rotvec(step[:3])) @ rot
        tdir = tdir + b1 * step[3] + b2 * step[4]
        tdir /= np.linalg.norm(tdir)
        if np.linalg.norm(step) < 1e-12:
            break
    return rot, tdir


def decompose_essential(essential: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """The four (R, t-hat) candidates of an essential matrix."""
    u, _, vt = np.linalg.svd(essential)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    ra = u @ w @ vt
    rb = u @ w.T @ vt
    t = u[:, 2]
    return [(ra, t), (ra, -t), (rb, t), (rb, -t)]


def _depths_two_view(
    rotation: np.ndarray, translation: np.ndarray, x_i: np.ndarray, x_j: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares ray depths (z_i, z_j) under x_j-frame = R x_i-frame + t."""
    di = _homogeneous(x_i)
    dj = _homogeneous(x_j)
    a1 = di @ rotation.T
    a2 = -dj
    g11 = np.einsum("ij,ij->i", a1, a1)
    g12 = np.einsum("ij,ij->i", a1, a2)
    g22 = np.einsum("ij,ij->i", a2, a2)
    b1 = -a1 @ translation
    b2 = -a2 @ translation
    det = g11 * g22 - g12 * g12
    det = np.where(np.abs(det) < 1e-18, np.nan, det)
    zi = (g22 * b1 - g12 * b2) / det
    zj = (g11 * b2 - g12 * b1) / det
    return zi, zj


def _pick_pose_by_cheirality(
    essential: np.ndarray, x_i: np.ndarray, x_j: np.ndarray
) -> tuple[np.ndarray, np.ndarray, int]:
    best = None
    for rotation, translation in decompose_essential(essential):
        zi, zj = _depths_two_view(rotation, translation, x_i, x_j)
        front = int(np.sum((zi > 0) & (zj > 0)))
        if best is None or front > best[2]:
            best = (rotation, translation, front)
    return best


def estimate_relative_pose(
    corrs: CorrespondenceSet,
    intrinsics_i: Intrinsics,
    intrinsics_j: Intrinsics,
    cfg: RansacConfig = RansacConfig(),
) -> PairCalibration:
    """RANSAC relative pose from sampled correspondences.

    Pixels are normalized with each camera's intrinsics; hypotheses come
    from five-point samples with inliers measured by Sampson distance.
    The best hypothesis is re-fit linearly on its inliers (twice), the
    relative pose is chosen by cheirality, and the pair score is the mean
    Sampson distance over the final inliers.
    """
    n = len(corrs)
    if n < 5:
        raise NotEnoughCorrespondences(f"{n} correspondences, need >= 5")
    xi = intrinsics_i.normalize(corrs.pixels_i)
    xj = intrinsics_j.normalize(corrs.pixels_j)

    rng = np.random.default_rng(cfg.seed)
    samples = np.empty((cfg.iterations, 5), dtype=np.int64)
    for it in range(cfg.iterations):
        samples[it] = rng.choice(n, size=5, replace=False)

    best_count = 0
    best_mean = np.inf
    best_e = None
    used_fallback = False
    needed = cfg.iterations
    for it in range(cfg.iterations):
        if it >= needed:
            break
        candidates = _five_point_candidates(xi[samples[it]], xj[samples[it]])
        if not candidates:
            em = _eight_point(xi[samples[it]], xj[samples[it]])
            if em is None:
                continue
            candidates = [em]
            used_fallback = True
        for em in candidates:
            d = sampson_distances(em, xi, xj)
            mask = d < cfg.inlier_threshold
            count = int(mask.sum())
            if count < 5:
                continue
            mean = float(d[mask].mean())
            if count > best_count or (count == best_count and mean < best_mean):
                best_count, best_mean, best_e = count, mean, em
                ratio = count / n
                if 0 < ratio < 1:
                    denom = np.log1p(-(ratio**5))
                    if denom < 0:
                        needed = min(
                            cfg.iterations,
                            int(np.ceil(np.log(1.0 - cfg.confidence) / denom)),
                        )
    if best_e is None:
        raise DegenerateConfiguration("no RANSAC hypothesis gathered 5 inliers")

    # linear re-fit on inliers, repeated once with the refreshed inlier set
    essential = best_e
    inlier_mask = sampson_distances(essential, xi, xj) < cfg.inlier_threshold
    for _ in range(2):
        if inlier_mask.sum() >= 8:
            refit = _eight_point(xi[inlier_mask], xj[inlier_mask])
            if refit is not None:
                refreshed = sampson_distances(refit, xi, xj) < cfg.inlier_threshold
                if refreshed.sum() >= inlier_mask.sum():
                    essential, inlier_mask = refit, refreshed

    # nonlinear polish of the decomposed pose on the Sampson cost
    inliers = np.nonzero(inlier_mask)[0]
    rotation, translation, _ = _pick_pose_by_cheirality(
        essential, xi[inliers], xj[inliers]
    )
    rotation, translation = _refine_pose_sampson(
        rotation, translation, xi[inliers], xj[inliers]
    )
    refined = essential_from_rt(rotation, translation)
    refreshed = sampson_distances(refined, xi, xj) < cfg.inlier_threshold
    if refreshed.sum() >= inlier_mask.sum():
        essential, inlier_mask = refined, refreshed
        inliers = np.nonzero(inlier_mask)[0]

    ratio = len(inliers) / n
    if ratio < cfg.min_inlier_ratio:
        raise LowInlierRatio(
            f"inlier ratio {ratio:.3f} below floor {cfg.min_inlier_ratio}"
        )

    rotation, translation, front = _pick_pose_by_cheirality(
        essential, xi[inliers], xj[inliers]
    )
    if front <= 0.5 * len(inliers):
        raise DegenerateConfiguration(
            f"best pose candidate is cheirality-consistent for only "
            f"{front}/{len(inliers)} inliers"
        )
    score = float(sampson_distances(essential, xi[inliers], xj[inliers]).mean())
    logger.debug(
        "pair (%s, %s): %d/%d inliers, score %.3g%s",
        corrs.cam_i,
        corrs.cam_j,
        len(inliers),
        n,
        score,
        " (linear fallback used)" if used_fallback else "",
    )
    return PairCalibration(
        cam_i=corrs.cam_i,
        cam_j=corrs.cam_j,
        essential=essential,
        rotation_q=quat_from_matrix(rotation),
        translation_dir=translation / np.linalg.norm(translation),
        inliers=inliers,
        score=score,
        used_linear_fallback=used_fallback,
    )
