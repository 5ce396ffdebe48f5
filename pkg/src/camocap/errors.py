"""Exception types raised across the pipeline.

Every error carries a human-readable message; callers that can recover
(per-joint triangulation, optional stages) catch the specific class.
"""


class CamocapError(Exception):
    """Base class for all package errors."""


# camera geometry

class NonPositiveDepth(CamocapError):
    """Point is behind the camera (z <= 0 in camera frame)."""


class NoConvergence(CamocapError):
    """Iterative undistortion failed to converge."""


class InsufficientViews(CamocapError):
    """Fewer than two weighted observations available for triangulation."""


class DegenerateGeometry(CamocapError):
    """Triangulation geometry is ill-conditioned (near-parallel rays)."""


class InvalidDistortion(CamocapError):
    """Distortion coefficients fold the image domain (non-injective map)."""


# audio synchronization

class TrackTooShort(CamocapError):
    """Audio track is shorter than one analysis window."""


class AmbiguousPeak(CamocapError):
    """Cross-correlation has no clearly dominant peak."""


# keypoint store / timeline

class MissingLag(CamocapError):
    """A camera has detections but no synchronization lag."""


class InconsistentFrameRate(CamocapError):
    """Declared frame rate disagrees with observed timestamp spacing."""


class NoSharedFrames(CamocapError):
    """Two cameras have no temporally paired frames."""


class EmptyPool(CamocapError):
    """Correspondence pool is empty after filtering."""


# pairwise calibration

class ZeroDenominator(CamocapError):
    """Sampson denominator vanished (point at both epipoles)."""


class NotEnoughCorrespondences(CamocapError):
    """Fewer correspondences than the minimal solver needs."""


class DegenerateConfiguration(CamocapError):
    """No pose candidate is geometrically consistent."""


class LowInlierRatio(CamocapError):
    """RANSAC inlier ratio below the configured floor."""


# scale graph

class DisconnectedGraph(CamocapError):
    """Calibration graph does not connect all cameras."""


class MissingScale(CamocapError):
    """A spanning-tree edge has no solved scale factor."""


# bundle adjustment

class NoTriangulablePoints(CamocapError):
    """No keypoint passes the two-view confidence requirement."""


class DivergedPass(CamocapError):
    """Optimization objective became non-finite."""


class RankDeficient(CamocapError):
    """Gauge is not fixed; the normal equations are singular."""


# 3D lifting

class DimensionMismatch(CamocapError):
    """Depth map size does not match the camera image size."""


# metric scale

class NoReliableBones(CamocapError):
    """No bone has positive confidence at both endpoints."""


class NoDepthSamples(CamocapError):
    """No valid depth sample survived filtering."""


class NonPositiveScale(CamocapError):
    """Scale factor must be strictly positive."""


# evaluation

class IdMismatch(CamocapError):
    """Estimated and ground-truth camera id sets differ."""


class EmptyOverlap(CamocapError):
    """No jointly visible (frame, person, joint) entries to compare."""


# synthetic data / pipeline

class InvalidConfig(CamocapError):
    """Configuration value outside its documented domain."""


class MissingPrerequisite(CamocapError):
    """A pipeline stage ran before its inputs exist."""
