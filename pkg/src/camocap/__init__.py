"""Calibration-free multi-camera motion capture.

Subpackages cover the full flow: audio synchronization (`audiosync`),
keypoint timelines and correspondence sampling (`keystore`), pairwise
relative pose (`pairwise`), graph-based scale solving and absolute
extrinsics (`scalegraph`), three-pass bundle adjustment (`bundle`),
sequence triangulation with 3D confidence (`lift3d`), metric scale
recovery (`metricscale`), evaluation metrics (`evalmetrics`), synthetic
ground-truth scenes (`synth`) and the pipeline driver (`pipeline`).
"""

from .camgeom import CameraModel, Distortion, Intrinsics, Pose

__version__ = "0.1.0"

__all__ = ["CameraModel", "Distortion", "Intrinsics", "Pose", "__version__"]
