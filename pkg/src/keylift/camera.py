"""Pinhole camera model and normalized camera coordinates.

Camera frame follows the OpenCV convention: +X right, +Y down, +Z forward;
only points with z > 0 project. The normalized camera coordinate space
(NCCS) maps pixels (u, v) to ((u - cx)/fx, (v - cy)/fy), which for a
noiseless pinhole projection equals (x/z, y/z) regardless of intrinsics.
That invariance is what lets one lifting model serve every camera.

Out-of-image projections are flagged invisible, never clamped: clamping
would silently corrupt the 2D condition fed to the lifting model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROBOT_FRAME = "robot"
CAMERA_FRAME = "camera"


class DegenerateProjectionError(ValueError):
    """A keypoint sits at or behind the camera plane (z <= 0)."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters in pixels plus the image size."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping robot-frame points into the camera frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("pose needs a 3x3 rotation and a 3-vector translation")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or np.linalg.det(R) < 0:
            raise ValueError("rotation is not in SO(3)")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self ∘ other)(p) = self(other(p))."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)


@dataclass(frozen=True)
class Keypoints2D:
    """Pixel keypoints with per-point visibility flags."""

    points: np.ndarray  # (N, 2) pixels
    visibility: np.ndarray  # (N,) bool

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float64))
        object.__setattr__(self, "visibility", np.asarray(self.visibility, dtype=bool))
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError(f"expected (N, 2) points, got {self.points.shape}")
        if self.visibility.shape != (self.points.shape[0],):
            raise ValueError("visibility length must match points")


@dataclass(frozen=True)
class NormalizedKeypoints2D:
    """Dimensionless NCCS keypoints; visibility carried through from pixels."""

    points: np.ndarray  # (N, 2)
    visibility: np.ndarray  # (N,) bool

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float64))
        object.__setattr__(self, "visibility", np.asarray(self.visibility, dtype=bool))


@dataclass(frozen=True)
class Keypoints3D:
    """3D keypoints in meters, tagged with the frame they live in."""

    points: np.ndarray  # (N, 3) meters
    frame: str  # ROBOT_FRAME or CAMERA_FRAME

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float64))
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"expected (N, 3) points, got {self.points.shape}")
        if self.frame not in (ROBOT_FRAME, CAMERA_FRAME):
            raise ValueError(f"unknown frame tag {self.frame!r}")


def intrinsics_from_fov(horizontal_fov_degrees: float, width: int, height: int) -> CameraIntrinsics:
    """Square-pixel intrinsics from a horizontal field of view.

    fx = (width/2) / tan(fov/2), fy = fx, principal point at the image
    center. Raises ValueError for fov outside (0, 180).
    """
    if not 0.0 < horizontal_fov_degrees < 180.0:
        raise ValueError(f"fov must be in (0, 180) degrees, got {horizontal_fov_degrees}")
    half = np.deg2rad(horizontal_fov_degrees) / 2.0
    fx = (width / 2.0) / np.tan(half)
    return CameraIntrinsics(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0, width=width, height=height)


def transform_to_camera(pose: Pose, x_rob: Keypoints3D) -> Keypoints3D:
    """Map robot-frame keypoints into the camera frame: p -> R p + T."""
    if x_rob.frame != ROBOT_FRAME:
        raise ValueError(f"expected robot-frame keypoints, got {x_rob.frame!r}")
    return Keypoints3D(pose.apply(x_rob.points), CAMERA_FRAME)


def project(intr: CameraIntrinsics, x_cam: Keypoints3D) -> Keypoints2D:
    """Pinhole projection; points outside the image are flagged invisible.

    Raises:
        DegenerateProjectionError: naming the first keypoint with z <= 0.
    """
    if x_cam.frame != CAMERA_FRAME:
        raise ValueError(f"expected camera-frame keypoints, got {x_cam.frame!r}")
    p = x_cam.points
    bad = np.nonzero(p[:, 2] <= 0.0)[0]
    if bad.size:
        raise DegenerateProjectionError(
            f"keypoint {bad[0]} has z={p[bad[0], 2]:.6g} <= 0 (behind the camera)"
        )
    u = intr.fx * p[:, 0] / p[:, 2] + intr.cx
    v = intr.fy * p[:, 1] / p[:, 2] + intr.cy
    visible = (u >= 0) & (u <= intr.width) & (v >= 0) & (v <= intr.height)
    return Keypoints2D(np.stack([u, v], axis=1), visible)


def to_nccs(intr: CameraIntrinsics, c: Keypoints2D) -> NormalizedKeypoints2D:
    """Canonicalize pixel keypoints into NCCS: ((u-cx)/fx, (v-cy)/fy)."""
    pts = np.stack(
        [(c.points[:, 0] - intr.cx) / intr.fx, (c.points[:, 1] - intr.cy) / intr.fy], axis=1
    )
    return NormalizedKeypoints2D(pts, c.visibility.copy())


def from_nccs(intr: CameraIntrinsics, nc: NormalizedKeypoints2D) -> Keypoints2D:
    """Inverse of to_nccs for a given camera (per-axis affine map back to pixels)."""
    pts = np.stack(
        [nc.points[:, 0] * intr.fx + intr.cx, nc.points[:, 1] * intr.fy + intr.cy], axis=1
    )
    return Keypoints2D(pts, nc.visibility.copy())
