"""Joint-angle regression and robust rigid registration.

Given generated camera-frame keypoints, a small MLP regresses the joint
angles (its input is centroid-subtracted, since angles depend only on
relative bone geometry), forward kinematics rebuilds the robot-frame
keypoints, and an iteratively reweighted Kabsch solve aligns the two sets:

    X_cam ~ R X_rob + T

Robustness comes from Geman-McClure weights w = s^2 / (s^2 + r^2)^2 on
the per-point residuals r, which drive gross outliers toward zero weight
while the closed-form weighted solve stays exact for the inliers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from keylift import net
from keylift.camera import CAMERA_FRAME, Keypoints3D, Pose
from keylift.kinematics import KinematicChain, keypoints_robot_frame


class DegenerateFitError(ValueError):
    """Correspondences are rank-deficient (collinear or coincident points)."""


@dataclass(frozen=True)
class FitConfig:
    max_irls_iterations: int = 10
    residual_scale: float = 0.03  # meters; robust kernel width
    convergence_tol: float = 1e-6  # meters of pose change per iteration
    min_inliers: int = 3

    def __post_init__(self):
        if self.max_irls_iterations < 1:
            raise ValueError("max_irls_iterations must be >= 1")
        if self.residual_scale <= 0:
            raise ValueError("residual_scale must be > 0")
        if self.min_inliers < 3:
            raise ValueError("min_inliers must be >= 3")


@dataclass(frozen=True)
class FitResult:
    pose: Pose
    weights: np.ndarray
    converged: bool
    iterations: int


@dataclass(frozen=True)
class EstimateResult:
    pose: Pose
    angles: np.ndarray
    x_rob: Keypoints3D
    fit: FitResult


def kabsch(source: np.ndarray, target: np.ndarray, weights: np.ndarray | None = None) -> Pose:
    """Weighted least-squares rigid transform: argmin sum w_i |R s_i + T - t_i|^2.

    Reflections are corrected via the SVD determinant fix, so the rotation
    is always in SO(3).

    Raises:
        DegenerateFitError: fewer than 3 positively weighted points, or a
            collinear/coincident configuration.
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.shape != target.shape or source.ndim != 2 or source.shape[1] != 3:
        raise ValueError("source and target must both be (N, 3)")
    n = source.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0):
        raise ValueError("weights must be a nonnegative N-vector")
    if np.count_nonzero(w > 0) < 3:
        raise DegenerateFitError("need at least 3 points with positive weight")
    wn = w / w.sum()
    sc = wn @ source
    tc = wn @ target
    H = (source - sc).T @ (wn[:, None] * (target - tc))
    U, S, Vt = np.linalg.svd(H)
    if S[1] <= 1e-12 * max(S[0], 1e-300):
        raise DegenerateFitError("weighted point set is (near-)collinear")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return Pose(R, tc - R @ sc)


def geman_mcclure_weights(residuals: np.ndarray, scale: float) -> np.ndarray:
    """Robust weights s^2/(s^2 + r^2)^2, monotone decreasing in |r|."""
    s2 = scale * scale
    return s2 / (s2 + residuals * residuals) ** 2


def fit_pose(x_cam: np.ndarray, x_rob: np.ndarray, cfg: FitConfig = FitConfig()) -> FitResult:
    """Iteratively reweighted Kabsch registration of x_rob onto x_cam.

    Starts from uniform weights; alternates a closed-form weighted solve
    with a Geman-McClure reweighting of the residuals until the pose stops
    moving. Non-convergence returns the best-so-far pose with
    ``converged=False`` rather than raising.
    """
    x_cam = np.asarray(x_cam, dtype=np.float64)
    x_rob = np.asarray(x_rob, dtype=np.float64)
    if x_cam.shape[0] < cfg.min_inliers:
        raise DegenerateFitError(f"need at least {cfg.min_inliers} correspondences")
    weights = np.ones(x_cam.shape[0])
    pose = None
    for it in range(1, cfg.max_irls_iterations + 1):
        new_pose = kabsch(x_rob, x_cam, weights)
        residuals = np.linalg.norm(new_pose.apply(x_rob) - x_cam, axis=1)
        weights = geman_mcclure_weights(residuals, cfg.residual_scale)
        weights = weights / weights.max() if weights.max() > 0 else weights
        if pose is not None:
            delta = np.linalg.norm(new_pose.translation - pose.translation) + np.linalg.norm(
                new_pose.rotation - pose.rotation
            )
            if delta < cfg.convergence_tol:
                return FitResult(new_pose, weights, True, it)
        pose = new_pose
    return FitResult(pose, weights, False, cfg.max_irls_iterations)


def regress_angles(
    regressor: net.MlpParams, x_cam: np.ndarray, chain: KinematicChain
) -> np.ndarray:
    """Predict joint angles from camera-frame keypoints, clamped to limits.

    The keypoint centroid is subtracted before the network (matching
    training), so the prediction depends only on relative geometry.
    """
    pts = np.asarray(x_cam, dtype=np.float64)
    if pts.shape != (chain.n_keypoints, 3):
        raise ValueError(f"expected ({chain.n_keypoints}, 3) keypoints, got {pts.shape}")
    centered = pts - pts.mean(axis=0)
    raw, _ = net.forward(regressor, centered.ravel())
    limits = chain.joint_limits
    return np.clip(raw, limits[:, 0], limits[:, 1])


def regressor_features(x_cam_batch: np.ndarray) -> np.ndarray:
    """Batch centroid-subtraction used by both training and inference."""
    pts = x_cam_batch.reshape(x_cam_batch.shape[0], -1, 3)
    centered = pts - pts.mean(axis=1, keepdims=True)
    return centered.reshape(x_cam_batch.shape[0], -1)


def estimate(
    x_cam: Keypoints3D,
    regressor: net.MlpParams,
    chain: KinematicChain,
    cfg: FitConfig = FitConfig(),
    angles_override: np.ndarray | None = None,
) -> EstimateResult:
    """Full recovery from lifted keypoints: angles, X_rob via FK, robust pose.

    ``angles_override`` substitutes ground-truth angles (known-angle mode)
    while keeping the rest of the pipeline identical.
    """
    if x_cam.frame != CAMERA_FRAME:
        raise ValueError("estimate expects camera-frame keypoints")
    if angles_override is not None:
        angles = np.asarray(angles_override, dtype=np.float64)
    else:
        angles = regress_angles(regressor, x_cam.points, chain)
    x_rob = keypoints_robot_frame(chain, angles)
    fit = fit_pose(x_cam.points, x_rob, cfg)
    return EstimateResult(fit.pose, angles, Keypoints3D(x_rob, "robot"), fit)
