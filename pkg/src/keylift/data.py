"""Synthetic paired datasets: scene sampling, detection noise, serialization.

Each record couples one camera view of the arm with everything the
pipeline consumes or is scored against: intrinsics, camera-from-robot
pose, joint angles, 3D keypoints in both frames, clean projections and a
noisy copy emulating a 2D detector's error statistics (isotropic pixel
noise, dropouts, uniform outliers).

Records come in short sequences (default 3 frames) whose pose and angles
drift slowly, so online/warm-start evaluation has realistic inputs.
Generation is a pure function of (chain, config, seed): every sequence
derives its own rng stream from the master seed, which keeps records
independent of generation order and makes datasets byte-identical across
runs.

File format: one JSON header line, then fixed-width little-endian binary
records (see docs/formats.md for the byte layout).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from keylift.camera import (
    CAMERA_FRAME,
    ROBOT_FRAME,
    CameraIntrinsics,
    Keypoints2D,
    Keypoints3D,
    Pose,
    intrinsics_from_fov,
    project,
    transform_to_camera,
)
from keylift.config import DataConfig
from keylift.kinematics import (
    KinematicChain,
    chain_hash,
    chain_to_document,
    keypoints_robot_frame,
    load_chain,
    sample_joint_angles,
)

DATASET_FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """Raised for unreadable, truncated or mismatched dataset files."""


def derive_rng(*keys) -> np.random.Generator:
    """Deterministic, platform-independent rng stream keyed by strings/ints."""
    digest = hashlib.sha256("/".join(str(k) for k in keys).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


@dataclass(frozen=True)
class DetectionNoiseModel:
    """Parametric stand-in for a 2D detector's error statistics."""

    pixel_sigma: float = 2.0
    dropout_prob: float = 0.05
    outlier_prob: float = 0.01

    def __post_init__(self):
        if self.pixel_sigma < 0:
            raise ValueError("pixel_sigma must be >= 0")
        for name in ("dropout_prob", "outlier_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")


@dataclass(frozen=True)
class DataRecord:
    intrinsics: CameraIntrinsics
    pose: Pose
    angles: np.ndarray
    x_rob: Keypoints3D
    x_cam: Keypoints3D
    c_clean: Keypoints2D
    c_noisy: Keypoints2D
    sequence_id: int
    frame_index: int


def _look_at_pose(camera_center: np.ndarray) -> Pose:
    """Camera at ``camera_center`` (robot frame) looking at the base origin.

    OpenCV convention: +Z forward, +Y down. Degenerate for cameras on the
    world z-axis (forward parallel to world up).
    """
    forward = -camera_center / np.linalg.norm(camera_center)
    right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    norm = np.linalg.norm(right)
    if norm < 1e-8:
        raise ValueError("camera on the world z-axis: look-at frame undefined")
    right /= norm
    down = np.cross(forward, right)
    R = np.stack([right, down, forward], axis=0)
    return Pose(R, -R @ camera_center)


def sample_camera_pose(
    rng: np.random.Generator,
    radius_range: tuple,
    elevation_range: tuple,
    points: np.ndarray | None = None,
    max_retries: int = 1000,
) -> Pose:
    """Place a camera on a spherical shell around the base, looking at it.

    The returned pose maps robot-frame points into the camera frame. When
    ``points`` is given, resamples until all of them land in front of the
    camera (z > 0), raising after ``max_retries`` failures.
    """
    if not 0 < radius_range[0] <= radius_range[1]:
        raise ValueError("need 0 < radius_lo <= radius_hi")
    for _ in range(max_retries):
        radius = rng.uniform(*radius_range)
        elevation = rng.uniform(*elevation_range)
        azimuth = rng.uniform(0.0, 2.0 * np.pi)
        center = radius * np.array(
            [np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth), np.sin(elevation)]
        )
        try:
            pose = _look_at_pose(center)
        except ValueError:
            continue
        if points is None or np.all(pose.apply(points)[:, 2] > 0.0):
            return pose
    raise RuntimeError(f"no valid camera pose found in {max_retries} attempts")


def perturb_detections(
    c: Keypoints2D,
    noise: DetectionNoiseModel,
    width: int,
    height: int,
    rng: np.random.Generator,
) -> Keypoints2D:
    """Apply dropout, outlier replacement and Gaussian pixel noise per keypoint.

    All random draws happen unconditionally in a fixed order, so the output
    is a deterministic function of (input, noise model, rng state) even
    when probabilities are zero.
    """
    n = c.points.shape[0]
    dropped = rng.random(n) < noise.dropout_prob
    outlier = rng.random(n) < noise.outlier_prob
    outlier_points = rng.uniform([0.0, 0.0], [float(width), float(height)], size=(n, 2))
    jitter = rng.normal(0.0, noise.pixel_sigma, size=(n, 2)) if noise.pixel_sigma > 0 else np.zeros((n, 2))

    points = c.points + jitter
    outlier &= ~dropped
    points[outlier] = outlier_points[outlier]
    visibility = c.visibility & ~dropped
    return Keypoints2D(points, visibility)


def _rotz(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def generate_dataset(
    chain: KinematicChain,
    cfg: DataConfig,
    noise: DetectionNoiseModel | None = None,
):
    """Yield ``cfg.count`` DataRecords in sequences of ``cfg.sequence_length``.

    Within a sequence the camera orbits slowly in azimuth and the joint
    angles drift by at most ``cfg.max_angle_step`` rad per frame; the fov
    is drawn uniformly over ``cfg.fovs`` per sequence.
    """
    if cfg.count < 1:
        raise ValueError("count must be >= 1")
    if noise is None:
        noise = DetectionNoiseModel(cfg.pixel_sigma, cfg.dropout_prob, cfg.outlier_prob)
    seq_len = max(1, cfg.sequence_length)
    limits = chain.joint_limits
    emitted = 0
    seq = 0
    while emitted < cfg.count:
        rng = derive_rng(cfg.seed, "seq", seq)
        fov = float(cfg.fovs[rng.integers(len(cfg.fovs))])
        intr = intrinsics_from_fov(fov, cfg.width, cfg.height)
        angles = sample_joint_angles(chain, rng)
        x_rob = keypoints_robot_frame(chain, angles)
        pose = sample_camera_pose(
            rng, (cfg.radius_lo, cfg.radius_hi), (cfg.elevation_lo, cfg.elevation_hi), points=x_rob
        )
        for frame in range(seq_len):
            if frame > 0:
                step = rng.uniform(-cfg.max_angle_step, cfg.max_angle_step, chain.n_joints)
                angles = np.clip(angles + step, limits[:, 0], limits[:, 1])
                x_rob = keypoints_robot_frame(chain, angles)
                daz = rng.uniform(-cfg.max_azimuth_step, cfg.max_azimuth_step)
                pose = Pose(pose.rotation @ _rotz(daz), pose.translation)
            x_cam = transform_to_camera(pose, Keypoints3D(x_rob, ROBOT_FRAME))
            c_clean = project(intr, x_cam)
            c_noisy = perturb_detections(c_clean, noise, cfg.width, cfg.height, rng)
            yield DataRecord(
                intrinsics=intr,
                pose=pose,
                angles=angles.copy(),
                x_rob=Keypoints3D(x_rob.copy(), ROBOT_FRAME),
                x_cam=x_cam,
                c_clean=c_clean,
                c_noisy=c_noisy,
                sequence_id=seq,
                frame_index=frame,
            )
            emitted += 1
            if emitted >= cfg.count:
                break
        seq += 1


def _record_nbytes(n_keypoints: int, n_joints: int) -> int:
    floats = 6 + 12 + n_joints + 3 * n_keypoints * 2 + 2 * n_keypoints * 2
    return floats * 8 + 2 * n_keypoints + 2 * 8


def _pack_record(rec: DataRecord) -> bytes:
    intr = rec.intrinsics
    parts = [
        np.array(
            [intr.fx, intr.fy, intr.cx, intr.cy, float(intr.width), float(intr.height)], dtype="<f8"
        ).tobytes(),
        np.ascontiguousarray(rec.pose.rotation, dtype="<f8").tobytes(),
        np.ascontiguousarray(rec.pose.translation, dtype="<f8").tobytes(),
        np.ascontiguousarray(rec.angles, dtype="<f8").tobytes(),
        np.ascontiguousarray(rec.x_rob.points, dtype="<f8").tobytes(),
        np.ascontiguousarray(rec.x_cam.points, dtype="<f8").tobytes(),
        np.ascontiguousarray(rec.c_clean.points, dtype="<f8").tobytes(),
        rec.c_clean.visibility.astype("u1").tobytes(),
        np.ascontiguousarray(rec.c_noisy.points, dtype="<f8").tobytes(),
        rec.c_noisy.visibility.astype("u1").tobytes(),
        np.array([rec.sequence_id, rec.frame_index], dtype="<i8").tobytes(),
    ]
    return b"".join(parts)


def _unpack_record(buf: bytes, n_keypoints: int, n_joints: int) -> DataRecord:
    off = 0

    def take_f8(count):
        nonlocal off
        out = np.frombuffer(buf, dtype="<f8", count=count, offset=off).copy()
        off += count * 8
        return out

    def take_u1(count):
        nonlocal off
        out = np.frombuffer(buf, dtype="u1", count=count, offset=off).astype(bool)
        off += count
        return out

    intr_vals = take_f8(6)
    intr = CameraIntrinsics(
        fx=float(intr_vals[0]),
        fy=float(intr_vals[1]),
        cx=float(intr_vals[2]),
        cy=float(intr_vals[3]),
        width=int(intr_vals[4]),
        height=int(intr_vals[5]),
    )
    R = take_f8(9).reshape(3, 3)
    t = take_f8(3)
    angles = take_f8(n_joints)
    x_rob = take_f8(3 * n_keypoints).reshape(-1, 3)
    x_cam = take_f8(3 * n_keypoints).reshape(-1, 3)
    c_clean_pts = take_f8(2 * n_keypoints).reshape(-1, 2)
    c_clean_vis = take_u1(n_keypoints)
    c_noisy_pts = take_f8(2 * n_keypoints).reshape(-1, 2)
    c_noisy_vis = take_u1(n_keypoints)
    ids = np.frombuffer(buf, dtype="<i8", count=2, offset=off)
    return DataRecord(
        intrinsics=intr,
        pose=Pose(R, t),
        angles=angles,
        x_rob=Keypoints3D(x_rob, ROBOT_FRAME),
        x_cam=Keypoints3D(x_cam, CAMERA_FRAME),
        c_clean=Keypoints2D(c_clean_pts, c_clean_vis),
        c_noisy=Keypoints2D(c_noisy_pts, c_noisy_vis),
        sequence_id=int(ids[0]),
        frame_index=int(ids[1]),
    )


def write_dataset(records, path, chain: KinematicChain, extra: dict | None = None) -> int:
    """Write records to a self-describing binary file; returns the count."""
    record_list = list(records)
    if not record_list:
        raise ValueError("refusing to write an empty dataset")
    n_keypoints = chain.n_keypoints
    n_joints = chain.n_joints
    header = {
        "format": "keylift-dataset",
        "format_version": DATASET_FORMAT_VERSION,
        "chain_hash": chain_hash(chain),
        "chain_document": chain_to_document(chain),
        "n_keypoints": n_keypoints,
        "n_joints": n_joints,
        "count": len(record_list),
        "extra": extra or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for rec in record_list:
            f.write(_pack_record(rec))
    return len(record_list)


def read_dataset(path, expected_chain: KinematicChain | None = None):
    """Read a dataset file; returns (records, header dict).

    Raises:
        DatasetFormatError: bad magic/version, truncated body, or a chain
            hash mismatch when ``expected_chain`` is provided.
    """
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"corrupt dataset header: {exc}") from exc
        if header.get("format") != "keylift-dataset":
            raise DatasetFormatError("not a keylift dataset file")
        if header.get("format_version") != DATASET_FORMAT_VERSION:
            raise DatasetFormatError(
                f"dataset format version {header.get('format_version')} unsupported"
            )
        body = f.read()
    if expected_chain is not None and header["chain_hash"] != chain_hash(expected_chain):
        raise DatasetFormatError(
            "dataset was generated with a different chain "
            f"({header['chain_hash'][:12]}... != {chain_hash(expected_chain)[:12]}...)"
        )
    n_keypoints, n_joints, count = header["n_keypoints"], header["n_joints"], header["count"]
    nbytes = _record_nbytes(n_keypoints, n_joints)
    if len(body) != count * nbytes:
        raise DatasetFormatError(
            f"dataset body truncated: {len(body)} bytes, expected {count * nbytes}"
        )
    records = [
        _unpack_record(body[i * nbytes : (i + 1) * nbytes], n_keypoints, n_joints)
        for i in range(count)
    ]
    return records, header


def dataset_chain(header: dict) -> KinematicChain:
    """Reconstruct the generating chain from a dataset header."""
    return load_chain(header["chain_document"])


def split_of_sequence(sequence_id: int) -> str:
    """Stable 80/10/10 split by sequence id hash (keeps sequences intact)."""
    digest = hashlib.sha256(f"seq:{sequence_id}".encode()).digest()
    bucket = digest[0] % 10
    if bucket < 8:
        return "train"
    return "val" if bucket == 8 else "test"


def split_records(records, split: str):
    """Select records of one split ('train' | 'val' | 'test' | 'all')."""
    if split == "all":
        return list(records)
    if split not in ("train", "val", "test"):
        raise ValueError(f"unknown split {split!r}")
    return [r for r in records if split_of_sequence(r.sequence_id) == split]
