"""Serial kinematic chains: forward kinematics and keypoint placement.

A chain is an ordered list of revolute links. Link ``i`` contributes the
rigid transform

    frame[i] = frame[i-1] @ fixed_rotation[i] @ Rot(axis[i], theta[i]) @ Trans(offset[i])

with ``frame[-1]`` the identity (robot base frame). Keypoints are attached
to link frames by a constant offset expressed in that link's frame; their
base-frame positions are the X-rob array consumed by the pose-fitting
stage.

Chains are described by a small versioned YAML document (see
``docs/formats.md``) so test oracles stay hand-computable; URDF parsing is
deliberately out of scope.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import yaml

CHAIN_FORMAT_VERSION = 1

_UNIT_TOL = 1e-9


class ChainFormatError(ValueError):
    """Raised when a chain document fails to parse or validate."""


@dataclass(frozen=True)
class LinkSpec:
    """One revolute link: joint axis, post-joint offset, pre-joint fixed rotation."""

    rotation_axis: np.ndarray
    translation_offset: np.ndarray
    fixed_rotation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation_axis", np.asarray(self.rotation_axis, dtype=np.float64))
        object.__setattr__(self, "translation_offset", np.asarray(self.translation_offset, dtype=np.float64))
        object.__setattr__(self, "fixed_rotation", np.asarray(self.fixed_rotation, dtype=np.float64))


@dataclass(frozen=True)
class KinematicChain:
    """Validated serial chain with keypoint attachments.

    Attributes:
        links: ordered link specs, one revolute joint each.
        keypoint_attachments: (link_index, offset) pairs, offsets in meters
            in the link frame.
        joint_limits: (n_joints, 2) array of (lo, hi) radians.
    """

    links: tuple[LinkSpec, ...]
    keypoint_attachments: tuple[tuple[int, np.ndarray], ...]
    joint_limits: np.ndarray = field(repr=False)

    @property
    def n_joints(self) -> int:
        return len(self.links)

    @property
    def n_keypoints(self) -> int:
        return len(self.keypoint_attachments)

    @property
    def reach(self) -> float:
        """Sum of link offset lengths; scale reference for metrics."""
        return float(sum(np.linalg.norm(l.translation_offset) for l in self.links))


def _rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit axis."""
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    return np.array(
        [
            [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
            [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
            [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
        ]
    )


def _check_rotation(R: np.ndarray, where: str) -> None:
    if R.shape != (3, 3):
        raise ChainFormatError(f"{where}: expected 3x3 matrix, got shape {R.shape}")
    if np.max(np.abs(R.T @ R - np.eye(3))) > _UNIT_TOL:
        raise ChainFormatError(f"{where}: not orthonormal")
    if np.linalg.det(R) < 0.0:
        raise ChainFormatError(f"{where}: reflection (determinant < 0)")


def validate_chain(chain: KinematicChain) -> None:
    """Check every chain invariant; raise ChainFormatError naming the field."""
    if chain.n_joints < 1:
        raise ChainFormatError("links: need at least one link")
    for i, link in enumerate(chain.links):
        axis = link.rotation_axis
        if axis.shape != (3,):
            raise ChainFormatError(f"links[{i}].rotation_axis: expected 3-vector")
        if abs(np.linalg.norm(axis) - 1.0) > _UNIT_TOL:
            raise ChainFormatError(f"links[{i}].rotation_axis: non-unit axis")
        if link.translation_offset.shape != (3,):
            raise ChainFormatError(f"links[{i}].translation_offset: expected 3-vector")
        _check_rotation(link.fixed_rotation, f"links[{i}].fixed_rotation")
    limits = chain.joint_limits
    if limits.shape != (chain.n_joints, 2):
        raise ChainFormatError(
            f"joint_limits: expected {chain.n_joints} (lo, hi) pairs, got shape {limits.shape}"
        )
    for j, (lo, hi) in enumerate(limits):
        if not lo < hi:
            raise ChainFormatError(f"joint_limits[{j}]: lo must be < hi (got {lo}, {hi})")
    if chain.n_keypoints < 4:
        raise ChainFormatError("keypoints: need at least 4 attachments for robust pose fitting")
    for k, (link_index, offset) in enumerate(chain.keypoint_attachments):
        if not 0 <= link_index < chain.n_joints:
            raise ChainFormatError(f"keypoints[{k}].link: index {link_index} out of range")
        if offset.shape != (3,):
            raise ChainFormatError(f"keypoints[{k}].offset: expected 3-vector")


def load_chain(document: str) -> KinematicChain:
    """Parse a YAML chain document and return a validated chain.

    Raises:
        ChainFormatError: on parse failure or any invariant violation,
            with the offending field path in the message.
    """
    try:
        doc = yaml.safe_load(document)
    except yaml.YAMLError as exc:
        raise ChainFormatError(f"chain document does not parse: {exc}") from exc
    if not isinstance(doc, dict):
        raise ChainFormatError("chain document must be a mapping")
    version = doc.get("format_version")
    if version != CHAIN_FORMAT_VERSION:
        raise ChainFormatError(f"format_version: expected {CHAIN_FORMAT_VERSION}, got {version!r}")
    for key in ("links", "joint_limits", "keypoints"):
        if key not in doc:
            raise ChainFormatError(f"{key}: missing")

    links = []
    for i, entry in enumerate(doc["links"]):
        try:
            axis = entry["rotation_axis"]
            offset = entry["translation_offset"]
        except (KeyError, TypeError) as exc:
            raise ChainFormatError(f"links[{i}]: missing field {exc}") from exc
        fixed = entry.get("fixed_rotation")
        links.append(
            LinkSpec(
                rotation_axis=np.asarray(axis, dtype=np.float64),
                translation_offset=np.asarray(offset, dtype=np.float64),
                fixed_rotation=np.eye(3) if fixed is None else np.asarray(fixed, dtype=np.float64),
            )
        )
    attachments = []
    for k, entry in enumerate(doc["keypoints"]):
        try:
            attachments.append((int(entry["link"]), np.asarray(entry["offset"], dtype=np.float64)))
        except (KeyError, TypeError) as exc:
            raise ChainFormatError(f"keypoints[{k}]: missing field {exc}") from exc

    chain = KinematicChain(
        links=tuple(links),
        keypoint_attachments=tuple(attachments),
        joint_limits=np.asarray(doc["joint_limits"], dtype=np.float64),
    )
    validate_chain(chain)
    return chain


def chain_to_document(chain: KinematicChain) -> str:
    """Serialize a chain back to its YAML document (round-trips load_chain)."""
    doc = {
        "format_version": CHAIN_FORMAT_VERSION,
        "links": [
            {
                "rotation_axis": [float(v) for v in l.rotation_axis],
                "translation_offset": [float(v) for v in l.translation_offset],
                "fixed_rotation": [[float(v) for v in row] for row in l.fixed_rotation],
            }
            for l in chain.links
        ],
        "joint_limits": [[float(lo), float(hi)] for lo, hi in chain.joint_limits],
        "keypoints": [
            {"link": int(idx), "offset": [float(v) for v in off]}
            for idx, off in chain.keypoint_attachments
        ],
    }
    return yaml.safe_dump(doc, sort_keys=True)


def chain_hash(chain: KinematicChain) -> str:
    """Content hash of the chain; exact float64 values via hex encoding."""
    parts = []
    for l in chain.links:
        for arr in (l.rotation_axis, l.translation_offset, l.fixed_rotation.ravel()):
            parts.extend(float(v).hex() for v in arr)
    parts.extend(float(v).hex() for v in chain.joint_limits.ravel())
    for idx, off in chain.keypoint_attachments:
        parts.append(str(idx))
        parts.extend(float(v).hex() for v in off)
    return hashlib.sha256("|".join(parts).encode()).hexdigest()


def forward_kinematics(chain: KinematicChain, angles: np.ndarray) -> np.ndarray:
    """Compute all link frames as an (n_joints, 4, 4) array of SE(3) matrices.

    Raises:
        ValueError: if angles length does not match the chain.
    """
    angles = np.asarray(angles, dtype=np.float64)
    if angles.shape != (chain.n_joints,):
        raise ValueError(f"expected {chain.n_joints} joint angles, got shape {angles.shape}")
    frames = np.empty((chain.n_joints, 4, 4))
    T = np.eye(4)
    for i, link in enumerate(chain.links):
        step = np.eye(4)
        step[:3, :3] = link.fixed_rotation @ _rotation_about_axis(link.rotation_axis, angles[i])
        step[:3, 3] = step[:3, :3] @ link.translation_offset
        T = T @ step
        frames[i] = T
    return frames


def keypoints_robot_frame(chain: KinematicChain, angles: np.ndarray) -> np.ndarray:
    """Base-frame positions of the chain's keypoints, shape (N, 3) meters."""
    frames = forward_kinematics(chain, angles)
    points = np.empty((chain.n_keypoints, 3))
    for k, (link_index, offset) in enumerate(chain.keypoint_attachments):
        T = frames[link_index]
        points[k] = T[:3, :3] @ offset + T[:3, 3]
    return points


def sample_joint_angles(chain: KinematicChain, rng: np.random.Generator) -> np.ndarray:
    """Draw one angle vector, uniform per joint within its limits."""
    lo, hi = chain.joint_limits[:, 0], chain.joint_limits[:, 1]
    return rng.uniform(lo, hi)


def default_chain() -> KinematicChain:
    """Desk-scale 3R arm: yaw base plus two pitch joints, 1.0 m reach, 8 keypoints.

    Keypoints sit at joint origins, mid-links, the tool tip and one
    off-plane lug so pose fitting always sees a non-degenerate spread.
    """
    return load_chain(DEFAULT_CHAIN_DOCUMENT)


DEFAULT_CHAIN_DOCUMENT = """\
format_version: 1
links:
  - rotation_axis: [0.0, 0.0, 1.0]
    translation_offset: [0.0, 0.0, 0.3]
  - rotation_axis: [0.0, 1.0, 0.0]
    translation_offset: [0.4, 0.0, 0.0]
  - rotation_axis: [0.0, 1.0, 0.0]
    translation_offset: [0.3, 0.0, 0.0]
joint_limits:
  - [-2.9, 2.9]
  - [-2.9, 2.9]
  - [-2.9, 2.9]
keypoints:
  - {link: 0, offset: [0.0, 0.0, -0.3]}   # base origin
  - {link: 0, offset: [0.0, 0.0, 0.0]}    # shoulder
  - {link: 1, offset: [-0.2, 0.0, 0.0]}   # mid upper arm
  - {link: 1, offset: [0.0, 0.0, 0.0]}    # elbow
  - {link: 1, offset: [0.0, 0.05, 0.0]}   # elbow side lug (off-plane)
  - {link: 2, offset: [-0.15, 0.0, 0.0]}  # mid forearm
  - {link: 2, offset: [0.0, 0.0, 0.0]}    # wrist
  - {link: 2, offset: [0.0, 0.0, 0.05]}   # tool tip
"""
