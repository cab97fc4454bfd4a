"""Quaternion and rigid-transform helpers shared by the scene, renderer and
condition-map modules.

Conventions used everywhere in this package:
  * quaternions are float64 arrays ``(qx, qy, qz, qw)`` -- scalar last,
    Hamilton product, active rotations;
  * a :class:`Pose` maps points from its own frame into the parent frame,
    ``p_parent = R @ p + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

IDENTITY_QUAT = np.array([0.0, 0.0, 0.0, 1.0])


def as_vec3(value, name: str = "vector") -> np.ndarray:
    """Coerce to a finite float64 array of shape (3,)."""
    v = np.asarray(value, dtype=np.float64)
    if v.shape != (3,):
        raise ValidationError(f"{name} must have shape (3,), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"{name} has non-finite components: {v}")
    return v


def normalize_quaternion(value, name: str = "quaternion") -> np.ndarray:
    """Validate and normalize a qw-last quaternion.

    Inputs with norm in [0.5, 2] are accepted and rescaled to unit norm;
    anything outside that band is treated as corrupt rather than silently
    fixed up.
    """
    q = np.asarray(value, dtype=np.float64)
    if q.shape != (4,):
        raise ValidationError(f"{name} must have shape (4,), got {q.shape}")
    if not np.all(np.isfinite(q)):
        raise ValidationError(f"{name} has non-finite components: {q}")
    norm = float(np.linalg.norm(q))
    if not 0.5 <= norm <= 2.0:
        raise ValidationError(f"{name} norm {norm:.6g} outside tolerated band [0.5, 2]")
    return q / norm


def quaternion_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a qw-last unit quaternion."""
    x, y, z, w = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def quaternion_multiply(a, b) -> np.ndarray:
    """Hamilton product a*b (qw-last); composes rotations: R(a*b) = R(a) @ R(b)."""
    ax, ay, az, aw = np.asarray(a, dtype=np.float64)
    bx, by, bz, bw = np.asarray(b, dtype=np.float64)
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def quaternion_conjugate(q) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=np.float64)
    return np.array([-x, -y, -z, w])


@dataclass(frozen=True)
class Pose:
    """Rigid transform: rotation (unit quaternion, qw-last) plus translation in meters."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())

    def __post_init__(self):
        object.__setattr__(self, "translation", as_vec3(self.translation, "translation"))
        object.__setattr__(self, "rotation", normalize_quaternion(self.rotation, "rotation"))

    @property
    def matrix(self) -> np.ndarray:
        return quaternion_to_matrix(self.rotation)

    def apply(self, points) -> np.ndarray:
        """Transform points of shape (3,) or (N, 3) into the parent frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix.T + self.translation

    def inverse(self) -> "Pose":
        r_inv = quaternion_conjugate(self.rotation)
        t_inv = -(quaternion_to_matrix(r_inv) @ self.translation)
        return Pose(translation=t_inv, rotation=r_inv)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply `other` first, then `self`."""
        return Pose(
            translation=self.apply(other.translation),
            rotation=quaternion_multiply(self.rotation, other.rotation),
        )

    def as_7tuple(self) -> list[float]:
        """[x, y, z, qx, qy, qz, qw] layout used by trajectory records."""
        return [*self.translation.tolist(), *self.rotation.tolist()]

    @staticmethod
    def from_7tuple(values) -> "Pose":
        v = np.asarray(values, dtype=np.float64)
        if v.shape != (7,):
            raise ValidationError(f"pose tuple must have 7 entries, got shape {v.shape}")
        return Pose(translation=v[:3], rotation=v[3:])


def identity_pose() -> Pose:
    return Pose()
