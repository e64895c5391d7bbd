"""Rigid-body pose algebra and rotation representations.

Conventions used throughout the package:

* World frame: right-handed; the patient lies prone with the back facing
  +z, +x runs patient left to right, +y head to feet. The frontal plane is
  therefore the x-y plane and the transverse plane the x-z plane.
* Probe frame: origin at the skin contact point, z-axis pointing from the
  skin into the body (imaging direction), x-axis along the image width.
  Image rows advance along probe +z.
* Angle-axis vectors encode the rotation axis as direction and the angle
  (in [0, pi]) as magnitude. Quaternions are (w, x, y, z), unit norm,
  canonicalized to w >= 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Pose",
    "angle_axis_of",
    "rotation_of",
    "quat_of_matrix",
    "matrix_of_quat",
    "relative_pose",
    "rotation_with_z_axis",
    "unit",
]


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n < 1e-12:
        raise ValueError("cannot normalize a near-zero vector")
    return v / n


def skew(v):
    v = np.asarray(v, dtype=np.float64)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def rotation_of(axis_angle):
    """Rotation matrix from an angle-axis 3-vector (Rodrigues formula)."""
    v = np.asarray(axis_angle, dtype=np.float64).reshape(3)
    theta2 = float(v @ v)
    theta = math.sqrt(theta2)
    if theta < 1e-8:
        # second-order series keeps the map smooth through zero
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta2
    k = skew(v)
    return np.eye(3) + a * k + b * (k @ k)


def angle_axis_of(rotation):
    """Angle-axis 3-vector of a rotation matrix; angle in [0, pi].

    Near pi the axis sign is ambiguous (R(pi*a) == R(-pi*a)); the component
    of largest magnitude is made positive, first index winning ties, so the
    result is deterministic.
    """
    r = np.asarray(rotation, dtype=np.float64)
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    s = 0.5 * float(np.linalg.norm(w))
    c = 0.5 * (float(np.trace(r)) - 1.0)
    theta = math.atan2(s, c)
    if theta < 1e-10:
        return np.zeros(3)
    if theta < math.pi - 1e-4:
        return (theta / (2.0 * math.sin(theta))) * w
    # near pi: recover the axis from the symmetric part, which stays
    # well-conditioned where the skew part vanishes
    m = (0.5 * (r + r.T) - c * np.eye(3)) / (1.0 - c)
    k = int(np.argmax(np.diag(m)))
    axis = m[:, k] / math.sqrt(max(m[k, k], 1e-15))
    axis = axis / np.linalg.norm(axis)
    if s > 1e-8:
        if float(axis @ w) < 0.0:
            axis = -axis
    else:
        j = int(np.argmax(np.abs(axis)))
        if axis[j] < 0.0:
            axis = -axis
    return theta * axis


def quat_of_matrix(rotation):
    """Unit quaternion (w, x, y, z) of a rotation, canonicalized to w >= 0."""
    r = np.asarray(rotation, dtype=np.float64)
    t = float(np.trace(r))
    if t > 0.0:
        u = math.sqrt(1.0 + t)
        w = 0.5 * u
        x = 0.5 * (r[2, 1] - r[1, 2]) / u
        y = 0.5 * (r[0, 2] - r[2, 0]) / u
        z = 0.5 * (r[1, 0] - r[0, 1]) / u
    else:
        i = int(np.argmax([r[0, 0], r[1, 1], r[2, 2]]))
        j, k = (i + 1) % 3, (i + 2) % 3
        u = math.sqrt(1.0 + r[i, i] - r[j, j] - r[k, k])
        q = np.empty(4)
        q[1 + i] = 0.5 * u
        q[0] = 0.5 * (r[k, j] - r[j, k]) / u
        q[1 + j] = 0.5 * (r[j, i] + r[i, j]) / u
        q[1 + k] = 0.5 * (r[k, i] + r[i, k]) / u
        w, x, y, z = q
    q = np.array([w, x, y, z])
    q /= np.linalg.norm(q)
    if q[0] < 0.0 or (q[0] == 0.0 and q[np.nonzero(q)[0][0]] < 0.0):
        q = -q
    return q


def matrix_of_quat(quat_wxyz):
    """Rotation matrix from a (w, x, y, z) quaternion (normalized first)."""
    q = np.asarray(quat_wxyz, dtype=np.float64).reshape(4)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class Pose:
    """Rigid transform; maps local points as rotation @ p + position.

    Instances are treated as immutable: the arrays are copied on
    construction and must not be written to afterwards.
    """

    position: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        p = np.array(self.position, dtype=np.float64).reshape(3)
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "rotation", r)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), np.eye(3))

    @staticmethod
    def from_quat(position, quat_wxyz) -> "Pose":
        return Pose(position, matrix_of_quat(quat_wxyz))

    @staticmethod
    def from_angle_axis(position, axis_angle) -> "Pose":
        return Pose(position, rotation_of(axis_angle))

    def compose(self, other: "Pose") -> "Pose":
        """self o other: apply `other` first, then `self`."""
        return Pose(
            self.position + self.rotation @ other.position,
            self.rotation @ other.rotation,
        )

    def invert(self) -> "Pose":
        rt = self.rotation.T
        return Pose(-(rt @ self.position), rt.copy())

    def transform(self, points):
        """Apply to one point (3,) or a stack of points (..., 3)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.position

    def angle_axis(self):
        return angle_axis_of(self.rotation)

    def quaternion(self):
        return quat_of_matrix(self.rotation)

    def axes(self):
        """x, y, z axes of this frame expressed in the parent frame."""
        return self.rotation[:, 0], self.rotation[:, 1], self.rotation[:, 2]

    def is_valid(self, tol: float = 1e-6) -> bool:
        r = self.rotation
        return (
            bool(np.all(np.isfinite(self.position)))
            and float(np.abs(r @ r.T - np.eye(3)).max()) < tol
            and abs(float(np.linalg.det(r)) - 1.0) < tol
        )


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def relative_pose(a: Pose, b: Pose) -> Pose:
    """Pose of `b` expressed in `a`'s frame: invert(a) o b."""
    rt = a.rotation.T
    return Pose(rt @ (b.position - a.position), rt @ b.rotation)


def rotation_with_z_axis(z_axis, yaw: float, ref=(1.0, 0.0, 0.0)):
    """Rotation matrix whose third column equals unit(z_axis).

    At yaw 0 the x-axis is `ref` projected onto the plane normal to z_axis;
    yaw then rotates the x-axis about z (right-handed). Raises when z_axis
    is (nearly) parallel to ref, which cannot happen for dorsal skin
    normals with the default world-x reference.
    """
    z = unit(z_axis)
    ref = np.asarray(ref, dtype=np.float64)
    t = ref - float(ref @ z) * z
    n = float(np.linalg.norm(t))
    if n < 1e-9:
        raise ValueError("reference axis parallel to z_axis")
    t = t / n
    x = math.cos(yaw) * t + math.sin(yaw) * np.cross(z, t)
    y = np.cross(z, x)
    return np.column_stack([x, y, z])
