"""Frame-tagged 3D geometry: rotations, quaternions, SE(3) transforms.

Conventions
-----------
- Rotation matrices are 3x3, right-handed, acting on column vectors.
- Quaternions are (w, x, y, z), unit norm, canonical sign w >= 0.
- Euler angles use the fixed-axis XYZ convention,
  ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``, and are reported in degrees.
  Everywhere else angles are radians.
- Transforms and point clouds carry frame names; cross-frame arithmetic
  raises :class:`~calibkit.errors.FrameMismatchError` instead of silently
  computing nonsense.

All types are immutable values; all operations are pure functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    FrameMismatchError,
    NonFiniteValueError,
    NotARotationError,
    ValidationError,
)

__all__ = [
    "Point3",
    "PointCloud",
    "UnitQuaternion",
    "EulerAnglesXYZ",
    "RigidTransform",
    "compose",
    "invert",
    "apply",
    "quat_to_matrix",
    "matrix_to_quat",
    "matrix_to_euler_xyz",
    "euler_xyz_to_matrix",
    "rotation_x",
    "rotation_y",
    "rotation_z",
    "rotation_about_axis",
    "rotation_angle_between",
    "check_rotation",
    "as_vec3",
]

_ORTHONORMAL_TOL = 1e-6


def as_vec3(value, name="vector"):
    """Coerce a Point3 / sequence / array to a finite float64 (3,) array."""
    if isinstance(value, Point3):
        return value.as_array()
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (3,):
        raise ValidationError(f"{name} must have 3 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValueError(f"{name} contains non-finite values: {arr}")
    return arr


def _check_frame(name, label="frame"):
    if not isinstance(name, str) or not name:
        raise ValidationError(f"{label} must be a nonempty string, got {name!r}")
    return name


@dataclass(frozen=True)
class Point3:
    """A 3D point in meters. Components must be finite."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        for label, v in (("x", self.x), ("y", self.y), ("z", self.z)):
            v = float(v)
            if not math.isfinite(v):
                raise NonFiniteValueError(f"Point3.{label} is non-finite: {v}")
            object.__setattr__(self, label, v)

    @classmethod
    def from_array(cls, arr):
        a = as_vec3(arr, "Point3")
        return cls(a[0], a[1], a[2])

    def as_array(self):
        return np.array([self.x, self.y, self.z], dtype=np.float64)


def _readonly(arr):
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered set of 3D points tagged with the frame they live in.

    ``ring``, when given, is a per-point laser channel index (one entry per
    point, non-negative integers).
    """

    frame: str
    xyz: np.ndarray
    ring: np.ndarray | None = None

    def __post_init__(self):
        _check_frame(self.frame)
        xyz = np.asarray(self.xyz, dtype=np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ValidationError(f"cloud must be (N, 3), got shape {xyz.shape}")
        if not np.all(np.isfinite(xyz)):
            raise NonFiniteValueError("cloud contains non-finite coordinates")
        object.__setattr__(self, "xyz", _readonly(xyz))
        if self.ring is not None:
            ring = np.asarray(self.ring)
            if ring.shape != (len(xyz),):
                raise ValidationError(
                    f"ring must have one entry per point: {ring.shape} vs {len(xyz)} points"
                )
            if ring.dtype.kind not in "iu" or (len(ring) and ring.min() < 0):
                raise ValidationError("ring indices must be non-negative integers")
            ring = np.array(ring, dtype=np.int64)
            ring.setflags(write=False)
            object.__setattr__(self, "ring", ring)

    @classmethod
    def from_points(cls, frame, points, ring=None):
        xyz = np.array([as_vec3(p, "point") for p in points], dtype=np.float64)
        if len(points) == 0:
            xyz = xyz.reshape(0, 3)
        return cls(frame, xyz, ring)

    def __len__(self):
        return len(self.xyz)

    def point(self, i):
        return Point3.from_array(self.xyz[i])

    def select(self, mask_or_indices):
        ring = None if self.ring is None else self.ring[mask_or_indices]
        return PointCloud(self.frame, self.xyz[mask_or_indices], ring)


@dataclass(frozen=True)
class UnitQuaternion:
    """Unit quaternion (w, x, y, z); normalized and sign-canonicalized on
    construction so that w >= 0 (and, for w == 0, the first nonzero of
    x, y, z is positive)."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        q = np.array([self.w, self.x, self.y, self.z], dtype=np.float64)
        if not np.all(np.isfinite(q)):
            raise NonFiniteValueError(f"quaternion is non-finite: {q}")
        norm = float(np.linalg.norm(q))
        if norm < 1e-12:
            raise ValidationError("quaternion has (near-)zero norm")
        if abs(norm - 1.0) > 1e-12:  # keep already-unit inputs bit-stable
            q = q / norm
        q = _canonical_quat_array(q)
        for label, v in zip("wxyz", q):
            object.__setattr__(self, label, float(v))

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (4,):
            raise ValidationError(f"quaternion must have 4 components, got {arr.shape}")
        return cls(arr[0], arr[1], arr[2], arr[3])

    def as_array(self):
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def rotate(self, v):
        """Rotate a 3-vector directly by this quaternion (no matrix)."""
        v = as_vec3(v)
        qv = np.array([self.x, self.y, self.z])
        t = 2.0 * np.cross(qv, v)
        return v + self.w * t + np.cross(qv, t)


def _canonical_quat_array(q):
    """Resolve the q / -q double cover: w >= 0, ties broken on x, y, z."""
    for c in q:
        if c > 0.0:
            return q
        if c < 0.0:
            return -q
    return q


@dataclass(frozen=True)
class EulerAnglesXYZ:
    """Fixed-axis XYZ Euler angles in degrees: roll about x, pitch about y,
    yaw about z, composing as R = Rz(yaw) @ Ry(pitch) @ Rx(roll).

    ``gimbal_lock`` is set when |pitch| is within 1e-6 degrees of 90; there
    roll and yaw are not individually observable (yaw is reported as 0).
    """

    roll: float
    pitch: float
    yaw: float
    gimbal_lock: bool = field(default=False, compare=False)


def check_rotation(matrix, tol=_ORTHONORMAL_TOL):
    """Validate a 3x3 rotation matrix and return a clean orthonormal copy.

    Inputs within ``tol`` of orthonormal (and with positive determinant) are
    accepted and re-projected onto SO(3); reflections and anything farther
    away raise :class:`NotARotationError`.
    """
    r = np.asarray(matrix, dtype=np.float64)
    if r.shape != (3, 3):
        raise NotARotationError(f"rotation must be 3x3, got shape {r.shape}")
    if not np.all(np.isfinite(r)):
        raise NonFiniteValueError("rotation matrix contains non-finite values")
    err = np.max(np.abs(r.T @ r - np.eye(3)))
    if err > tol:
        raise NotARotationError(f"matrix is not orthonormal (max |R'R - I| = {err:.3e})")
    det = np.linalg.det(r)
    if det < 0.0:
        raise NotARotationError(f"matrix is a reflection (det = {det:.6f})")
    if err > 1e-12:
        u, _, vt = np.linalg.svd(r)
        r = u @ vt
        if np.linalg.det(r) < 0.0:  # only reachable for inputs near the tol edge
            raise NotARotationError("matrix does not project onto a proper rotation")
    return _readonly(r)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) element mapping points from ``from_frame`` to ``to_frame``:
    p_to = R @ p_from + t."""

    rotation: np.ndarray
    translation: np.ndarray
    from_frame: str
    to_frame: str

    def __post_init__(self):
        _check_frame(self.from_frame, "from_frame")
        _check_frame(self.to_frame, "to_frame")
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        object.__setattr__(self, "translation", _readonly(as_vec3(self.translation, "translation")))

    @classmethod
    def identity(cls, frame, to_frame=None):
        return cls(np.eye(3), np.zeros(3), frame, to_frame if to_frame is not None else frame)

    @classmethod
    def from_matrix(cls, matrix, from_frame, to_frame):
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValidationError(f"homogeneous transform must be 4x4, got {m.shape}")
        if np.max(np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > 1e-9:
            raise ValidationError("last row of a homogeneous transform must be [0 0 0 1]")
        return cls(m[:3, :3], m[:3, 3], from_frame, to_frame)

    def as_matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self):
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation, self.to_frame, self.from_frame)

    def transform_points(self, xyz):
        """Apply to raw coordinates (no frame checking)."""
        xyz = np.asarray(xyz, dtype=np.float64)
        return xyz @ self.rotation.T + self.translation

    def transform_point(self, p):
        return Point3.from_array(self.rotation @ as_vec3(p) + self.translation)

    def apply(self, cloud):
        """Map a PointCloud from ``from_frame`` into ``to_frame``."""
        if cloud.frame != self.from_frame:
            raise FrameMismatchError(
                f"cloud is in frame {cloud.frame!r} but transform expects {self.from_frame!r}"
            )
        return PointCloud(self.to_frame, self.transform_points(cloud.xyz), cloud.ring)

    def compose(self, other):
        """self after other: maps other.from_frame -> self.to_frame."""
        if self.from_frame != other.to_frame:
            raise FrameMismatchError(
                f"cannot chain: transform from {other.from_frame!r}->{other.to_frame!r} "
                f"into {self.from_frame!r}->{self.to_frame!r}"
            )
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
            other.from_frame,
            self.to_frame,
        )

    def __matmul__(self, other):
        return self.compose(other)

    def quaternion(self):
        return matrix_to_quat(self.rotation)

    def euler_xyz(self):
        return matrix_to_euler_xyz(self.rotation)

    def __repr__(self):
        e = self.euler_xyz()
        t = self.translation
        return (
            f"RigidTransform({self.from_frame!r}->{self.to_frame!r}, "
            f"rpy_deg=({e.roll:.4f}, {e.pitch:.4f}, {e.yaw:.4f}), "
            f"t=({t[0]:.6f}, {t[1]:.6f}, {t[2]:.6f}))"
        )


def compose(a, b):
    """Compose two transforms: result applies b first, then a."""
    return a.compose(b)


def invert(t):
    return t.inverse()


def apply(t, cloud):
    return t.apply(cloud)


def quat_to_matrix(q):
    """Rotation matrix of a unit quaternion."""
    if not isinstance(q, UnitQuaternion):
        q = UnitQuaternion.from_array(q)
    w, x, y, z = q.w, q.x, q.y, q.z
    return _readonly(
        np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )
    )


def matrix_to_quat(matrix):
    """Canonical unit quaternion of a rotation matrix (Shepperd's method,
    branch chosen by the largest of trace/diagonal for stability near 180
    degree rotations)."""
    r = check_rotation(matrix)
    t = r[0, 0] + r[1, 1] + r[2, 2]
    if t > max(r[0, 0], r[1, 1], r[2, 2]):
        s = 2.0 * math.sqrt(1.0 + t)
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
        s = 2.0 * math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = np.array(
            [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        )
    elif r[1, 1] >= r[2, 2]:
        s = 2.0 * math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = np.array(
            [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        )
    else:
        s = 2.0 * math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = np.array(
            [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        )
    return UnitQuaternion.from_array(q)


def rotation_x(angle_rad):
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return _readonly(np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]))


def rotation_y(angle_rad):
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return _readonly(np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]))


def rotation_z(angle_rad):
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return _readonly(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]))


def rotation_about_axis(axis, angle_rad):
    """Rodrigues rotation about an arbitrary (not necessarily unit) axis."""
    axis = as_vec3(axis, "axis")
    norm = np.linalg.norm(axis)
    if norm < 1e-12:
        raise ValidationError("rotation axis has (near-)zero norm")
    x, y, z = axis / norm
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return _readonly(np.eye(3) + math.sin(angle_rad) * k + (1.0 - math.cos(angle_rad)) * (k @ k))


def rotation_angle_between(r_a, r_b):
    """Geodesic angle (radians) between two rotations: angle of R_a @ R_b.T.

    Computed from both the symmetric and antisymmetric parts (atan2 form):
    the pure-arccos form cannot resolve angles below ~1e-8 rad.
    """
    rel = np.asarray(r_a) @ np.asarray(r_b).T
    cos_angle = (np.trace(rel) - 1.0) / 2.0
    axis = 0.5 * np.array(
        [rel[2, 1] - rel[1, 2], rel[0, 2] - rel[2, 0], rel[1, 0] - rel[0, 1]]
    )
    return math.atan2(np.linalg.norm(axis), cos_angle)


def euler_xyz_to_matrix(roll_deg, pitch_deg, yaw_deg):
    """Build R = Rz(yaw) @ Ry(pitch) @ Rx(roll) from angles in degrees."""
    return _readonly(
        rotation_z(math.radians(yaw_deg))
        @ rotation_y(math.radians(pitch_deg))
        @ rotation_x(math.radians(roll_deg))
    )


def matrix_to_euler_xyz(matrix):
    """Decompose a rotation into fixed-axis XYZ angles (degrees).

    At gimbal lock (|pitch| = 90 deg) yaw is fixed to 0 and the remaining
    in-plane angle is reported as roll, with ``gimbal_lock`` set.
    """
    r = check_rotation(matrix)
    sp = -r[2, 0]
    sp = min(1.0, max(-1.0, sp))
    pitch = math.asin(sp)
    cp = math.hypot(r[2, 1], r[2, 2])
    if cp < 1e-12:
        yaw = 0.0
        if sp > 0.0:  # pitch = +90: only roll - yaw observable
            roll = math.atan2(r[0, 1], r[1, 1])
        else:  # pitch = -90: only roll + yaw observable
            roll = math.atan2(-r[0, 1], r[1, 1])
    else:
        roll = math.atan2(r[2, 1], r[2, 2])
        yaw = math.atan2(r[1, 0], r[0, 0])
    pitch_deg = math.degrees(pitch)
    locked = abs(90.0 - abs(pitch_deg)) <= 1e-6
    return EulerAnglesXYZ(math.degrees(roll), pitch_deg, math.degrees(yaw), gimbal_lock=locked)
