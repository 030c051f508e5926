"""SE(3) / so(3) manifold arithmetic.

Twist vectors are ordered rotation-first: ``[wx, wy, wz, vx, vy, vz]`` with
the rotation part in radians and the translation part in meters.  All
manifold updates elsewhere in the package are right-multiplicative,
``T <- T * exp(delta)``, and every analytic Jacobian in :mod:`rigcalib.factors`
shares that convention.

Rotations are stored as unit quaternions (Hamilton convention, w first in
memory, w last in serialized form); matrices are produced on demand and
cached.  All types are immutable values after construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AngleNearPiError, OutOfRangeError

_SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix so that skew(a) @ b == cross(a, b)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array(
        [
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ]
    )


def _quat_from_matrix(r: np.ndarray) -> np.ndarray:
    # Shepperd's method: pick the largest diagonal pivot for stability.
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        q = np.array(
            [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        )
    elif r[1, 1] >= r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        q = np.array(
            [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        q = np.array(
            [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def _quat_from_axis_angle(omega: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(omega))
    if angle < 1e-4:
        # sin(a/2)/a ~ 1/2 - a^2/48 + a^4/3840
        a2 = angle * angle
        half = 0.5 - a2 / 48.0 + a2 * a2 / 3840.0
        return np.concatenate(([math.cos(angle / 2.0)], half * omega))
    axis = omega / angle
    return np.concatenate(([math.cos(angle / 2.0)], math.sin(angle / 2.0) * axis))


class RigidTransform:
    """An element of SE(3): rotation (unit quaternion) plus translation."""

    __slots__ = ("q", "t", "_rot")

    def __init__(self, q: np.ndarray, t: np.ndarray):
        q = np.asarray(q, dtype=float)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("quaternion must be finite and nonzero")
        q = q / n
        if q[0] < 0.0:
            q = -q
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", np.asarray(t, dtype=float).reshape(3).copy())
        object.__setattr__(self, "_rot", None)

    def __setattr__(self, name, value):
        raise AttributeError("RigidTransform is immutable")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_rotation(cls, r: np.ndarray, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(_quat_from_matrix(np.asarray(r, dtype=float)), np.asarray(t, dtype=float))

    @classmethod
    def from_xyzw(cls, qx, qy, qz, qw, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Build from the serialized quaternion order (w last)."""
        return cls(np.array([qw, qx, qy, qz], dtype=float), np.asarray(t, dtype=float))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(_quat_from_matrix(m[:3, :3]), m[:3, 3])

    @classmethod
    def from_rpy(cls, roll: float, pitch: float, yaw: float, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """ZYX Euler convention: R = Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
        qz = _quat_from_axis_angle(np.array([0.0, 0.0, yaw]))
        qy = _quat_from_axis_angle(np.array([0.0, pitch, 0.0]))
        qx = _quat_from_axis_angle(np.array([roll, 0.0, 0.0]))
        return cls(_quat_mul(_quat_mul(qz, qy), qx), np.asarray(t, dtype=float))

    @classmethod
    def translation(cls, x: float, y: float, z: float) -> "RigidTransform":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.array([x, y, z], dtype=float))

    @property
    def rotation(self) -> np.ndarray:
        if self._rot is None:
            object.__setattr__(self, "_rot", _quat_to_matrix(self.q))
        return self._rot

    def xyzw(self) -> np.ndarray:
        """Quaternion in serialized order [qx, qy, qz, qw]."""
        return np.array([self.q[1], self.q[2], self.q[3], self.q[0]])

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            _quat_mul(self.q, other.q), self.rotation @ other.t + self.t
        )

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        qinv = self.q * np.array([1.0, -1.0, -1.0, -1.0])
        rt = self.rotation.T
        return RigidTransform(qinv, -(rt @ self.t))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N, 3) array of points."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            return self.rotation @ pts + self.t
        return pts @ self.rotation.T + self.t

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.t
        return m

    def rotation_angle(self) -> float:
        """Rotation magnitude in radians."""
        return 2.0 * math.atan2(float(np.linalg.norm(self.q[1:])), abs(float(self.q[0])))

    def __repr__(self) -> str:
        q = self.xyzw()
        return (
            f"RigidTransform(t=[{self.t[0]:.6g}, {self.t[1]:.6g}, {self.t[2]:.6g}], "
            f"q_xyzw=[{q[0]:.6g}, {q[1]:.6g}, {q[2]:.6g}, {q[3]:.6g}])"
        )


def _so3_coeffs(angle: float) -> tuple[float, float, float]:
    """(sin a / a, (1 - cos a) / a^2, (a - sin a) / a^3) without cancellation."""
    a2 = angle * angle
    if angle < 1e-4:
        return (
            1.0 - a2 / 6.0 + a2 * a2 / 120.0,
            0.5 - a2 / 24.0 + a2 * a2 / 720.0,
            1.0 / 6.0 - a2 / 120.0 + a2 * a2 / 5040.0,
        )
    sa = math.sin(angle)
    sh = math.sin(0.5 * angle)
    return sa / angle, 2.0 * sh * sh / a2, (angle - sa) / (a2 * angle)


def so3_exp(omega: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(omega))
    a, b, _ = _so3_coeffs(angle)
    k = skew(omega)
    return np.eye(3) + a * k + b * (k @ k)


def so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(omega))
    _, b, c = _so3_coeffs(angle)
    k = skew(omega)
    return np.eye(3) + b * k + c * (k @ k)


def exp_map(xi: np.ndarray) -> RigidTransform:
    """SE(3) exponential of a twist [w, v]."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    omega, v = xi[:3], xi[3:]
    q = _quat_from_axis_angle(omega)
    return RigidTransform(q, so3_left_jacobian(omega) @ v)


def log_map(t: RigidTransform) -> np.ndarray:
    """SE(3) logarithm; raises AngleNearPiError near the pi-rotation cut."""
    angle = t.rotation_angle()
    if angle >= math.pi - 1e-6:
        raise AngleNearPiError(f"rotation angle {angle:.9f} rad too close to pi")
    qv = t.q[1:]
    n = float(np.linalg.norm(qv))
    if n < _SMALL_ANGLE:
        omega = 2.0 * qv  # first-order: q ~ [1, w/2]
    else:
        omega = (angle / n) * qv
    a2 = angle * angle
    if angle < 1e-4:
        d = 1.0 / 12.0 + a2 / 720.0 + a2 * a2 / 30240.0
    else:
        sa, ca = math.sin(angle), math.cos(angle)
        d = (1.0 / a2) - (1.0 + ca) / (2.0 * angle * sa)
    k = skew(omega)
    v_inv = np.eye(3) - 0.5 * k + d * (k @ k)
    return np.concatenate([omega, v_inv @ t.t])


def adjoint(t: RigidTransform) -> np.ndarray:
    """6x6 adjoint so that Ad(T) xi == twist of T * exp(xi) * T^-1."""
    r = t.rotation
    ad = np.zeros((6, 6))
    ad[:3, :3] = r
    ad[3:, 3:] = r
    ad[3:, :3] = skew(t.t) @ r
    return ad


def _q_block(omega: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Translation-by-rotation coupling block of the SE(3) left Jacobian."""
    angle = float(np.linalg.norm(omega))
    a2 = angle * angle
    if angle < 1e-2:
        # truncation below 1e-18; the closed forms cancel badly here
        c1 = 1.0 / 6.0 - a2 / 120.0 + a2 * a2 / 5040.0
        c2 = -1.0 / 24.0 + a2 / 720.0 - a2 * a2 / 40320.0
        c3 = -1.0 / 120.0 + a2 / 5040.0 - a2 * a2 / 362880.0
    else:
        sa, ca = math.sin(angle), math.cos(angle)
        a4 = a2 * a2
        c1 = (angle - sa) / (a2 * angle)
        c2 = (1.0 - a2 / 2.0 - ca) / a4
        c3 = (angle - sa - a2 * angle / 6.0) / (a4 * angle)
    w = skew(omega)
    p = skew(v)
    wp, pw = w @ p, p @ w
    wpw = wp @ w
    w2 = w @ w
    m1 = wp + pw + wpw
    m2 = w2 @ p + p @ w2 - 3.0 * wpw
    m3 = wp @ w2 + w2 @ pw
    return 0.5 * p + c1 * m1 - c2 * m2 - 0.5 * (c2 - 3.0 * c3) * m3


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    """Left Jacobian of the SE(3) exponential in [w, v] ordering."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    jw = so3_left_jacobian(xi[:3])
    out = np.zeros((6, 6))
    out[:3, :3] = jw
    out[3:, 3:] = jw
    out[3:, :3] = _q_block(xi[:3], xi[3:])
    return out


def se3_right_jacobian(xi: np.ndarray) -> np.ndarray:
    return se3_left_jacobian(-np.asarray(xi, dtype=float))


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return np.linalg.inv(se3_right_jacobian(xi))


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return np.linalg.inv(se3_left_jacobian(xi))


@dataclass(frozen=True)
class PlaneModel:
    """Plane n . x + d = 0 with a unit normal, canonically oriented n_z >= 0."""

    normal: np.ndarray
    intercept: float

    @classmethod
    def canonical(cls, normal: np.ndarray, intercept: float) -> "PlaneModel":
        n = np.asarray(normal, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            raise ValueError("plane normal must be nonzero")
        n = n / norm
        d = float(intercept) / norm
        if n[2] < 0.0:
            n, d = -n, -d
        return cls(n, d)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.normal + self.intercept


def rotation_between_planes(source: PlaneModel, target: PlaneModel) -> RigidTransform:
    """Rigid transform whose rotation maps source.normal to target.normal and
    whose translation is (0, 0, source.intercept - target.intercept)."""
    n1 = np.asarray(source.normal, dtype=float)
    n2 = np.asarray(target.normal, dtype=float)
    cross = np.cross(n1, n2)
    cn = float(np.linalg.norm(cross))
    tz = np.array([0.0, 0.0, source.intercept - target.intercept])
    if cn < 1e-9:
        return RigidTransform(np.array([1.0, 0.0, 0.0, 0.0]), tz)
    axis = cross / cn
    theta = math.acos(max(-1.0, min(1.0, float(n1 @ n2))))
    k = skew(axis)
    r = np.eye(3) + math.sin(theta) * k + (1.0 - math.cos(theta)) * (k @ k)
    return RigidTransform.from_rotation(r, tz)


def extrinsic_error(
    estimate: RigidTransform, ground_truth: RigidTransform
) -> tuple[float, float]:
    """(rotation error in degrees, translation error in meters).

    Rotation error is the axis-angle magnitude of R_gt^-1 R_est; both norms
    are reported unsquared.
    """
    rel = RigidTransform(
        _quat_mul(ground_truth.q * np.array([1.0, -1.0, -1.0, -1.0]), estimate.q),
        np.zeros(3),
    )
    rot_err = math.degrees(rel.rotation_angle())
    trans_err = float(np.linalg.norm(ground_truth.t - estimate.t))
    return rot_err, trans_err


def interpolate_pose(
    a: tuple[float, RigidTransform], b: tuple[float, RigidTransform], t: float
) -> RigidTransform:
    """Geodesic interpolation between two timestamped poses."""
    ta, pa = a
    tb, pb = b
    if not (ta <= t <= tb) or ta >= tb:
        raise OutOfRangeError(f"time {t} outside [{ta}, {tb}]")
    s = (t - ta) / (tb - ta)
    if s == 0.0:
        return pa
    if s == 1.0:
        return pb
    return pa @ exp_map(s * log_map(pa.inverse() @ pb))


class Trajectory:
    """Time-sorted pose sequence with geodesic lookup in between samples."""

    def __init__(self, times, poses):
        times = np.asarray(times, dtype=float)
        if times.ndim != 1 or len(times) != len(poses):
            raise ValueError("times and poses must have matching lengths")
        if len(times) and np.any(np.diff(times) <= 0.0):
            raise ValueError("trajectory times must be strictly increasing")
        self.times = times
        self.poses = list(poses)

    def __len__(self) -> int:
        return len(self.poses)

    def pose_at(self, t: float) -> RigidTransform:
        times = self.times
        if len(times) == 0 or t < times[0] or t > times[-1]:
            raise OutOfRangeError(f"time {t} outside trajectory span")
        idx = int(np.searchsorted(times, t))
        if idx < len(times) and times[idx] == t:
            return self.poses[idx]
        lo = idx - 1
        return interpolate_pose(
            (times[lo], self.poses[lo]), (times[idx], self.poses[idx]), t
        )

    def yaw_span(self) -> float:
        """Unwrapped yaw range in radians over the trajectory."""
        yaws = np.array(
            [math.atan2(p.rotation[1, 0], p.rotation[0, 0]) for p in self.poses]
        )
        if len(yaws) == 0:
            return 0.0
        yaws = np.unwrap(yaws)
        return float(yaws.max() - yaws.min())
