"""Rotation, quaternion and skew-symmetric primitives.

Quaternions are stored scalar-first, ``(w, x, y, z)``. Every function accepts
either a single quaternion / vector or a stacked array with the component
axis last.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import NonUnitQuaternion

UNIT_TOL = 1e-6


def skew(v):
    """Cross-product matrix: ``skew(v) @ u == np.cross(v, u)``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotation(q, check=True):
    q = np.asarray(q, dtype=float)
    if check:
        norms = np.linalg.norm(q, axis=-1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise NonUnitQuaternion(f"quaternion norm {np.max(np.abs(norms - 1.0)) + 1.0:.3g} is not unit")
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotation_to_quat(R):
    """Shepperd's method, returns the representative with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for k, M in enumerate(flat):
        tr = np.trace(M)
        diag = np.diag(M)
        i = int(np.argmax(np.r_[tr, diag]))
        if i == 0:
            s = 2.0 * np.sqrt(1.0 + tr)
            q = [0.25 * s, (M[2, 1] - M[1, 2]) / s, (M[0, 2] - M[2, 0]) / s, (M[1, 0] - M[0, 1]) / s]
        elif i == 1:
            s = 2.0 * np.sqrt(1.0 + M[0, 0] - M[1, 1] - M[2, 2])
            q = [(M[2, 1] - M[1, 2]) / s, 0.25 * s, (M[0, 1] + M[1, 0]) / s, (M[0, 2] + M[2, 0]) / s]
        elif i == 2:
            s = 2.0 * np.sqrt(1.0 + M[1, 1] - M[0, 0] - M[2, 2])
            q = [(M[0, 2] - M[2, 0]) / s, (M[0, 1] + M[1, 0]) / s, 0.25 * s, (M[1, 2] + M[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + M[2, 2] - M[0, 0] - M[1, 1])
            q = [(M[1, 0] - M[0, 1]) / s, (M[0, 2] + M[2, 0]) / s, (M[1, 2] + M[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        if q[0] < 0:
            q = -q
        out[k] = q / np.linalg.norm(q)
    return out.reshape(R.shape[:-2] + (4,))


def quat_multiply(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    w1, x1, y1, z1 = np.moveaxis(a, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(b, -1, 0)
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=-1)


def axis_angle_to_quat(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def rotvec_to_quat(rv):
    """Exponential map from a rotation vector (radians) to a unit quaternion."""
    rv = np.asarray(rv, dtype=float)
    angle = np.linalg.norm(rv, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(a/2)/a -> 1/2 as a -> 0
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(angle > 1e-12, np.sin(half) / np.where(angle > 1e-12, angle, 1.0), 0.5 - angle**2 / 48.0)
    return np.concatenate([np.cos(half), k * rv], axis=-1)


def rotation_to_rotvec(R):
    """Logarithm map of SO(3) returned as a rotation vector."""
    q = rotation_to_quat(R)
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, q[..., :1])
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(s > 1e-12, angle / np.where(s > 1e-12, s, 1.0), 2.0)
    return k * v


def omega_matrix(omega):
    """4x4 rate matrix with ``qdot = 0.5 * omega_matrix(w) @ q`` for world-frame ``w``."""
    wx, wy, wz = np.asarray(omega, dtype=float)
    return np.array([
        [0.0, -wx, -wy, -wz],
        [wx, 0.0, -wz, wy],
        [wy, wz, 0.0, -wx],
        [wz, -wy, wx, 0.0],
    ])


def quat_derivative(q, omega_world, baumgarte_gain=10.0):
    """Time derivative of ``q`` under world-frame angular velocity.

    The extra term ``gain * (1 - |q|^2) * q`` pulls the integrated quaternion
    back onto the unit sphere.
    """
    if baumgarte_gain < 0:
        raise ValueError("baumgarte_gain must be non-negative")
    q = np.asarray(q, dtype=float)
    w = np.asarray(omega_world, dtype=float)
    pure = np.concatenate([np.zeros(w.shape[:-1] + (1,)), w], axis=-1)
    qdot = 0.5 * quat_multiply(pure, q)
    sq = np.sum(q * q, axis=-1, keepdims=True)
    return qdot + baumgarte_gain * (1.0 - sq) * q


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        q = np.asarray(self.orientation, dtype=float)
        if abs(np.linalg.norm(q) - 1.0) > UNIT_TOL:
            raise NonUnitQuaternion("pose orientation is not a unit quaternion")
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "orientation", q / np.linalg.norm(q))

    @property
    def rotation(self):
        return quat_to_rotation(self.orientation)
