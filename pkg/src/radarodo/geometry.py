"""Minimal 3D rigid-motion algebra used by every pipeline.

Conventions:
- vectors are numpy arrays of shape (3,), float64
- quaternions are numpy arrays [w, x, y, z], unit norm, canonicalized to w >= 0
- a Pose maps body-frame vectors into the world frame: x_w = R(q) @ x_b + p
"""

import numpy as np

# series switch for exp/log near the identity; below this angle the closed
# form divides by ~0, the 2nd-order series is exact to double precision
_SMALL_ANGLE = 1e-8

GRAVITY_W = np.array([0.0, 0.0, -9.81])


def vec3(x, y, z) -> np.ndarray:
    return np.array([float(x), float(y), float(z)])


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Flip sign so w >= 0 (q and -q encode the same rotation)."""
    if q[0] < 0.0 or (q[0] == 0.0 and _first_nonzero_negative(q)):
        return -q
    return q


def _first_nonzero_negative(q):
    for c in q[1:]:
        if c != 0.0:
            return c < 0.0
    return False


def quat_normalize(q: np.ndarray) -> np.ndarray:
    n2 = float(np.dot(q, q))
    if n2 == 0.0:
        raise ValueError("zero-norm quaternion")
    # skip the division when already unit norm so stored values round-trip
    # bit exactly through constructors
    if abs(n2 - 1.0) < 4e-12:
        return quat_canonical(q)
    return quat_canonical(q / np.sqrt(n2))


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a ⊗ b, renormalized."""
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return quat_normalize(np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ]))


def quat_conj(q: np.ndarray) -> np.ndarray:
    return quat_canonical(np.array([q[0], -q[1], -q[2], -q[3]]))


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v by q; v may be (3,) or (N, 3)."""
    return v @ quat_to_matrix(q).T


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    return np.array([
        [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
        [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
        [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method, stable for all rotation matrices."""
    t = R[0, 0] + R[1, 1] + R[2, 2]
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    return quat_normalize(q)


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Axis-angle (rotation vector, rad) to unit quaternion."""
    omega = np.asarray(omega, dtype=float)
    theta2 = float(np.dot(omega, omega))
    theta = np.sqrt(theta2)
    if theta < _SMALL_ANGLE:
        w = 1.0 - theta2 / 8.0
        xyz = omega * (0.5 - theta2 / 48.0)
    else:
        w = np.cos(0.5 * theta)
        xyz = omega * (np.sin(0.5 * theta) / theta)
    return quat_normalize(np.array([w, xyz[0], xyz[1], xyz[2]]))


def so3_log(q: np.ndarray) -> np.ndarray:
    """Quaternion to rotation vector on the principal branch, |result| <= pi."""
    q = quat_canonical(np.asarray(q, dtype=float))
    w = min(q[0], 1.0)
    v = q[1:]
    s = np.sqrt(float(np.dot(v, v)))
    if s < _SMALL_ANGLE:
        # w ~ 1 here because of the canonical hemisphere
        return v * (2.0 / w) * (1.0 - s * s / (3.0 * w * w))
    return v * (2.0 * np.arctan2(s, w) / s)


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def slerp(a: np.ndarray, b: np.ndarray, alpha: float) -> np.ndarray:
    """Spherical-linear interpolation along the shorter arc."""
    dot = float(np.dot(a, b))
    if dot < 0.0:
        b = -b
        dot = -dot
    if dot > 1.0 - 1e-12:
        return quat_normalize(a + alpha * (b - a))
    theta = np.arccos(min(dot, 1.0))
    sin_theta = np.sin(theta)
    return quat_normalize(
        a * (np.sin((1.0 - alpha) * theta) / sin_theta)
        + b * (np.sin(alpha * theta) / sin_theta))


class Pose:
    """Timestamped rigid transform (world-from-body).

    The rotation matrix is cached; poses built from a matrix keep that exact
    matrix, which lets constrained optimizers hold roll/pitch bit-stable.
    """

    __slots__ = ("t", "q", "p", "_R")

    def __init__(self, t: float, q: np.ndarray, p: np.ndarray):
        self.t = float(t)
        self.q = quat_normalize(np.asarray(q, dtype=float))
        self.p = np.asarray(p, dtype=float).copy()
        self._R = None
        if not np.isfinite(self.t):
            raise ValueError("non-finite pose timestamp")
        if not np.all(np.isfinite(self.p)):
            raise ValueError("non-finite pose translation")

    @classmethod
    def identity(cls, t: float = 0.0) -> "Pose":
        return cls(t, np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, t: float, R: np.ndarray, p: np.ndarray) -> "Pose":
        pose = cls(t, matrix_to_quat(R), p)
        pose._R = np.asarray(R, dtype=float)
        return pose

    def rot(self) -> np.ndarray:
        if self._R is None:
            self._R = quat_to_matrix(self.q)
        return self._R

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map body-frame point(s) to world frame; (3,) or (N, 3)."""
        return points @ self.rot().T + self.p

    def __repr__(self):
        return f"Pose(t={self.t!r}, q={self.q.tolist()}, p={self.p.tolist()})"


def pose_compose(a: Pose, b: Pose) -> Pose:
    """SE(3) composition a ∘ b; keeps b's timestamp."""
    return Pose(b.t, quat_mul(a.q, b.q), a.p + quat_rotate(a.q, b.p))


def pose_inverse(p: Pose) -> Pose:
    qi = quat_conj(p.q)
    return Pose(p.t, qi, -quat_rotate(qi, p.p))


def pose_relative(a: Pose, b: Pose) -> Pose:
    """Motion of b expressed in a's frame: a^-1 ∘ b."""
    return pose_compose(pose_inverse(a), b)


def interpolate_pose(a: Pose, b: Pose, t: float) -> Pose:
    """Linear translation / slerp rotation at timestamp t in [a.t, b.t]."""
    if not (a.t < b.t):
        raise ValueError(f"degenerate interval [{a.t}, {b.t}]")
    if t < a.t or t > b.t:
        raise ValueError(f"timestamp {t} outside [{a.t}, {b.t}]")
    alpha = (t - a.t) / (b.t - a.t)
    return Pose(t, slerp(a.q, b.q, alpha), (1.0 - alpha) * a.p + alpha * b.p)


def euler_zyx(R: np.ndarray) -> tuple[float, float, float]:
    """(yaw, pitch, roll) of R = Rz(yaw) @ Ry(pitch) @ Rx(roll).

    pitch and roll depend only on the third row of R, so left-multiplying by
    a yaw rotation leaves them bit-identical.
    """
    pitch = -np.arcsin(min(1.0, max(-1.0, R[2, 0])))
    roll = np.arctan2(R[2, 1], R[2, 2])
    yaw = np.arctan2(R[1, 0], R[0, 0])
    return float(yaw), float(pitch), float(roll)


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def quat_about_z(yaw: float) -> np.ndarray:
    return quat_normalize(np.array([np.cos(0.5 * yaw), 0.0, 0.0, np.sin(0.5 * yaw)]))
