"""Rotation, rigid-pose and pinhole-projection primitives.

Rotations are stored as unit quaternions (w, x, y, z) and renormalized
lazily: after a bounded number of compositions or whenever the norm has
drifted measurably.  All types are immutable values and safe to share
between threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

EPS_DEPTH = 1e-8   # minimum admissible depth in front of a camera (scene units)
EPS_AXIS = 1e-6    # log map is rejected within this of a pi rotation (rad)

_RENORM_EVERY = 64
_UNIT_TOL = 1e-12


class NonPositiveDepth(ValueError):
    """The point does not lie in front of the camera."""


class NearPiAmbiguity(ValueError):
    """Rotation angle too close to pi for a stable rotation axis."""


def _ro(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Rotation3:
    """Element of SO(3) as a unit quaternion (w, x, y, z)."""

    q: np.ndarray
    _gen: int = field(default=0, repr=False, compare=False)

    @staticmethod
    def _make(q: np.ndarray, gen: int) -> "Rotation3":
        n = math.sqrt(float(q @ q))
        if gen >= _RENORM_EVERY or abs(n - 1.0) > _UNIT_TOL:
            q = q / n
            gen = 0
        return Rotation3(_ro(q), gen)

    @staticmethod
    def identity() -> "Rotation3":
        return Rotation3(_ro(np.array([1.0, 0.0, 0.0, 0.0])))

    @staticmethod
    def from_quaternion(q) -> "Rotation3":
        q = np.asarray(q, dtype=float)
        if q.shape != (4,):
            raise ValueError("quaternion must be a 4-vector (w, x, y, z)")
        n = np.linalg.norm(q)
        if n == 0.0:
            raise ValueError("zero quaternion")
        return Rotation3(_ro(q / n))

    @staticmethod
    def from_matrix(m) -> "Rotation3":
        """Shepperd's method; the largest pivot keeps the extraction stable."""
        m = np.asarray(m, dtype=float)
        t = np.trace(m)
        if t > m[0, 0] and t > m[1, 1] and t > m[2, 2]:
            s = math.sqrt(1.0 + t) * 2.0
            q = np.array([0.25 * s,
                          (m[2, 1] - m[1, 2]) / s,
                          (m[0, 2] - m[2, 0]) / s,
                          (m[1, 0] - m[0, 1]) / s])
        elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            q = np.array([(m[2, 1] - m[1, 2]) / s,
                          0.25 * s,
                          (m[0, 1] + m[1, 0]) / s,
                          (m[0, 2] + m[2, 0]) / s])
        elif m[1, 1] >= m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            q = np.array([(m[0, 2] - m[2, 0]) / s,
                          (m[0, 1] + m[1, 0]) / s,
                          0.25 * s,
                          (m[1, 2] + m[2, 1]) / s])
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            q = np.array([(m[1, 0] - m[0, 1]) / s,
                          (m[0, 2] + m[2, 0]) / s,
                          (m[1, 2] + m[2, 1]) / s,
                          0.25 * s])
        return Rotation3._make(q, 0)

    @property
    def matrix(self) -> np.ndarray:
        w, x, y, z = self.q
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def compose(self, other: "Rotation3") -> "Rotation3":
        w1, x1, y1, z1 = self.q
        w2, x2, y2, z2 = other.q
        q = np.array([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ])
        return Rotation3._make(q, max(self._gen, other._gen) + 1)

    def inverse(self) -> "Rotation3":
        w, x, y, z = self.q
        return Rotation3(_ro(np.array([w, -x, -y, -z])), self._gen)

    def apply(self, v) -> np.ndarray:
        return self.matrix @ np.asarray(v, dtype=float)

    def angle(self) -> float:
        """Rotation angle in [0, pi]."""
        w, x, y, z = self.q
        return 2.0 * math.atan2(math.hypot(x, math.hypot(y, z)), abs(w))


def rot_x(theta: float) -> Rotation3:
    return exp_map(np.array([theta, 0.0, 0.0]))


def rot_y(theta: float) -> Rotation3:
    return exp_map(np.array([0.0, theta, 0.0]))


def rot_z(theta: float) -> Rotation3:
    return exp_map(np.array([0.0, 0.0, theta]))


def random_rotation(rng: np.random.Generator) -> Rotation3:
    """Uniform sample on SO(3) via a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    return Rotation3.from_quaternion(q)


def exp_map(w) -> Rotation3:
    """Rotation-vector exponential; exact for any finite angle."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    if theta < 1e-8:
        # sin(theta/2)/theta series keeps the small-angle branch exact
        s = 0.5 - theta * theta / 48.0
        q = np.array([math.cos(0.5 * theta), s * w[0], s * w[1], s * w[2]])
    else:
        s = math.sin(0.5 * theta) / theta
        q = np.array([math.cos(0.5 * theta), s * w[0], s * w[1], s * w[2]])
    return Rotation3._make(q, 0)


def log_map(rotation: Rotation3) -> np.ndarray:
    """Rotation vector of length equal to the rotation angle.

    Raises NearPiAmbiguity for angles within EPS_AXIS of pi, where the
    axis is not a continuous function of the rotation.
    """
    w, x, y, z = rotation.q
    if w < 0.0:  # canonicalize to the w >= 0 hemisphere
        w, x, y, z = -w, -x, -y, -z
    vn = math.sqrt(x * x + y * y + z * z)
    theta = 2.0 * math.atan2(vn, w)
    if math.pi - theta < EPS_AXIS:
        raise NearPiAmbiguity(f"rotation angle {theta:.9f} is within "
                              f"{EPS_AXIS} of pi")
    if vn < 1e-9:
        # theta/sin(theta/2) ~ 2 + theta^2/12 near zero
        factor = 2.0 + theta * theta / 12.0
    else:
        factor = theta / vn
    return np.array([x, y, z]) * factor


def geodesic_distance(x: Rotation3, y: Rotation3) -> float:
    """Angle of x y^T in [0, pi]; the metric of the geodesic L2 mean."""
    return x.compose(y.inverse()).angle()


def skew(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def so3_right_jacobian(w) -> np.ndarray:
    """Right Jacobian J_r with exp(w + dw) = exp(w) exp(J_r(w) dw)."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    k = skew(w)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * k + (k @ k) / 6.0
    t2 = theta * theta
    a = (1.0 - math.cos(theta)) / t2
    b = (theta - math.sin(theta)) / (t2 * theta)
    return np.eye(3) - a * k + b * (k @ k)


@dataclass(frozen=True)
class Pose:
    """Rigid transform [R|t] mapping world points into the camera frame."""

    rotation: Rotation3
    translation: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float)
        if t.shape != (3,):
            raise ValueError("translation must be a 3-vector")
        object.__setattr__(self, "translation", _ro(t))

    @staticmethod
    def identity() -> "Pose":
        return Pose(Rotation3.identity(), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        """self applied after other: (self * other)(p) = self(other(p))."""
        return Pose(self.rotation.compose(other.rotation),
                    self.rotation.apply(other.translation) + self.translation)

    def inverse(self) -> "Pose":
        rinv = self.rotation.inverse()
        return Pose(rinv, -rinv.apply(self.translation))

    def transform(self, p) -> np.ndarray:
        return self.rotation.apply(p) + self.translation

    def center(self) -> np.ndarray:
        """Camera center in the parent frame: -R^T t."""
        return -self.rotation.inverse().apply(self.translation)

    @property
    def matrix(self) -> np.ndarray:
        """3x4 matrix [R | t]."""
        return np.hstack([self.rotation.matrix, self.translation[:, None]])


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera intrinsics, fixed for a whole run."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def k_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


def project(intrinsics: Intrinsics, pose: Pose, point) -> np.ndarray:
    """Pinhole projection of a world point to pixel coordinates.

    Raises NonPositiveDepth when the point depth in the camera frame is
    at or below EPS_DEPTH, which signals that the observation must be
    excluded from any residual that uses it.
    """
    pc = pose.transform(point)
    if pc[2] <= EPS_DEPTH:
        raise NonPositiveDepth(f"depth {pc[2]:.3e} <= {EPS_DEPTH}")
    return np.array([intrinsics.fx * pc[0] / pc[2] + intrinsics.cx,
                     intrinsics.fy * pc[1] / pc[2] + intrinsics.cy])


def project_many(intrinsics: Intrinsics, rmats: np.ndarray, ts: np.ndarray,
                 points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns (pixels, depths), pixels NaN where
    depth <= EPS_DEPTH."""
    pc = np.einsum("nij,nj->ni", rmats, points) + ts
    z = pc[:, 2]
    good = z > EPS_DEPTH
    uv = np.full((points.shape[0], 2), np.nan)
    zi = np.where(good, z, 1.0)
    uv[:, 0] = np.where(good, intrinsics.fx * pc[:, 0] / zi + intrinsics.cx, np.nan)
    uv[:, 1] = np.where(good, intrinsics.fy * pc[:, 1] / zi + intrinsics.cy, np.nan)
    return uv, z
