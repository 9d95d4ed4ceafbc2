"""Coordinate conversions and orientation math shared by the other modules.

Vectors are plain float64 numpy arrays of shape (3,); rotation matrices are
(3, 3) row-major arrays, orthonormal with determinant +1. All functions here
are pure and safe to call concurrently.

Quaternion component order is (w, x, y, z) throughout the package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Vec3 = np.ndarray
Mat3 = np.ndarray

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion in (w, x, y, z) order.

    (w, x, y, z) and (-w, -x, -y, -z) describe the same rotation. Inputs need
    not be normalized; consumers normalize on use. A zero quaternion carries
    no orientation and is rejected wherever a rotation is required.
    """

    w: float
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def norm(self) -> float:
        return math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)

    def normalized(self) -> "Quaternion":
        n = self.norm()
        if n < 1e-12:
            raise ValueError("cannot normalize a zero quaternion")
        return Quaternion(self.w / n, self.x / n, self.y / n, self.z / n)

    @staticmethod
    def identity() -> "Quaternion":
        return Quaternion(1.0, 0.0, 0.0, 0.0)


def quat_to_rotation(q: Quaternion) -> Mat3:
    """Rotation matrix of a (possibly non-unit) quaternion.

    The quaternion is normalized internally; a zero quaternion raises
    ValueError. The returned matrix maps local-frame vectors to world frame.
    """
    qn = q.normalized()
    w, x, y, z = qn.w, qn.x, qn.y, qn.z
    return np.array(
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def wrap_angle(theta: float) -> float:
    """Wrap an angle into [-pi, pi), keeping exact -pi and never returning +pi.

    The half-open convention keeps angular bins well defined when
    partitioning.
    """
    wrapped = math.fmod(theta + math.pi, TWO_PI)
    if wrapped < 0.0:
        wrapped += TWO_PI
    return wrapped - math.pi


def cyl_to_cart(p) -> Vec3:
    """(r, theta, z) -> (r cos theta, r sin theta, z). Requires r >= 0."""
    r, theta, z = float(p[0]), float(p[1]), float(p[2])
    if r < 0.0:
        raise ValueError(f"cylindrical radius must be non-negative, got {r}")
    return np.array([r * math.cos(theta), r * math.sin(theta), z], dtype=np.float64)


def cart_to_cyl(p) -> tuple[float, float, float]:
    """(x, y, z) -> (r, theta, z) with theta in [-pi, pi); theta = 0 when r = 0."""
    x, y, z = float(p[0]), float(p[1]), float(p[2])
    r = math.hypot(x, y)
    theta = 0.0 if r == 0.0 else wrap_angle(math.atan2(y, x))
    return r, theta, z


@dataclass(frozen=True)
class CylindricalSpec:
    """Lattice geometry for a cylindrical partition.

    Radius bins cover [r_min, r_max), angle bins cover [theta_min, theta_max)
    (default the full turn [-pi, pi)) and height bins cover [z_min, z_max),
    all half-open.
    """

    r_min: float
    r_max: float
    z_min: float
    z_max: float
    n_r: int
    n_theta: int
    n_z: int
    theta_min: float = -math.pi
    theta_max: float = math.pi

    def __post_init__(self):
        if self.r_min < 0.0:
            raise ValueError("r_min must be >= 0")
        if not self.r_max > self.r_min:
            raise ValueError("r_max must exceed r_min")
        if not self.z_max > self.z_min:
            raise ValueError("z_max must exceed z_min")
        if not self.theta_max > self.theta_min:
            raise ValueError("theta_max must exceed theta_min")
        if min(self.n_r, self.n_theta, self.n_z) < 1:
            raise ValueError("all bin counts must be >= 1")

    @property
    def bin_sizes(self) -> tuple[float, float, float]:
        return (
            (self.r_max - self.r_min) / self.n_r,
            (self.theta_max - self.theta_min) / self.n_theta,
            (self.z_max - self.z_min) / self.n_z,
        )

    def bin_index(self, r: float, theta: float, z: float):
        """Bin index of a cylindrical point, or None if out of range."""
        if not (self.r_min <= r < self.r_max):
            return None
        if not (self.theta_min <= theta < self.theta_max):
            return None
        if not (self.z_min <= z < self.z_max):
            return None
        dr, dt, dz = self.bin_sizes
        i_r = min(int((r - self.r_min) / dr), self.n_r - 1)
        i_t = min(int((theta - self.theta_min) / dt), self.n_theta - 1)
        i_z = min(int((z - self.z_min) / dz), self.n_z - 1)
        return i_r, i_t, i_z

    def bin_center(self, index) -> tuple[float, float, float]:
        """Cylindrical coordinates of a bin center."""
        i_r, i_t, i_z = index
        dr, dt, dz = self.bin_sizes
        return (
            self.r_min + (i_r + 0.5) * dr,
            self.theta_min + (i_t + 0.5) * dt,
            self.z_min + (i_z + 0.5) * dz,
        )
