"""Per-point evaluation of the three Student-t scene primitive families.

A primitive occupies space with probability 1 at its center, decaying with a
heavy-tailed Student-t profile of the (generalized) squared distance:

    kernel(x) = (1 + d(x) / nu) ** (-(nu + 3) / 2)

where d is the Mahalanobis form for the plain family (TP), the superquadric
implicit value for the superquadric family (TSQ), and the implicit value of
inverse-warped local coordinates for the deformable family (TSQIW). The heavy
tails make the kernels robust to outliers compared to a Gaussian profile.

All evaluation functions are pure; primitives are treated as immutable and
may be evaluated concurrently from any number of threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import Mat3, Quaternion, Vec3, quat_to_rotation

# Degrees of freedom never drop below this floor: the density normalization
# needs nu > 0 while the voxel-interception estimate can reach zero.
NU_MIN = 1.0

# Shape exponents are kept inside this range; exponents 2/eps outside it
# produce numerically explosive gradients.
EPS_RANGE = (0.2, 2.0)

# Kernel values below this are flushed to exact zero so that long products of
# (1 - alpha_i) terms stay stable.
KERNEL_FLOOR = 1e-30


class PrimitiveKind(Enum):
    TP = "tp"
    TSQ = "tsq"
    TSQIW = "tsqiw"


@dataclass(frozen=True)
class Primitive:
    """One scene primitive.

    Fields:
      kind: family tag (TP, TSQ, TSQIW)
      m: center, meters
      s: per-axis positive scales, meters
      rot: orientation quaternion
      opacity: occupancy weight in [0, 1]
      semantics: raw per-class logits, length C
      eps1, eps2: superquadric shape exponents (TSQ / TSQIW only)
      warp_weights: 24 deformation weights in [-1, 1] (TSQIW only)
      nu: Student-t degrees of freedom, >= NU_MIN
    """

    kind: PrimitiveKind
    m: Vec3
    s: Vec3
    rot: Quaternion
    opacity: float
    semantics: np.ndarray
    eps1: float = 1.0
    eps2: float = 1.0
    warp_weights: np.ndarray = field(default_factory=lambda: np.zeros(24))
    nu: float = NU_MIN

    def __post_init__(self):
        object.__setattr__(self, "m", np.asarray(self.m, dtype=np.float64))
        object.__setattr__(self, "s", np.asarray(self.s, dtype=np.float64))
        object.__setattr__(self, "semantics", np.asarray(self.semantics, dtype=np.float64))
        object.__setattr__(
            self, "warp_weights", np.asarray(self.warp_weights, dtype=np.float64)
        )
        if self.m.shape != (3,) or self.s.shape != (3,):
            raise ValueError("center and scales must be 3-vectors")
        if np.any(self.s <= 0.0):
            raise ValueError(f"scales must be positive, got {self.s}")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError(f"opacity must lie in [0, 1], got {self.opacity}")
        if self.semantics.ndim != 1 or self.semantics.size < 1:
            raise ValueError("semantics must be a non-empty vector of logits")
        if self.kind is not PrimitiveKind.TP:
            lo, hi = EPS_RANGE
            if not (lo <= self.eps1 <= hi and lo <= self.eps2 <= hi):
                raise ValueError(
                    f"shape exponents must lie in [{lo}, {hi}], got "
                    f"({self.eps1}, {self.eps2})"
                )
        if self.kind is PrimitiveKind.TSQIW:
            if self.warp_weights.shape != (24,):
                raise ValueError("warp_weights must have length 24")
            if np.any(np.abs(self.warp_weights) > 1.0):
                raise ValueError("warp_weights must lie in [-1, 1]")
        if self.nu < NU_MIN:
            raise ValueError(f"nu must be >= {NU_MIN}, got {self.nu}")

    @property
    def num_classes(self) -> int:
        return int(self.semantics.size)

    def rotation(self) -> Mat3:
        return quat_to_rotation(self.rot)

    def with_nu(self, nu: float) -> "Primitive":
        return Primitive(
            kind=self.kind,
            m=self.m,
            s=self.s,
            rot=self.rot,
            opacity=self.opacity,
            semantics=self.semantics,
            eps1=self.eps1,
            eps2=self.eps2,
            warp_weights=self.warp_weights,
            nu=float(nu),
        )


def covariance_from(s: Vec3, rot: Quaternion) -> Mat3:
    """Anisotropic covariance R diag(s^2) R^T from scales and orientation."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0.0):
        raise ValueError("scales must be positive")
    r = quat_to_rotation(rot)
    return r @ np.diag(s * s) @ r.T


# ---------------------------------------------------------------------------
# Deformation basis fields.
#
# The 24 rows below span constants, linear stretches, shears, twists, bends,
# quadratics, radial bulges and smooth corner deformations of the normalized
# local coordinates (u, v, w). Each row is written with plain arithmetic so
# the same table evaluates on floats, numpy arrays and torch tensors.
# ---------------------------------------------------------------------------

_BASIS_ROWS = (
    lambda u, v, w: (u * 0 + 1.0, u * 0, u * 0),
    lambda u, v, w: (u * 0, u * 0 + 1.0, u * 0),
    lambda u, v, w: (u * 0, u * 0, u * 0 + 1.0),
    lambda u, v, w: (u, u * 0, u * 0),
    lambda u, v, w: (u * 0, v, u * 0),
    lambda u, v, w: (u * 0, u * 0, w),
    lambda u, v, w: (v, u * 0, u * 0),
    lambda u, v, w: (w, u * 0, u * 0),
    lambda u, v, w: (u * 0, w, u * 0),
    lambda u, v, w: (u * 0, u, u * 0),
    lambda u, v, w: (u * 0, u * 0, u),
    lambda u, v, w: (u * 0, u * 0, v),
    lambda u, v, w: (-w * v, w * u, u * 0),
    lambda u, v, w: (u * 0, -u * w, u * v),
    lambda u, v, w: (v * w, u * 0, -v * u),
    lambda u, v, w: (w * w, u * 0, u * 0),
    lambda u, v, w: (u * 0, w * w, u * 0),
    lambda u, v, w: (u * 0, u * 0, u * u + v * v),
    lambda u, v, w: (u * u, u * 0, u * 0),
    lambda u, v, w: (u * 0, v * v, u * 0),
    lambda u, v, w: (u * 0, u * 0, w * w),
    lambda u, v, w: ((u * u + v * v) * u, (u * u + v * v) * v, u * 0),
    lambda u, v, w: (u * v, u * v, u * 0),
    lambda u, v, w: (u * v * v, u * u * v, u * 0),
)

NUM_BASIS_FIELDS = len(_BASIS_ROWS)


def basis_field(i: int, u: float, v: float, w: float) -> Vec3:
    """Row i (1-indexed, 1..24) of the deformation basis, evaluated at (u, v, w)."""
    if not 1 <= i <= NUM_BASIS_FIELDS:
        raise ValueError(f"basis field index must lie in 1..{NUM_BASIS_FIELDS}, got {i}")
    bu, bv, bw = _BASIS_ROWS[i - 1](float(u), float(v), float(w))
    return np.array([bu, bv, bw], dtype=np.float64)


def warp_displacement(u, v, w, weights):
    """Weighted sum of the basis fields at normalized coordinates.

    Works elementwise on scalars or arrays; skips zero weights. Returns the
    three displacement components.
    """
    du, dv, dw = u * 0.0, u * 0.0, u * 0.0
    for wi, row in zip(weights, _BASIS_ROWS):
        if wi == 0.0:
            continue
        bu, bv, bw = row(u, v, w)
        du = du + wi * bu
        dv = dv + wi * bv
        dw = dw + wi * bw
    return du, dv, dw


def warp(x_local: Vec3, s: Vec3, weights) -> Vec3:
    """Inverse-warp of a local point: subtract the weighted basis fields.

    The basis is evaluated at the scale-normalized coordinates
    (u, v, w) = x_local / s while the displacement is subtracted from the
    metric-space local coordinates.
    """
    x_local = np.asarray(x_local, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0.0):
        raise ValueError("scales must be positive")
    u, v, w = x_local / s
    du, dv, dw = warp_displacement(u, v, w, np.asarray(weights, dtype=np.float64))
    return x_local - np.array([du, dv, dw], dtype=np.float64)


# ---------------------------------------------------------------------------
# Kernels and densities.
# ---------------------------------------------------------------------------


def _t_profile(d, nu: float):
    """(1 + d/nu) ** (-(nu+3)/2) with underflow flushed to zero."""
    k = np.power(1.0 + d / nu, -(nu + 3.0) / 2.0)
    return np.where(k < KERNEL_FLOOR, 0.0, k)


def local_coords(points: np.ndarray, p: Primitive) -> np.ndarray:
    """World points (N, 3) expressed in the primitive's local frame."""
    r = p.rotation()
    return (np.atleast_2d(points) - p.m) @ r


def mahalanobis_sq(points: np.ndarray, p: Primitive) -> np.ndarray:
    """Squared Mahalanobis distance under R diag(s^2) R^T, shape (N,)."""
    xl = local_coords(points, p)
    return np.sum((xl / p.s) ** 2, axis=1)


def tp_kernel_many(points: np.ndarray, p: Primitive, nu: float | None = None) -> np.ndarray:
    nu = p.nu if nu is None else nu
    return _t_profile(mahalanobis_sq(points, p), nu)


def tp_kernel(x: Vec3, p: Primitive) -> float:
    """Occupancy kernel of a plain Student-t primitive, in (0, 1]."""
    if p.kind is not PrimitiveKind.TP:
        raise ValueError("tp_kernel requires a TP primitive")
    return float(tp_kernel_many(np.asarray(x, dtype=np.float64), p)[0])


def tp_log_norm_const(s: Vec3, nu: float) -> float:
    """Log normalization constant of the 3-D Student-t density.

    log Gamma((nu+3)/2) - log Gamma(nu/2) - (3/2) log(nu pi) - (1/2) log|Sigma|
    with |Sigma| = (s_x s_y s_z)^2. Evaluated through log-gamma so any real
    nu > 0 is supported.
    """
    s = np.asarray(s, dtype=np.float64)
    return (
        math.lgamma((nu + 3.0) / 2.0)
        - math.lgamma(nu / 2.0)
        - 1.5 * math.log(nu * math.pi)
        - float(np.sum(np.log(s)))
    )


def tp_density_many(points: np.ndarray, p: Primitive, nu: float | None = None) -> np.ndarray:
    nu = p.nu if nu is None else nu
    q = mahalanobis_sq(points, p)
    log_p = tp_log_norm_const(p.s, nu) - (nu + 3.0) / 2.0 * np.log1p(q / nu)
    return np.exp(log_p)


def tp_density(x: Vec3, p: Primitive) -> float:
    """Normalized 3-D Student-t density; integrates to 1 over all of space."""
    if p.kind is not PrimitiveKind.TP:
        raise ValueError("tp_density requires a TP primitive")
    return float(tp_density_many(np.asarray(x, dtype=np.float64), p)[0])


def sq_implicit(x_local, s, eps1: float, eps2: float):
    """Superquadric implicit value of local coordinates; the surface is f = 1.

    Absolute values are taken before the fractional exponents so the
    symmetric form is defined for negative coordinates. Accepts a single
    point or an (N, 3) array.
    """
    x_local = np.asarray(x_local, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0.0):
        raise ValueError("scales must be positive")
    single = x_local.ndim == 1
    n = np.abs(np.atleast_2d(x_local) / s)
    a = n[:, 0] ** (2.0 / eps2) + n[:, 1] ** (2.0 / eps2)
    f = a ** (eps2 / eps1) + n[:, 2] ** (2.0 / eps1)
    return float(f[0]) if single else f


def sq_kernel_many(points: np.ndarray, p: Primitive, nu: float | None = None) -> np.ndarray:
    nu = p.nu if nu is None else nu
    xl = local_coords(points, p)
    return _t_profile(sq_implicit(xl, p.s, p.eps1, p.eps2), nu)


def sq_kernel(x: Vec3, p: Primitive) -> float:
    """Occupancy kernel of a superquadric primitive, in (0, 1]."""
    if p.kind is not PrimitiveKind.TSQ:
        raise ValueError("sq_kernel requires a TSQ primitive")
    return float(sq_kernel_many(np.asarray(x, dtype=np.float64), p)[0])


def sqiw_kernel_many(points: np.ndarray, p: Primitive, nu: float | None = None) -> np.ndarray:
    nu = p.nu if nu is None else nu
    xl = local_coords(points, p)
    u, v, w = xl[:, 0] / p.s[0], xl[:, 1] / p.s[1], xl[:, 2] / p.s[2]
    du, dv, dw = warp_displacement(u, v, w, p.warp_weights)
    warped = xl - np.stack([du, dv, dw], axis=1)
    return _t_profile(sq_implicit(warped, p.s, p.eps1, p.eps2), nu)


def sqiw_kernel(x: Vec3, p: Primitive) -> float:
    """Occupancy kernel of a deformable (inverse-warped) superquadric."""
    if p.kind is not PrimitiveKind.TSQIW:
        raise ValueError("sqiw_kernel requires a TSQIW primitive")
    return float(sqiw_kernel_many(np.asarray(x, dtype=np.float64), p)[0])


_KERNELS_MANY = {
    PrimitiveKind.TP: tp_kernel_many,
    PrimitiveKind.TSQ: sq_kernel_many,
    PrimitiveKind.TSQIW: sqiw_kernel_many,
}


def eval_kernel_many(points: np.ndarray, p: Primitive, nu: float | None = None) -> np.ndarray:
    """Family dispatch of the occupancy kernel over (N, 3) points."""
    return _KERNELS_MANY[p.kind](points, p, nu)


def eval_kernel(x: Vec3, p: Primitive) -> float:
    """Family dispatch of the occupancy kernel at a single point."""
    return float(eval_kernel_many(np.asarray(x, dtype=np.float64), p)[0])


def conditional_density_many(
    points: np.ndarray, p: Primitive, nu: float | None = None
) -> np.ndarray:
    """Per-family conditional probability used by the mixture semantics.

    Plain primitives use the normalized Student-t density; the superquadric
    families use their occupancy kernel directly, which is how their
    conditional probability is defined.
    """
    if p.kind is PrimitiveKind.TP:
        return tp_density_many(points, p, nu)
    return eval_kernel_many(points, p, nu)


def density_norm_const(p: Primitive, nu: float | None = None) -> float:
    """Peak scaling of the conditional density: kernel -> density factor."""
    nu = p.nu if nu is None else nu
    if p.kind is PrimitiveKind.TP:
        return math.exp(tp_log_norm_const(p.s, nu))
    return 1.0
