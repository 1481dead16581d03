"""Unified Lorentz/Spherical model of constant-curvature spaces.

A space of dimension d and curvature kappa != 0 is the quadric
``{x in R^(d+1) : <x, x>_k = 1/kappa}`` under the curvature-aware inner
product ``<x, y>_k = sgn(kappa) * x_t * y_t + x_s . y_s``, where ``x_t`` is
the leading (time-like) component and ``x_s`` the space-like rest.  Negative
curvature selects the upper hyperboloid sheet (x_t > 0), positive curvature
the sphere of radius 1/sqrt(kappa).  kappa == 0 is an explicit Euclidean
degenerate mode used for geometric ablations: the time component is pinned
to zero and all maps reduce to vector arithmetic.

The ``k_*`` kernels at the bottom operate on plain arrays or on autodiff
nodes (see :mod:`geobundle.autodiff`) and broadcast over leading axes, so the
same code backs the validated single-point API and the vectorized training
path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import (
    DegeneratePair,
    DimensionMismatch,
    InjectivityViolation,
    TangencyViolation,
    UnsupportedMode,
)

EPS_MANIFOLD = 1e-9   # quadric residual tolerance at 64-bit precision
EPS_TANGENT = 1e-8    # tangency tolerance
EPS_ZERO = 1e-12      # zero-vector / degeneracy threshold

__all__ = [
    "SpaceSpec",
    "CurvedPoint",
    "TangentVector",
    "curvature_inner",
    "north_pole",
    "exp_map",
    "log_map",
    "parallel_transport",
    "geodesic_distance",
    "ambient_sq_distance",
    "project_to_tangent",
    "manifold_residual",
    "random_point",
    "random_tangent",
]


@dataclass(frozen=True)
class SpaceSpec:
    """One constant-curvature factor: d space-like dimensions, curvature kappa."""

    dim: int
    curvature: float

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise DimensionMismatch(f"dim must be >= 1, got {self.dim}")
        if not math.isfinite(self.curvature):
            raise ValueError(f"curvature must be finite, got {self.curvature}")

    @property
    def ambient_dim(self) -> int:
        return self.dim + 1

    @property
    def is_euclidean(self) -> bool:
        return self.curvature == 0.0

    @property
    def sign(self) -> float:
        return 0.0 if self.curvature == 0.0 else math.copysign(1.0, self.curvature)

    @property
    def sqrt_abs_curv(self) -> float:
        return math.sqrt(abs(self.curvature))


def manifold_residual(coords: np.ndarray, kappa: float) -> float:
    """|<x,x>_k - 1/kappa|; the quadric constraint violation."""
    if kappa == 0.0:
        return 0.0
    return float(abs(k_inner(np.asarray(coords, float), np.asarray(coords, float), kappa) - 1.0 / kappa))


@dataclass(frozen=True)
class CurvedPoint:
    """A point on the manifold, stored as the full (d+1)-vector [x_t; x_s]."""

    coords: np.ndarray
    spec: SpaceSpec

    def __post_init__(self) -> None:
        c = np.asarray(self.coords, dtype=np.float64)
        object.__setattr__(self, "coords", c)
        if c.shape != (self.spec.ambient_dim,):
            raise DimensionMismatch(
                f"expected shape ({self.spec.ambient_dim},), got {c.shape}"
            )
        k = self.spec.curvature
        if k == 0.0:
            if c[0] != 0.0:
                raise DimensionMismatch("Euclidean-mode points must have x_t = 0")
            return
        res = manifold_residual(c, k)
        if res > EPS_MANIFOLD:
            raise DimensionMismatch(f"point off the quadric: residual {res:.3e}")
        if k < 0.0 and c[0] <= 0.0:
            raise DimensionMismatch("hyperbolic points must lie on the upper sheet")

    @property
    def time(self) -> float:
        return float(self.coords[0])

    @property
    def space(self) -> np.ndarray:
        return self.coords[1:]


@dataclass(frozen=True)
class TangentVector:
    """A vector in the tangent space at `base`."""

    base: CurvedPoint
    vec: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.vec, dtype=np.float64)
        object.__setattr__(self, "vec", v)
        if v.shape != self.base.coords.shape:
            raise DimensionMismatch(
                f"tangent shape {v.shape} != point shape {self.base.coords.shape}"
            )
        k = self.base.spec.curvature
        if k == 0.0:
            if v[0] != 0.0:
                raise TangencyViolation("Euclidean-mode tangents must have v[0] = 0")
            return
        ip = float(k_inner(v, self.base.coords, k))
        if abs(ip) > EPS_TANGENT:
            raise TangencyViolation(f"vector not tangent: <v,x>_k = {ip:.3e}")


# ---------------------------------------------------------------------------
# validated single-point operations
# ---------------------------------------------------------------------------

def curvature_inner(x, y, spec: SpaceSpec):
    """sgn(k) x_t y_t + x_s . y_s; plain space dot in the Euclidean mode."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.shape != (spec.ambient_dim,):
        raise DimensionMismatch(f"expected two vectors of shape ({spec.ambient_dim},)")
    return float(k_inner(x, y, spec.curvature))


def north_pole(spec: SpaceSpec) -> CurvedPoint:
    """[1/sqrt|k|, 0, ..., 0]; the origin in the Euclidean mode."""
    c = np.zeros(spec.ambient_dim)
    if not spec.is_euclidean:
        c[0] = 1.0 / spec.sqrt_abs_curv
    return CurvedPoint(c, spec)


def exp_map(x: CurvedPoint, v: TangentVector, spec: SpaceSpec) -> CurvedPoint:
    """Geodesic shot from x with initial velocity v."""
    _check_base(v, x)
    k = spec.curvature
    if k == 0.0:
        return CurvedPoint(x.coords + v.vec, spec)
    if k > 0.0:
        r = spec.sqrt_abs_curv * math.sqrt(max(float(k_inner(v.vec, v.vec, k)), 0.0))
        if r >= math.pi:
            raise InjectivityViolation(f"spherical exp radius {r:.4f} >= pi")
    return CurvedPoint(k_exp(x.coords, v.vec, k), spec)


def log_map(x: CurvedPoint, y: CurvedPoint, spec: SpaceSpec) -> TangentVector:
    """Inverse of the exponential map: the tangent at x pointing to y."""
    k = spec.curvature
    if k == 0.0:
        return TangentVector(x, y.coords - x.coords)
    return TangentVector(x, k_log(x.coords, y.coords, k))


def parallel_transport(
    src: CurvedPoint, dst: CurvedPoint, v: TangentVector, spec: SpaceSpec
) -> TangentVector:
    """Levi-Civita transport of v along the geodesic from src to dst."""
    _check_base(v, src)
    k = spec.curvature
    if k == 0.0:
        return TangentVector(dst, v.vec.copy())
    return TangentVector(dst, k_transport(src.coords, dst.coords, v.vec, k))


def geodesic_distance(x: CurvedPoint, y: CurvedPoint, spec: SpaceSpec) -> float:
    """Length of the minimal curve between x and y."""
    return float(k_dist(x.coords, y.coords, spec.curvature))


def ambient_sq_distance(x: CurvedPoint, y: CurvedPoint, spec: SpaceSpec) -> float:
    """Squared chordal distance 2/kappa - 2<x,y>_k (kappa != 0 only)."""
    k = spec.curvature
    if k == 0.0:
        raise UnsupportedMode("ambient squared distance needs kappa != 0")
    return float(2.0 / k - 2.0 * k_inner(x.coords, y.coords, k))


def project_to_tangent(x: CurvedPoint, w, spec: SpaceSpec) -> TangentVector:
    """Orthogonal re-tangentialization of an ambient vector at x; idempotent."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (spec.ambient_dim,):
        raise DimensionMismatch(f"expected shape ({spec.ambient_dim},), got {w.shape}")
    return TangentVector(x, k_project(x.coords, w, spec.curvature))


def _check_base(v: TangentVector, x: CurvedPoint) -> None:
    if not np.array_equal(v.base.coords, x.coords):
        raise TangencyViolation("tangent vector is based at a different point")


# ---------------------------------------------------------------------------
# test/demo helpers
# ---------------------------------------------------------------------------

def random_point(spec: SpaceSpec, rng: np.random.Generator, scale: float = 1.0) -> CurvedPoint:
    """Random point reached by a random tangent shot from the pole."""
    o = north_pole(spec)
    return exp_map(o, random_tangent(o, rng, scale), spec)


def random_tangent(
    x: CurvedPoint, rng: np.random.Generator, scale: float = 1.0
) -> TangentVector:
    """Random tangent vector at x with norm of order `scale`."""
    w = rng.normal(size=x.spec.ambient_dim) * scale / math.sqrt(max(x.spec.dim, 1))
    return TangentVector(x, k_project(x.coords, w, x.spec.curvature))


# ---------------------------------------------------------------------------
# array kernels (ndarray or autodiff Node; broadcast over leading axes)
# ---------------------------------------------------------------------------

def k_inner(x, y, kappa: float):
    """Curvature-aware inner product along the last axis."""
    s = ad.sum_(x[..., 1:] * y[..., 1:], axis=-1)
    if kappa == 0.0:
        return s
    sign = 1.0 if kappa > 0.0 else -1.0
    return sign * (x[..., 0] * y[..., 0]) + s


def k_norm(v, kappa: float):
    """sqrt(max(<v,v>_k, 0)); real for tangent vectors in both signs."""
    return ad.sqrt(k_inner(v, v, kappa))


def cos_k(t, kappa: float):
    """cos for kappa > 0, cosh for kappa < 0."""
    if kappa == 0.0:
        raise UnsupportedMode("curvature trigonometry needs kappa != 0")
    return ad.cos(t) if kappa > 0.0 else ad.cosh(t)


def sin_k(t, kappa: float):
    """sin for kappa > 0, sinh for kappa < 0."""
    if kappa == 0.0:
        raise UnsupportedMode("curvature trigonometry needs kappa != 0")
    return ad.sin(t) if kappa > 0.0 else ad.sinh(t)


def acos_k(t, kappa: float):
    """Inverse of cos_k with the argument clamped into its valid domain."""
    if kappa == 0.0:
        raise UnsupportedMode("curvature trigonometry needs kappa != 0")
    return ad.arccos(t) if kappa > 0.0 else ad.arccosh(t)


def _col(x):
    """Append a trailing singleton axis so (...,) scales (..., d+1) rows."""
    if isinstance(x, ad.Node):
        return ad.reshape(x, x.shape + (1,))
    return np.asarray(x)[..., None]


def k_exp(x, v, kappa: float):
    """Exponential map kernel; returns x + v when kappa == 0."""
    if kappa == 0.0:
        return x + v
    r = math.sqrt(abs(kappa)) * k_norm(v, kappa)
    rv = ad.val(r)
    if kappa > 0.0 and np.any(rv >= math.pi):
        raise InjectivityViolation("spherical exp radius >= pi")
    small = rv <= EPS_ZERO
    safe_r = ad.where(small, np.ones_like(rv), r)
    ratio = ad.where(small, np.ones_like(rv), sin_k(safe_r, kappa) / safe_r)
    return _col(cos_k(r, kappa)) * x + _col(ratio) * v


def k_log(x, y, kappa: float):
    """Logarithmic map kernel; returns y - x when kappa == 0."""
    if kappa == 0.0:
        return y - x
    beta = kappa * k_inner(x, y, kappa)
    bv = ad.val(beta)
    if kappa > 0.0 and np.any(bv <= -1.0 + EPS_ZERO):
        raise DegeneratePair("log map undefined for antipodal points")
    # acos_k(beta)/sqrt(|beta^2-1|) -> 1 as beta -> 1 (coincident points).
    near = np.abs(bv - 1.0) <= 1e-9
    denom = ad.sqrt(ad.absolute(beta * beta - 1.0))
    safe_denom = ad.where(near, np.ones_like(bv), denom)
    coef = ad.where(near, np.ones_like(bv), acos_k(beta, kappa) / safe_denom)
    return _col(coef) * (y - _col(beta) * x)


def k_transport(src, dst, v, kappa: float):
    """Parallel transport kernel; identity when kappa == 0."""
    if kappa == 0.0:
        return v
    denom = 1.0 + kappa * k_inner(src, dst, kappa)
    if np.any(ad.val(denom) <= EPS_ZERO):
        raise DegeneratePair("parallel transport undefined: 1 + k<src,dst> ~ 0")
    coef = kappa * k_inner(v, dst, kappa) / denom
    return v - _col(coef) * (src + dst)


def k_dist(x, y, kappa: float):
    """Geodesic distance kernel; Euclidean norm when kappa == 0."""
    if kappa == 0.0:
        d = x - y
        return ad.sqrt(ad.sum_(d * d, axis=-1))
    arg = kappa * k_inner(x, y, kappa)
    return acos_k(arg, kappa) / math.sqrt(abs(kappa))


def k_ambient_sq(x, y, kappa: float):
    """2/kappa - 2<x,y>_k, the squared chordal distance (kappa != 0)."""
    if kappa == 0.0:
        raise UnsupportedMode("ambient squared distance needs kappa != 0")
    return 2.0 / kappa - 2.0 * k_inner(x, y, kappa)


def k_project(x, w, kappa: float):
    """Tangent projection kernel: w - k<w,x>_k x; zeroed time axis if k == 0."""
    if kappa == 0.0:
        mask = np.ones(np.shape(ad.val(w))[-1])
        mask[0] = 0.0
        return w * mask
    return w - _col(kappa * k_inner(w, x, kappa)) * x
