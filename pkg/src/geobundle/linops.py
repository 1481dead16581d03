"""Manifold-preserving linear maps and the weighted geometric midpoint.

The linear map keeps the time component and rescales the transformed
space-like part so the output lands back on the quadric for any weight
matrix, including dimension-changing ones.  The rescale factor divides by
the first power of ||W x_s||; dividing by the square, as sometimes written,
only preserves the manifold when ||W x_s|| = 1.

The weighted midpoint is the normalized weighted sum: it minimizes the
weighted squared chordal distance over the manifold.  A projected-descent
oracle for that minimization problem is provided for verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DegenerateDirection, DegenerateMidpoint, DimensionMismatch
from .spaces import (
    EPS_ZERO,
    CurvedPoint,
    SpaceSpec,
    _col,
    acos_k,
    cos_k,
    k_exp,
    k_inner,
    k_project,
    sin_k,
)

__all__ = [
    "LinearMapParams",
    "WeightedPoint",
    "manifold_linear",
    "geometric_midpoint",
    "midpoint_descent_oracle",
    "cos_k",
    "sin_k",
    "acos_k",
    "k_linear",
    "k_midpoint",
]


@dataclass(frozen=True)
class LinearMapParams:
    """Weight matrix of shape (d_out, d_in); acts on space-like parts only."""

    weight: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weight, dtype=np.float64)
        object.__setattr__(self, "weight", w)
        if w.ndim != 2 or min(w.shape) < 1:
            raise DimensionMismatch(f"weight must be a 2-d matrix, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weight entries must be finite")

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class WeightedPoint:
    point: CurvedPoint
    weight: float


def manifold_linear(
    x: CurvedPoint, params: LinearMapParams, spec_out: SpaceSpec
) -> CurvedPoint:
    """Apply [x_t; alpha W x_s] with alpha chosen to stay on the quadric."""
    spec_in = x.spec
    if params.d_in != spec_in.dim or params.d_out != spec_out.dim:
        raise DimensionMismatch(
            f"weight {params.weight.shape} incompatible with dims "
            f"{spec_in.dim}->{spec_out.dim}"
        )
    if spec_out.curvature != spec_in.curvature:
        raise DimensionMismatch("input and output spaces must share curvature")
    out = k_linear(x.coords[None, :], params.weight, spec_in.curvature)[0]
    return CurvedPoint(out, spec_out)


def geometric_midpoint(points: list[WeightedPoint], spec: SpaceSpec) -> CurvedPoint:
    """Weighted midpoint: normalized weighted sum (weighted mean for kappa=0).

    Weights must be nonnegative; mixed signs could select the lower
    hyperboloid sheet and are not produced by any aggregation in this
    package (softmax weights or 1).
    """
    if not points:
        raise ValueError("midpoint of an empty point set is undefined")
    for wp in points:
        if wp.point.spec != spec:
            raise DimensionMismatch("all points must live in the given space")
        if wp.weight < 0.0:
            raise ValueError("midpoint weights must be nonnegative")
    coords = np.stack([wp.point.coords for wp in points])
    weights = np.array([wp.weight for wp in points])
    s = (weights[:, None] * coords).sum(axis=0)
    wsum = float(weights.sum())
    out = k_midpoint(s[None, :], spec.curvature, wsum=np.array([wsum]))[0]
    return CurvedPoint(out, spec)


# ---------------------------------------------------------------------------
# array kernels
# ---------------------------------------------------------------------------

def k_linear(x, weight, kappa: float):
    """Batched manifold-preserving linear map on rows of x: (m, d_in+1)."""
    xt = x[..., :1]
    wt = ad.transpose(weight) if isinstance(weight, ad.Node) else np.asarray(weight, float).T
    ys = ad.matmul(x[..., 1:], wt)
    if kappa == 0.0:
        return ad.concat([xt * 0.0, ys], axis=-1)
    nrm = ad.sqrt(ad.sum_(ys * ys, axis=-1))
    if np.any(ad.val(nrm) <= EPS_ZERO):
        raise DegenerateDirection("linear map annihilated the space-like part")
    sign = 1.0 if kappa > 0.0 else -1.0
    num = ad.sqrt(1.0 / kappa - sign * (xt * xt))
    alpha = num / _col(nrm)
    return ad.concat([xt, alpha * ys], axis=-1)


def k_midpoint(s, kappa: float, wsum=None, active=None):
    """Normalize weighted point sums `s` (rows) into midpoints.

    `active` marks rows that must be valid; inactive rows (empty segments)
    are normalized against a dummy denominator and should be discarded by
    the caller.  Raises on active rows with vanishing curvature norm.
    """
    sv = ad.val(s)
    if active is None:
        active = np.ones(sv.shape[:-1], dtype=bool)
    if kappa == 0.0:
        if wsum is None:
            raise ValueError("kappa=0 midpoint needs the weight sums")
        wv = ad.val(wsum)
        if np.any(active & (np.abs(wv) <= EPS_ZERO)):
            raise DegenerateMidpoint("zero weight sum in Euclidean midpoint")
        safe = ad.where(~active, np.ones_like(wv), wsum)
        return s / _col(safe)
    n2 = k_inner(s, s, kappa)
    n2v = ad.val(n2)
    bad = np.abs(n2v) <= EPS_ZERO
    if np.any(active & bad):
        raise DegenerateMidpoint("weighted sum has vanishing curvature norm")
    denom = ad.sqrt(ad.absolute(n2))
    safe = ad.where(bad, np.ones_like(n2v), denom)
    c = s / _col(safe * math.sqrt(abs(kappa)))
    if kappa < 0.0:
        # restore the upper sheet; sign is locally constant, kept out of the tape
        flip = np.where(ad.val(c)[..., 0] < 0.0, -1.0, 1.0)
        c = c * _col(flip)
    return c


def midpoint_descent_oracle(
    coords: np.ndarray,
    weights: np.ndarray,
    kappa: float,
    step: float = 1e-2,
    iters: int = 10_000,
) -> np.ndarray:
    """Minimize sum_i w_i (2/k - 2<c, x_i>_k) over the quadric by projected descent.

    Runs one chain per input point (restart strategy) and returns the best
    iterate.  Independent of k_midpoint: only uses the inner product, the
    tangent projection and the exponential retraction.
    """
    coords = np.asarray(coords, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if kappa == 0.0:
        raise ValueError("oracle defined for kappa != 0")
    s = (weights[:, None] * coords).sum(axis=0)
    targets = np.broadcast_to(s, coords.shape)
    chains = descent_chains(coords.copy(), targets, kappa, step=step, iters=iters)
    obj = -2.0 * chains @ _metric(kappa, chains.shape[1]) @ s
    return chains[int(np.argmin(obj))]


def descent_chains(
    chains: np.ndarray,
    targets: np.ndarray,
    kappa: float,
    step: float = 1e-2,
    iters: int = 10_000,
) -> np.ndarray:
    """Projected-descent iterations maximizing <c, target>_k per row.

    Rows evolve independently, so many midpoint problems can share one call
    by concatenating their restart chains and per-chain target sums.
    """
    for _ in range(iters):
        grad = -2.0 * k_project(chains, targets, kappa)
        chains = k_exp(chains, -step * grad, kappa)
    return chains


def _metric(kappa: float, n: int) -> np.ndarray:
    g = np.eye(n)
    g[0, 0] = math.copysign(1.0, kappa)
    return g
