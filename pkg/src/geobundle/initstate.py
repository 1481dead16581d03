"""Initial bundle state from spectral features.

Each node's spectral row z is lifted as the tangent vector [0 || z] at the
north pole; the coordinate is its exponential image and the initial encoding
is the same vector parallel-transported from the pole to that coordinate,
which keeps tangency by construction.  On positively curved factors the
rows are globally rescaled so the largest lift stays within half the
injectivity radius.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .graphs import Graph, SpectralInit
from .layers import BundleState, FactorState
from .spaces import SpaceSpec, k_exp, k_transport, north_pole

logger = logging.getLogger("geobundle.init")


@dataclass(frozen=True)
class InitConfig:
    """Spectral lift settings; K defaults to the factor dimension."""

    K: int | None = None
    eigen_mode: str = "largest"

    def __post_init__(self) -> None:
        if self.K is not None and self.K < 1:
            raise ValueError("K must be >= 1")


def init_state(graph: Graph, spectral: SpectralInit,
               specs: tuple[SpaceSpec, SpaceSpec]) -> BundleState:
    """Build the initial per-node product-bundle state.

    `specs` carries the (tree factor, cycle factor) space definitions.
    Spectral rows are truncated or zero-padded to each factor's dimension.
    """
    tree_spec, cycle_spec = specs
    return BundleState(
        tree=_lift_factor(spectral.encodings, tree_spec),
        cycle=_lift_factor(spectral.encodings, cycle_spec),
    )


def _lift_factor(rows: np.ndarray, spec: SpaceSpec) -> FactorState:
    n, k = rows.shape
    d = spec.dim
    if k != d:
        logger.warning("spectral dim %d != factor dim %d; %s", k, d,
                       "truncating" if k > d else "zero-padding")
    if k >= d:
        r = rows[:, :d].copy()
    else:
        r = np.concatenate([rows, np.zeros((n, d - k))], axis=1)
    if spec.curvature > 0.0:
        guard = math.pi / (2.0 * spec.sqrt_abs_curv)
        max_norm = float(np.linalg.norm(r, axis=1).max(initial=0.0))
        if max_norm > guard:
            r *= guard / max_norm
    v = np.concatenate([np.zeros((n, 1)), r], axis=1)
    o = np.broadcast_to(north_pole(spec).coords, v.shape)
    coords = k_exp(o, v, spec.curvature)
    encs = k_transport(o, coords, v, spec.curvature)
    return FactorState(spec, coords, encs)
