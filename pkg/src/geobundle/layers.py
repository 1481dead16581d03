"""The universal layer over the product bundle.

Each layer runs three phases per factor:

1. coordinate update: cross-geometry attention over every substructure.
   Keys and values are manifold-preserving linear images of the factor
   coordinates, the query comes from the counterpart factor, and the new
   coordinate is the attention-weighted geometric midpoint.  Aggregation is
   unidirectional: tree nodes see their children plus themselves, ring
   nodes their two ring neighbors plus themselves.  All updates within one
   layer read the layer-input coordinates, so the receptive field grows by
   one hop per stacked layer.
2. encoding update: bundle convolution over the whole substructure; source
   encodings are implicitly parallel-transported into the tangent space of
   the target's updated coordinate, with attention weights computed from
   coordinates by a second query/key pair.
3. per-node aggregation: the midpoint (unit weights) of a node's sampled
   coordinates, and the uniform bundle convolution of its sampled encodings
   into that midpoint's tangent space.  Nodes that appear in no
   substructure keep their state.

Coordinates and encodings are stored as (num_nodes, d+1) arrays; every
function accepts plain arrays or autodiff nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

import math

from . import autodiff as ad
from .errors import DegeneratePair, DimensionMismatch
from .linops import k_linear, k_midpoint
from .spaces import (
    EPS_ZERO,
    CurvedPoint,
    SpaceSpec,
    TangentVector,
    _col,
    k_inner,
    k_project,
)

FACTORS = ("tree", "cycle")


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions, curvatures and depth of the product-bundle model."""

    dim_tree: int = 32
    curv_tree: float = -1.0
    dim_cycle: int = 32
    curv_cycle: float = 1.0
    n_layers: int = 2
    phi_hidden: int = 256

    @property
    def tree_spec(self) -> SpaceSpec:
        return SpaceSpec(self.dim_tree, self.curv_tree)

    @property
    def cycle_spec(self) -> SpaceSpec:
        return SpaceSpec(self.dim_cycle, self.curv_cycle)

    def spec(self, factor: str) -> SpaceSpec:
        return self.tree_spec if factor == "tree" else self.cycle_spec

    @property
    def embed_dim(self) -> int:
        return self.dim_tree + self.dim_cycle


@dataclass
class FactorState:
    """Per-node coordinates on one factor manifold plus tangent encodings."""

    spec: SpaceSpec
    coords: Any   # (N, d+1)
    encs: Any     # (N, d+1), tangent at coords row-wise


@dataclass
class BundleState:
    tree: FactorState
    cycle: FactorState

    def factor(self, name: str) -> FactorState:
        return self.tree if name == "tree" else self.cycle

    @property
    def num_nodes(self) -> int:
        return np.shape(ad.val(self.tree.coords))[0]

    def detached(self) -> "BundleState":
        return BundleState(
            tree=FactorState(self.tree.spec, ad.val(self.tree.coords), ad.val(self.tree.encs)),
            cycle=FactorState(self.cycle.spec, ad.val(self.cycle.coords), ad.val(self.cycle.encs)),
        )


@dataclass
class FactorLayerParams:
    """Trainable arrays for one factor of one layer (arrays or tape nodes)."""

    wq: Any      # (d_f, d_c): query from counterpart coordinates
    wk: Any      # (d_f, d_f)
    wv: Any      # (d_f, d_f)
    wq_e: Any    # (d_f, d_c): encoding-attention query
    wk_e: Any    # (d_f, d_f)
    phi_w1: Any  # (hidden, 2 (d_f + 1))
    phi_b1: Any  # (hidden,)
    phi_w2: Any  # (1, hidden)
    phi_b2: Any  # (1,)


@dataclass
class LayerParams:
    tree: FactorLayerParams
    cycle: FactorLayerParams

    def factor(self, name: str) -> FactorLayerParams:
        return self.tree if name == "tree" else self.cycle


PARAM_FIELDS = ("wq", "wk", "wv", "wq_e", "wk_e", "phi_w1", "phi_b1", "phi_w2", "phi_b2")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Flat parameter-name -> shape map in checkpoint field order."""
    shapes: dict[str, tuple[int, ...]] = {}
    dims = {"tree": (cfg.dim_tree, cfg.dim_cycle), "cycle": (cfg.dim_cycle, cfg.dim_tree)}
    for layer in range(cfg.n_layers):
        for factor in FACTORS:
            d_f, d_c = dims[factor]
            base = f"L{layer}.{factor}."
            shapes[base + "wq"] = (d_f, d_c)
            shapes[base + "wk"] = (d_f, d_f)
            shapes[base + "wv"] = (d_f, d_f)
            shapes[base + "wq_e"] = (d_f, d_c)
            shapes[base + "wk_e"] = (d_f, d_f)
            shapes[base + "phi_w1"] = (cfg.phi_hidden, 2 * (d_f + 1))
            shapes[base + "phi_b1"] = (cfg.phi_hidden,)
            shapes[base + "phi_w2"] = (1, cfg.phi_hidden)
            shapes[base + "phi_b2"] = (1,)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Seeded Gaussian initialization, scaled by fan-in; zero biases."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        fan_in = shape[-1] if len(shape) > 1 else shape[0]
        if name.endswith(("phi_b1", "phi_b2")):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(size=shape) / np.sqrt(fan_in)
    return params


def layer_params_view(params: dict[str, Any], layer: int) -> LayerParams:
    def factor(name: str) -> FactorLayerParams:
        p = f"L{layer}.{name}."
        return FactorLayerParams(**{f: params[p + f] for f in PARAM_FIELDS})

    return LayerParams(tree=factor("tree"), cycle=factor("cycle"))


# ---------------------------------------------------------------------------
# substructure batch indexing
# ---------------------------------------------------------------------------

@dataclass
class SubBatch:
    """Flattened index arrays for a list of substructures of one factor.

    Every substructure occupies a contiguous block of slots, one per member
    node; the same graph node in two substructures gets two slots.  The
    SegIndex wrappers cache sparse scatter operators and are shared across
    layers and tapes.
    """

    node_ids: np.ndarray          # (n_slots,)
    coord_tgt: np.ndarray         # coordinate-attention pairs
    coord_src: np.ndarray
    coord_uniform: np.ndarray     # bool per pair: degenerate -> uniform weights
    enc_tgt: np.ndarray           # encoding-attention pairs (full substructure)
    enc_src: np.ndarray
    enc_uniform: np.ndarray
    n_slots: int

    def __post_init__(self) -> None:
        self.node_sel = ad.SegIndex(self.node_ids)
        self.coord_tgt_sel = ad.SegIndex(self.coord_tgt)
        self.coord_src_sel = ad.SegIndex(self.coord_src)
        self.enc_tgt_sel = ad.SegIndex(self.enc_tgt)
        self.enc_src_sel = ad.SegIndex(self.enc_src)

    @property
    def coord_omega(self) -> np.ndarray:
        return np.bincount(self.coord_tgt, minlength=self.n_slots)

    @property
    def enc_omega(self) -> np.ndarray:
        return np.bincount(self.enc_tgt, minlength=self.n_slots)


def build_subbatch(subs) -> SubBatch:
    node_ids: list[int] = []
    c_tgt: list[int] = []
    c_src: list[int] = []
    c_uni: list[bool] = []
    e_tgt: list[int] = []
    e_src: list[int] = []
    e_uni: list[bool] = []
    for sub in subs:
        base = len(node_ids)
        local = {node: base + i for i, node in enumerate(sub.nodes)}
        node_ids.extend(sub.nodes)
        for tgt, sources in _omega_sets(sub):
            for src in sources:
                c_tgt.append(local[tgt])
                c_src.append(local[src])
                c_uni.append(sub.degenerate)
        for tgt in sub.nodes:
            for src in sub.nodes:
                e_tgt.append(local[tgt])
                e_src.append(local[src])
                e_uni.append(sub.degenerate)
    return SubBatch(
        node_ids=np.array(node_ids, dtype=np.intp),
        coord_tgt=np.array(c_tgt, dtype=np.intp),
        coord_src=np.array(c_src, dtype=np.intp),
        coord_uniform=np.array(c_uni, dtype=bool),
        enc_tgt=np.array(e_tgt, dtype=np.intp),
        enc_src=np.array(e_src, dtype=np.intp),
        enc_uniform=np.array(e_uni, dtype=bool),
        n_slots=len(node_ids),
    )


def _omega_sets(sub):
    """Unidirectional source sets: children+self for trees, ring nbrs+self for cycles."""
    if sub.kind == "tree":
        children: dict[int, list[int]] = {n: [] for n in sub.nodes}
        for parent, child in sub.edges:
            children[parent].append(child)
        # bottom-up order (deepest level first); results do not depend on it
        # because all updates read the layer-input state
        order = sorted(range(len(sub.nodes)), key=lambda i: -sub.levels[i])
        for i in order:
            node = sub.nodes[i]
            yield node, children[node] + [node]
    else:
        ring = sub.nodes
        m = len(ring)
        for i, node in enumerate(ring):
            if m == 1:
                yield node, [node]
            elif m == 2:
                yield node, [ring[1 - i], node]
            else:
                sources = sorted({ring[(i - 1) % m], ring[(i + 1) % m]})
                yield node, sources + [node]


# ---------------------------------------------------------------------------
# attention pieces
# ---------------------------------------------------------------------------

def _phi_scores(qrys, keys, tgt, src, p: FactorLayerParams, drop):
    """Scalar score per (target, source) pair from the one-hidden-layer tanh MLP.

    phi acts on the concatenation [q_tgt || k_src]; the hidden layer is
    split into its query and key halves so the heavy matmuls run per row
    instead of per pair, and the pairwise tanh block is a single fused op.
    """
    d1 = np.shape(ad.val(qrys))[-1]
    w1q = p.phi_w1[:, :d1]
    w1k = p.phi_w1[:, d1:]
    pre_q = ad.matmul(qrys, ad.transpose(w1q)) + p.phi_b1
    pre_k = ad.matmul(keys, ad.transpose(w1k))
    w2 = ad.reshape(p.phi_w2, (np.shape(ad.val(p.phi_w2))[-1],))
    uniforms, rate = (drop.uniforms(len(tgt)), drop.rate) if drop else (None, 0.0)
    scores = ad.pair_scores(pre_q, pre_k, w2, tgt, src, uniforms, rate)
    return scores + ad.reshape(p.phi_b2, ())


def segment_softmax(scores, seg, n_segments: int, uniform=None, omega=None):
    """Softmax within segments, numerically shifted by a detached segment max.

    Rows of degenerate substructures (`uniform` mask) get fixed 1/|omega|
    weights and contribute no score gradient.  Fused into one tape record;
    the backward is the standard softmax vjp a*(g - sum_seg(a*g)).
    """
    sel = seg if isinstance(seg, ad.SegIndex) else ad.SegIndex(seg)
    ids = sel.ids
    overlay = uniform is not None and uniform.any()

    def fwd(sc):
        shift = np.full(n_segments, -np.inf)
        np.maximum.at(shift, ids, sc)
        shift[~np.isfinite(shift)] = 0.0
        e = np.exp(sc - shift[ids])
        denom = sel.scatter(e, n_segments)
        alpha = e / denom[ids]
        if overlay:
            alpha = np.where(uniform, 1.0 / omega[ids], alpha)
        return alpha

    def make(iv, alpha):
        def grad(g):
            t = sel.scatter(alpha * g, n_segments)
            gs = alpha * (g - t[ids])
            if overlay:
                gs = np.where(uniform, 0.0, gs)
            return gs

        return (grad,)

    return ad.primitive("segment_softmax", (scores,), fwd, make)


def _bc_terms(z_src, p_src, p_tgt, alpha_col, kappa: float):
    """Per-pair bundle-convolution terms: alpha z - (k alpha <z,pt>/(1+k<ps,pt>))(ps+pt)."""
    if kappa == 0.0:
        return alpha_col * z_src
    denom = 1.0 + kappa * k_inner(p_src, p_tgt, kappa)
    if np.any(ad.val(denom) <= 1e-12):
        raise DegeneratePair("bundle convolution over an antipodal pair")
    coef = (kappa * k_inner(z_src, p_tgt, kappa)) / denom
    return alpha_col * z_src - (alpha_col * _col(coef)) * (p_src + p_tgt)


# ---------------------------------------------------------------------------
# fused tape kernels
#
# The generic kernels above express the math through many small tape
# records; at small batch sizes the bookkeeping dominates the runtime.  The
# wrappers below run the same forward functions on plain values and attach
# hand-derived backward closures, collapsing each geometric block into a
# single record.  The full-model finite-difference suite pins them down.
# ---------------------------------------------------------------------------

def _mrows(x, kappa: float):
    """Apply the curvature metric diag(sgn k, 1, ..) to rows."""
    out = x.copy()
    out[..., 0] *= 1.0 if kappa > 0.0 else -1.0
    return out


def _rowdot(a, b):
    return np.einsum("...i,...i->...", a, b)


def flinear(x, w, kappa: float):
    """k_linear with a fused backward."""

    def fwd(xv, wv):
        return k_linear(xv, wv, kappa)

    def make(iv, ov):
        xv, wv = iv
        xt, xs = xv[..., :1], xv[..., 1:]
        if kappa == 0.0:
            def gx(g):
                gs = g[..., 1:] @ wv
                return np.concatenate([np.zeros_like(xt), gs], axis=-1)

            def gw(g):
                return g[..., 1:].T @ xs

            return (gx, gw)
        u = xs @ wv.T
        m2 = np.einsum("...i,...i->...", u, u)[..., None]
        sign = 1.0 if kappa > 0.0 else -1.0
        n = np.sqrt(np.maximum(1.0 / kappa - sign * xt * xt, 0.0))
        alpha = n / np.sqrt(m2)

        def du(g):
            gs = g[..., 1:]
            return alpha * gs - (alpha * np.einsum("...i,...i->...", gs, u)[..., None] / m2) * u

        def gx(g):
            gs = g[..., 1:]
            gu = du(g)
            dn = np.where(n > 1e-12, -sign * xt / np.where(n > 1e-12, n, 1.0), 0.0)
            gt = g[..., :1] + (np.einsum("...i,...i->...", gs, u)[..., None] / np.sqrt(m2)) * dn
            return np.concatenate([gt, gu @ wv], axis=-1)

        def gw(g):
            return du(g).T @ xs

        return (gx, gw)

    return ad.primitive("flinear", (x, w), fwd, make)


def fmidpoint(s, kappa: float, wsum=None, active=None):
    """k_midpoint with a fused backward.

    In the Euclidean mode the weight sum is a second differentiated input
    (the weighted mean divides by it); for kappa != 0 the normalization only
    depends on the summed points.
    """
    if kappa == 0.0:
        def fwd0(sv, wv):
            return k_midpoint(sv, kappa, wsum=wv, active=active)

        def make0(iv, ov):
            sv, wv = iv
            safe = np.where(np.abs(wv) > EPS_ZERO, wv, 1.0)
            out = sv / safe[..., None]

            def gs(g):
                return g / safe[..., None]

            def gw(g):
                return -_rowdot(g, out) / safe

            return (gs, gw)

        return ad.primitive("fmidpoint0", (s, wsum), fwd0, make0)

    def fwd(sv):
        return k_midpoint(sv, kappa, active=active)

    def make(iv, ov):
        sv = iv[0]
        n2 = np.einsum("...i,...i->...", _mrows(sv, kappa), sv)
        bad = np.abs(n2) <= EPS_ZERO
        r = np.sqrt(np.where(bad, 1.0, np.abs(n2)))
        sgn_n2 = np.sign(n2)
        flip = 1.0
        if kappa < 0.0:
            flip = np.where(ad.val(ov)[..., 0] * sv[..., 0] < 0.0, -1.0, 1.0)[..., None]
        scale = 1.0 / math.sqrt(abs(kappa))

        def grad(g):
            e = _rowdot(g, sv)
            out = scale * (g / r[..., None] - ((sgn_n2 * e) / (r ** 3))[..., None] * _mrows(sv, kappa))
            out = out * flip
            if np.any(bad):
                out = np.where(bad[..., None], 0.0, out)
            return out

        return (grad,)

    return ad.primitive("fmidpoint", (s,), fwd, make)


def fproject(x, w, kappa: float):
    """k_project with a fused backward (both the point and the vector live)."""

    def fwd(xv, wv):
        return k_project(xv, wv, kappa)

    def make(iv, ov):
        xv, wv = iv
        if kappa == 0.0:
            mask = np.ones(wv.shape[-1])
            mask[0] = 0.0
            return (None, lambda g: g * mask)
        mx = _mrows(xv, kappa)
        a = _rowdot(wv, mx)[..., None]

        def gx(g):
            gdotx = _rowdot(g, xv)[..., None]
            return -kappa * (a * g + gdotx * _mrows(wv, kappa))

        def gw(g):
            gdotx = _rowdot(g, xv)[..., None]
            return g - kappa * gdotx * mx

        return (gx, gw)

    return ad.primitive("fproject", (x, w), fwd, make)


def fbc(z, ps, pt, alpha_col, kappa: float):
    """Fused per-pair bundle convolution terms (see _bc_terms)."""

    def fwd(zv, psv, ptv, av):
        return ad.val(_bc_terms(zv, psv, ptv, av, kappa))

    def make(iv, ov):
        zv, psv, ptv, av = iv
        if kappa == 0.0:
            return (
                lambda g: g * av,
                None,
                None,
                lambda g: _rowdot(g, zv)[..., None],
            )
        mpt = _mrows(ptv, kappa)
        mps = _mrows(psv, kappa)
        mz = _mrows(zv, kappa)
        a = _rowdot(zv, mpt)[..., None]
        b = (1.0 + kappa * _rowdot(psv, mpt))[..., None]
        c = kappa * av * a / b
        w = psv + ptv

        def gz(g):
            ew = _rowdot(g, w)[..., None]
            return av * g - (ew * kappa * av / b) * mpt

        def gps(g):
            ew = _rowdot(g, w)[..., None]
            return -c * g + (ew * c * kappa / b) * mpt

        def gpt(g):
            ew = _rowdot(g, w)[..., None]
            return -c * g - (ew * kappa * av / b) * mz + (ew * c * kappa / b) * mps

        def galpha(g):
            return _rowdot(g, zv)[..., None] - (kappa * a / b) * _rowdot(g, w)[..., None]

        return (gz, gps, gpt, galpha)

    return ad.primitive("fbc", (z, ps, pt, alpha_col), fwd, make)


# ---------------------------------------------------------------------------
# batched layer phases
# ---------------------------------------------------------------------------

def _coords_phase(batch: SubBatch, fstate: FactorState, cstate: FactorState,
                  p: FactorLayerParams, drop=None):
    """Cross-geometry attention over all substructures; returns slot coords."""
    kf, kc = fstate.spec.curvature, cstate.spec.curvature
    P = ad.take(fstate.coords, batch.node_sel)
    Pc = ad.take(cstate.coords, batch.node_sel)
    keys = flinear(P, p.wk, kf)
    vals = flinear(P, p.wv, kf)
    qrys = flinear(Pc, p.wq, kc)
    scores = _phi_scores(qrys, keys, batch.coord_tgt, batch.coord_src, p, drop)
    alpha = segment_softmax(scores, batch.coord_tgt_sel, batch.n_slots,
                            uniform=batch.coord_uniform, omega=batch.coord_omega)
    weighted = _col(alpha) * ad.take(vals, batch.coord_src_sel)
    s = ad.segment_sum(weighted, batch.coord_tgt_sel, batch.n_slots)
    wsum = ad.segment_sum(alpha, batch.coord_tgt_sel, batch.n_slots) if kf == 0.0 else None
    return fmidpoint(s, kf, wsum=wsum), alpha


def _encodings_phase(batch: SubBatch, fstate: FactorState, cstate: FactorState,
                     slot_coords, p: FactorLayerParams, drop=None):
    """Bundle convolution of encodings into the updated slot coordinates."""
    kf, kc = fstate.spec.curvature, cstate.spec.curvature
    P_old = ad.take(fstate.coords, batch.node_sel)
    Z = ad.take(fstate.encs, batch.node_sel)
    qrys = flinear(ad.take(cstate.coords, batch.node_sel), p.wq_e, kc)
    # keys come from the layer-input coordinates: the midpoint update pulls a
    # substructure's coordinates together, which would blur the keys
    keys = flinear(P_old, p.wk_e, kf)
    scores = _phi_scores(qrys, keys, batch.enc_tgt, batch.enc_src, p, drop)
    alpha = segment_softmax(scores, batch.enc_tgt_sel, batch.n_slots,
                            uniform=batch.enc_uniform, omega=batch.enc_omega)
    terms = fbc(
        ad.take(Z, batch.enc_src_sel),
        ad.take(P_old, batch.enc_src_sel),
        ad.take(slot_coords, batch.enc_tgt_sel),
        _col(alpha),
        kf,
    )
    zsum = ad.segment_sum(terms, batch.enc_tgt_sel, batch.n_slots)
    return fproject(slot_coords, zsum, kf)


def _aggregate_phase(batch: SubBatch, fstate: FactorState, slot_coords, slot_encs,
                     num_nodes: int):
    """Per-node midpoint of sampled coordinates + uniform bundle convolution."""
    kf = fstate.spec.curvature
    count = np.bincount(batch.node_ids, minlength=num_nodes).astype(np.float64)
    active = count > 0
    psum = ad.segment_sum(slot_coords, batch.node_sel, num_nodes)
    pnew = fmidpoint(psum, kf, wsum=count, active=active)
    pnew = ad.where(active[:, None], pnew, fstate.coords)
    weights = (1.0 / count[batch.node_ids])[:, None]
    terms = fbc(slot_encs, slot_coords, ad.take(pnew, batch.node_sel), weights, kf)
    zsum = ad.segment_sum(terms, batch.node_sel, num_nodes)
    znew = fproject(pnew, zsum, kf)
    znew = ad.where(active[:, None], znew, fstate.encs)
    return FactorState(fstate.spec, pnew, znew)


class DropoutPlan:
    """Draws inverted-dropout uniforms for phi hidden units in a fixed order."""

    def __init__(self, rate: float, hidden: int, rng: np.random.Generator):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.hidden = hidden
        self.rng = rng

    def uniforms(self, n_rows: int):
        if self.rate == 0.0:
            return None
        return self.rng.random((n_rows, self.hidden), dtype=np.float32)


def layer_forward_batched(state: BundleState, batches: dict[str, SubBatch],
                          params: LayerParams, dropout: DropoutPlan | None = None) -> BundleState:
    """One layer over prebuilt substructure batches (tree and cycle factors)."""
    num_nodes = state.num_nodes
    out = {}
    slots: dict[str, tuple] = {}
    for factor in FACTORS:
        batch = batches[factor]
        fstate = state.factor(factor)
        cstate = state.factor("cycle" if factor == "tree" else "tree")
        p = params.factor(factor)
        if batch.n_slots == 0:
            out[factor] = fstate
            continue
        slot_coords, _ = _coords_phase(batch, fstate, cstate, p, dropout)
        slot_encs = _encodings_phase(batch, fstate, cstate, slot_coords, p, dropout)
        slots[factor] = (slot_coords, slot_encs)
        out[factor] = _aggregate_phase(batch, fstate, slot_coords, slot_encs, num_nodes)
    return BundleState(tree=out["tree"], cycle=out["cycle"])


def layer_forward(graph, state: BundleState, trees, cycles, params: LayerParams,
                  dropout: DropoutPlan | None = None) -> BundleState:
    """One universal layer; pure with respect to its inputs."""
    batches = {"tree": build_subbatch(trees), "cycle": build_subbatch(cycles)}
    return layer_forward_batched(state, batches, params, dropout)


def forward_stack(state: BundleState, trees, cycles, params_flat: dict[str, Any],
                  cfg: ModelConfig, dropout: DropoutPlan | None = None) -> BundleState:
    """Run the full layer stack, building substructure indexes once."""
    batches = {"tree": build_subbatch(trees), "cycle": build_subbatch(cycles)}
    for layer in range(cfg.n_layers):
        state = layer_forward_batched(state, batches, layer_params_view(params_flat, layer), dropout)
    return state


# ---------------------------------------------------------------------------
# single-substructure operations (validated API over the batched kernels)
# ---------------------------------------------------------------------------

@dataclass
class AttentionWeights:
    """Per (target, source) attention weights of one substructure."""

    pairs: dict[tuple[int, int], float] = field(default_factory=dict)

    def row(self, target: int) -> dict[int, float]:
        return {s: w for (t, s), w in self.pairs.items() if t == target}


def cross_geometry_attention(sub, state: BundleState, params: LayerParams, factor: str):
    """Updated coordinates for sub.nodes plus the attention weights used."""
    if sub.kind != factor:
        raise DimensionMismatch(f"substructure kind {sub.kind!r} does not match factor {factor!r}")
    batch = build_subbatch([sub])
    fstate = state.factor(factor)
    cstate = state.factor("cycle" if factor == "tree" else "tree")
    coords, alpha = _coords_phase(batch, fstate, cstate, params.factor(factor))
    weights = AttentionWeights()
    for k, (t, s) in enumerate(zip(batch.coord_tgt, batch.coord_src)):
        weights.pairs[(sub.nodes[int(t)], sub.nodes[int(s)])] = float(ad.val(alpha)[k])
    return ad.val(coords), weights


def substructure_encode(sub, state: BundleState, params: LayerParams, factor: str,
                        updated_coords=None):
    """Updated encodings for sub.nodes, tangent at the updated coordinates."""
    if sub.kind != factor:
        raise DimensionMismatch(f"substructure kind {sub.kind!r} does not match factor {factor!r}")
    batch = build_subbatch([sub])
    fstate = state.factor(factor)
    cstate = state.factor("cycle" if factor == "tree" else "tree")
    if updated_coords is None:
        updated_coords, _ = _coords_phase(batch, fstate, cstate, params.factor(factor))
    return ad.val(_encodings_phase(batch, fstate, cstate, updated_coords, params.factor(factor)))


def bundle_convolution(sources, weights, target_coord: CurvedPoint, spec: SpaceSpec) -> TangentVector:
    """Weighted tangent aggregation into T(target): the closed-form transport sum.

    `sources` is a list of (CurvedPoint, TangentVector) pairs; each encoding
    must be tangent at its own coordinate.  Algebraically this equals
    transporting every encoding to the target and summing with `weights`.
    """
    if len(sources) != len(weights):
        raise DimensionMismatch("one weight per source required")
    ps = np.stack([p.coords for p, _ in sources])
    zs = np.stack([z.vec for _, z in sources])
    alpha = np.asarray(weights, dtype=np.float64)[:, None]
    pt = np.broadcast_to(target_coord.coords, ps.shape)
    vec = _bc_terms(zs, ps, pt, alpha, spec.curvature).sum(axis=0)
    return TangentVector(target_coord, vec)


def graph_level_aggregate(samples, spec: SpaceSpec) -> tuple[CurvedPoint, TangentVector]:
    """Align K sampled (coordinate, encoding) pairs of one node.

    The aggregated coordinate is the unit-weight midpoint; the encoding is
    the uniform (1/K) bundle convolution into its tangent space.
    """
    if not samples:
        raise ValueError("graph-level aggregation needs at least one sample")
    coords = np.stack([p.coords for p, _ in samples])
    s = coords.sum(axis=0)
    pa = CurvedPoint(
        k_midpoint(s[None, :], spec.curvature, wsum=np.array([float(len(samples))]))[0], spec)
    za = bundle_convolution(samples, np.full(len(samples), 1.0 / len(samples)), pa, spec)
    za = TangentVector(pa, k_project(pa.coords, za.vec, spec.curvature))
    return pa, za
