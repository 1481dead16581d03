"""Tape-based reverse-mode differentiation over a small numpy primitive set.

A :class:`Tape` is an append-only list of primitive-op records.  Each record
stores the op name, the indices of its input records, the forward result,
a replay closure and one gradient closure per input.  Because inputs always
precede outputs, the record order is a valid topological order and a single
reversed sweep computes exact gradients.

Every public function in this module accepts either a :class:`Node` or a
plain numpy array / scalar.  With plain inputs it falls through to numpy, so
numerical code written against this module runs identically inside and
outside a tape.  That property is what lets the geometry kernels in
:mod:`geobundle.spaces` serve both the validated library API and the
training path without duplication.

Two cost controls keep tapes lean: subgraphs that depend on no leaf are
folded into constants at record time, and the backward sweep only invokes
the gradient closures of inputs that can reach a leaf.

Domain guards follow a subgradient-zero convention: ``sqrt`` at zero,
``acos``/``acosh`` at their clamped domain edges and ``clip`` outside its
bounds all propagate a zero gradient rather than an infinite or NaN one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray

__all__ = [
    "Tape",
    "Node",
    "GradCheckReport",
    "backward",
    "gradients",
    "grad_check",
    "val",
    "add", "sub", "mul", "div", "neg",
    "matmul", "sum_", "reshape", "transpose", "concat", "take", "getitem",
    "segment_sum", "where",
    "exp", "log", "sqrt", "tanh", "absolute",
    "sin", "cos", "sinh", "cosh", "arccos", "arccosh",
    "clip", "logsumexp_rows", "pair_scores",
]

# Gradient of acos/acosh is forced to zero this close to the domain edge.
_EDGE_GUARD = 1e-12


def _asarray(x) -> Array:
    return np.asarray(x, dtype=np.float64)


@dataclass
class Record:
    op: str
    inputs: tuple[int, ...]
    value: Array
    # fwd recomputes the value from input values; None marks a leaf/constant.
    fwd: Callable[..., Array] | None
    # one closure per input mapping the output grad to that input's grad
    vjps: tuple[Callable[[Array], Array] | None, ...] | None


class Tape:
    """Append-only record list for one forward pass."""

    def __init__(self) -> None:
        self.records: list[Record] = []
        self._live: list[bool] = []

    def __len__(self) -> int:
        return len(self.records)

    def _append(self, rec: Record, live: bool) -> "Node":
        self.records.append(rec)
        self._live.append(live)
        return Node(self, len(self.records) - 1)

    def leaf(self, value) -> "Node":
        """Register a trainable leaf; gradients are reported for leaves only."""
        v = _asarray(value).copy()
        return self._append(Record("leaf", (), v, None, None), live=True)

    def constant(self, value) -> "Node":
        """Register a non-trainable input."""
        return self._append(Record("const", (), _asarray(value), None, None), live=False)

    def is_leaf(self, node: "Node") -> bool:
        return self.records[node.idx].op == "leaf"

    def replay(self) -> list[Array]:
        """Re-run the forward pass from the stored leaves and constants.

        Returns the recomputed value list; used to assert that the tape is
        replayable (bitwise-identical forward results).
        """
        values: list[Array] = []
        for rec in self.records:
            if rec.fwd is None:
                values.append(rec.value)
            else:
                values.append(rec.fwd(*(values[i] for i in rec.inputs)))
        return values


class Node:
    """Handle to one record of a tape."""

    __slots__ = ("tape", "idx")

    # keep numpy from consuming Nodes in mixed expressions; reflected
    # operators below handle ndarray-op-Node instead
    __array_ufunc__ = None

    def __init__(self, tape: Tape, idx: int) -> None:
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> Array:
        return self.tape.records[self.idx].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(idx={self.idx}, shape={self.value.shape})"

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)


def val(x) -> Array:
    """Detached numpy value of a Node (or the input itself)."""
    return x.value if isinstance(x, Node) else _asarray(x)


def _tape_of(args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Node):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands come from different tapes")
    return tape


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _record(op: str, args: Sequence, fwd: Callable[..., Array], make_vjps):
    """Apply a primitive.

    `make_vjps(ivals, out)` returns one gradient closure per input (or None
    for non-differentiable inputs).  Falls back to a plain numpy call when
    no argument is a Node and folds leaf-independent subgraphs into
    constants.
    """
    tape = _tape_of(args)
    if tape is None:
        return fwd(*(_asarray(a) for a in args))
    nodes = [a if isinstance(a, Node) else tape.constant(a) for a in args]
    ivals = tuple(n.value for n in nodes)
    out = fwd(*ivals)
    live = tuple(tape._live[n.idx] for n in nodes)
    if not any(live):
        return tape.constant(out)
    vjps = make_vjps(ivals, out)
    vjps = tuple(v if keep else None for v, keep in zip(vjps, live))
    rec = Record(op, tuple(n.idx for n in nodes), out, fwd, vjps)
    return tape._append(rec, live=True)


# fused kernels register custom records through this entry point
primitive = _record


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    return _record(
        "add", (a, b), lambda x, y: x + y,
        lambda iv, ov: (
            lambda g: _unbroadcast(g, iv[0].shape),
            lambda g: _unbroadcast(g, iv[1].shape),
        ),
    )


def sub(a, b):
    return _record(
        "sub", (a, b), lambda x, y: x - y,
        lambda iv, ov: (
            lambda g: _unbroadcast(g, iv[0].shape),
            lambda g: _unbroadcast(-g, iv[1].shape),
        ),
    )


def mul(a, b):
    return _record(
        "mul", (a, b), lambda x, y: x * y,
        lambda iv, ov: (
            lambda g: _unbroadcast(g * iv[1], iv[0].shape),
            lambda g: _unbroadcast(g * iv[0], iv[1].shape),
        ),
    )


def div(a, b):
    return _record(
        "div", (a, b), lambda x, y: x / y,
        lambda iv, ov: (
            lambda g: _unbroadcast(g / iv[1], iv[0].shape),
            lambda g: _unbroadcast(-g * iv[0] / (iv[1] * iv[1]), iv[1].shape),
        ),
    )


def neg(a):
    return _record("neg", (a,), lambda x: -x, lambda iv, ov: (lambda g: -g,))


def matmul(a, b):
    def fwd(x, y):
        if x.ndim != 2 or y.ndim != 2:
            raise ValueError("matmul primitive supports 2-d operands only")
        return x @ y

    return _record(
        "matmul", (a, b), fwd,
        lambda iv, ov: (
            lambda g: g @ iv[1].T,
            lambda g: iv[0].T @ g,
        ),
    )


def sum_(a, axis=None, keepdims: bool = False):
    def fwd(x):
        return np.sum(x, axis=axis, keepdims=keepdims)

    def make(iv, ov):
        shape = iv[0].shape

        def grad(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape)

        return (grad,)

    return _record("sum", (a,), fwd, make)


def reshape(a, shape):
    shape = tuple(shape)
    return _record(
        "reshape", (a,), lambda x: x.reshape(shape),
        lambda iv, ov: (lambda g: g.reshape(iv[0].shape),),
    )


def transpose(a):
    return _record(
        "transpose", (a,), lambda x: x.T.copy(),
        lambda iv, ov: (lambda g: g.T.copy(),),
    )


def concat(parts: Iterable, axis: int = -1):
    parts = list(parts)

    def fwd(*xs):
        return np.concatenate(xs, axis=axis)

    def make(iv, ov):
        sizes = [x.shape[axis] for x in iv]
        splits = np.cumsum(sizes)[:-1]

        def grad_for(i):
            return lambda g: np.split(g, splits, axis=axis)[i]

        return tuple(grad_for(i) for i in range(len(iv)))

    return _record("concat", parts, fwd, make)


class SegIndex:
    """A constant row-index array with a cached CSR scatter operator.

    Gathers are plain fancy indexing; the transposed scatter-add (the vjp of
    a gather, the forward of a segment sum) runs as a sparse matmul, which
    is several times faster than ufunc.at on large index sets.  Instances
    are reusable across tapes and layers.
    """

    def __init__(self, ids) -> None:
        self.ids = np.asarray(ids, dtype=np.intp)
        self._csr: dict[int, "object"] = {}

    def __len__(self) -> int:
        return len(self.ids)

    def scatter(self, g: Array, n_out: int) -> Array:
        import scipy.sparse as _sp

        mat = self._csr.get(n_out)
        if mat is None:
            p = len(self.ids)
            mat = _sp.csr_matrix(
                (np.ones(p), (self.ids, np.arange(p))), shape=(n_out, p))
            self._csr[n_out] = mat
        return mat @ g


def _as_segindex(idx) -> SegIndex:
    return idx if isinstance(idx, SegIndex) else SegIndex(idx)


def take(a, idx, axis: int = 0):
    """Gather rows by a constant index array (or SegIndex) along axis 0."""
    seg = _as_segindex(idx)
    if axis != 0:
        raise ValueError("take supports axis=0 only")

    def fwd(x):
        return x[seg.ids]

    def make(iv, ov):
        n = iv[0].shape[0]
        return (lambda g: seg.scatter(g, n),)

    return _record("take", (a,), fwd, make)


def getitem(a, key):
    """Basic slicing (ints, slices, Ellipsis). Index arrays go through take()."""

    def fwd(x):
        return x[key]

    def make(iv, ov):
        shape = iv[0].shape

        def grad(g):
            out = np.zeros(shape)
            np.add.at(out, key, g)
            return out

        return (grad,)

    return _record("getitem", (a,), fwd, make)


def segment_sum(a, ids, num_segments: int):
    """Sum rows of `a` into `num_segments` buckets given by constant ids."""
    seg = _as_segindex(ids)

    def fwd(x):
        return seg.scatter(x, num_segments)

    return _record("segment_sum", (a,), fwd, lambda iv, ov: (lambda g: g[seg.ids],))


def where(mask, a, b):
    """Select by a constant boolean mask; gradient routes to the taken side."""
    mask = np.asarray(mask, dtype=bool)

    def fwd(x, y):
        return np.where(mask, x, y)

    return _record(
        "where", (a, b), fwd,
        lambda iv, ov: (
            lambda g: _unbroadcast(np.where(mask, g, 0.0), iv[0].shape),
            lambda g: _unbroadcast(np.where(mask, 0.0, g), iv[1].shape),
        ),
    )


# ---------------------------------------------------------------------------
# elementwise transcendentals
# ---------------------------------------------------------------------------

def exp(a):
    return _record("exp", (a,), np.exp, lambda iv, ov: (lambda g: g * ov,))


def log(a):
    return _record("log", (a,), np.log, lambda iv, ov: (lambda g: g / iv[0],))


def sqrt(a):
    """Square root with the domain guard sqrt(max(x, 0)); zero grad at x <= 0."""

    def fwd(x):
        return np.sqrt(np.maximum(x, 0.0))

    def make(iv, ov):
        pos = iv[0] > 0.0
        safe = np.where(pos, ov, 1.0)
        return (lambda g: np.where(pos, 0.5 * g / safe, 0.0),)

    return _record("sqrt", (a,), fwd, make)


def tanh(a):
    return _record("tanh", (a,), np.tanh, lambda iv, ov: (lambda g: g * (1.0 - ov * ov),))


def absolute(a):
    return _record("abs", (a,), np.abs, lambda iv, ov: (lambda g: g * np.sign(iv[0]),))


def sin(a):
    return _record("sin", (a,), np.sin, lambda iv, ov: (lambda g: g * np.cos(iv[0]),))


def cos(a):
    return _record("cos", (a,), np.cos, lambda iv, ov: (lambda g: -g * np.sin(iv[0]),))


def sinh(a):
    return _record("sinh", (a,), np.sinh, lambda iv, ov: (lambda g: g * np.cosh(iv[0]),))


def cosh(a):
    return _record("cosh", (a,), np.cosh, lambda iv, ov: (lambda g: g * np.sinh(iv[0]),))


def arccos(a):
    """acos with argument clamped to [-1, 1]; zero grad within 1e-12 of the edge."""

    def fwd(x):
        return np.arccos(np.clip(x, -1.0, 1.0))

    def make(iv, ov):
        x = iv[0]
        inside = np.abs(x) < 1.0 - _EDGE_GUARD
        denom = np.sqrt(np.where(inside, 1.0 - x * x, 1.0))
        return (lambda g: np.where(inside, -g / denom, 0.0),)

    return _record("arccos", (a,), fwd, make)


def arccosh(a):
    """acosh with argument clamped to [1, inf); zero grad within 1e-12 of the edge."""

    def fwd(x):
        return np.arccosh(np.maximum(x, 1.0))

    def make(iv, ov):
        x = iv[0]
        inside = x > 1.0 + _EDGE_GUARD
        denom = np.sqrt(np.where(inside, x * x - 1.0, 1.0))
        return (lambda g: np.where(inside, g / denom, 0.0),)

    return _record("arccosh", (a,), fwd, make)


def clip(a, lo: float | None, hi: float | None):
    """Clamp values; gradient is zero where the clamp is active."""

    def fwd(x):
        return np.clip(x, lo, hi)

    def make(iv, ov):
        x = iv[0]
        inside = np.ones_like(x, dtype=bool)
        if lo is not None:
            inside &= x > lo
        if hi is not None:
            inside &= x < hi
        return (lambda g: np.where(inside, g, 0.0),)

    return _record("clip", (a,), fwd, make)


def logsumexp_rows(s):
    """Row-wise log-sum-exp of a 2-d score matrix, shifted by a detached max."""
    shift = np.max(val(s), axis=1, keepdims=True)
    e = exp(sub(s, shift))
    return add(log(sum_(e, axis=1)), shift[:, 0])


# ---------------------------------------------------------------------------
# fused pairwise attention scores
# ---------------------------------------------------------------------------

_NO_MASK = np.empty((0, 0), dtype=np.float32)


def _pair_scores_fwd(A, B, w2, tgt, src, uniforms, rate, inv_keep):
    h = np.tanh(A[tgt] + B[src])
    hd = h if uniforms is None else h * ((uniforms >= rate) * inv_keep)
    return hd @ w2, h


def _pair_scores_bwd(h, w2, g, tgt, src, uniforms, rate, inv_keep, n_a, n_b):
    m = 1.0 if uniforms is None else (uniforms >= rate) * inv_keep
    gw2 = (h * m).T @ g if uniforms is not None else h.T @ g
    gpre = (g[:, None] * w2[None, :]) * m * (1.0 - h * h)
    ga = np.zeros((n_a, h.shape[1]))
    np.add.at(ga, tgt, gpre)
    gb = np.zeros((n_b, h.shape[1]))
    np.add.at(gb, src, gpre)
    return ga, gb, gw2


try:  # optional numba acceleration for the pairwise hot loop
    import numba as _nb

    @_nb.njit(cache=True)
    def _gather_add_nb(A, B, tgt, src):  # pragma: no cover
        P = tgt.shape[0]
        H = A.shape[1]
        pre = np.empty((P, H))
        for p in range(P):
            t = tgt[p]
            q = src[p]
            for j in range(H):
                pre[p, j] = A[t, j] + B[q, j]
        return pre

    @_nb.njit(cache=True)
    def _mask_matvec_nb(h, w2, uniforms, rate, inv_keep, use_mask):  # pragma: no cover
        P, H = h.shape
        s = np.empty(P)
        for p in range(P):
            acc = 0.0
            for j in range(H):
                v = h[p, j]
                if use_mask:
                    v = v * inv_keep if uniforms[p, j] >= rate else 0.0
                acc += v * w2[j]
            s[p] = acc
        return s

    @_nb.njit(cache=True)
    def _pair_scores_bwd_nb(h, w2, g, tgt, src, uniforms, rate, inv_keep, use_mask, n_a, n_b):  # pragma: no cover
        P, H = h.shape
        ga = np.zeros((n_a, H))
        gb = np.zeros((n_b, H))
        gw2 = np.zeros(H)
        for p in range(P):
            t = tgt[p]
            q = src[p]
            gs = g[p]
            for j in range(H):
                hv = h[p, j]
                if use_mask:
                    m = inv_keep if uniforms[p, j] >= rate else 0.0
                else:
                    m = 1.0
                gw2[j] += gs * hv * m
                gp = gs * w2[j] * m * (1.0 - hv * hv)
                ga[t, j] += gp
                gb[q, j] += gp
        return ga, gb, gw2

    _HAVE_NUMBA = True
except Exception:  # pragma: no cover
    _HAVE_NUMBA = False


def pair_scores(a, b, w2, tgt, src, dropout_uniforms=None, drop_rate: float = 0.0):
    """Fused per-pair scores: (tanh(A[tgt] + B[src]) * mask) @ w2.

    A and B hold per-row hidden pre-activations, w2 the output weights; tgt
    and src are constant index arrays.  `dropout_uniforms` is an optional
    float32 uniform draw per (pair, hidden unit); entries below `drop_rate`
    are dropped and survivors scaled by 1/(1-rate).  One tape record covers
    the whole pairwise block, which keeps the hidden activations out of the
    generic op stream.
    """
    tgt = np.asarray(tgt, dtype=np.int64)
    src = np.asarray(src, dtype=np.int64)
    uniforms = dropout_uniforms
    rate = np.float32(drop_rate)
    inv_keep = 1.0 / (1.0 - drop_rate) if uniforms is not None else 1.0
    state: dict = {}

    def fwd(av, bv, wv):
        if _HAVE_NUMBA:
            pre = _gather_add_nb(av, bv, tgt, src)
            h = np.tanh(pre, out=pre)
            mask = uniforms if uniforms is not None else _NO_MASK
            s = _mask_matvec_nb(h, wv, mask, rate, inv_keep, uniforms is not None)
        else:
            s, h = _pair_scores_fwd(av, bv, wv, tgt, src, uniforms, rate, inv_keep)
        state["h"] = h
        return s

    def make(iv, ov):
        av, bv, wv = iv
        h = state["h"]
        cache: dict = {}

        def shared(g):
            if "grads" not in cache:
                if _HAVE_NUMBA:
                    mask = uniforms if uniforms is not None else _NO_MASK
                    cache["grads"] = _pair_scores_bwd_nb(
                        h, wv, g, tgt, src, mask, rate, inv_keep,
                        uniforms is not None, av.shape[0], bv.shape[0])
                else:
                    cache["grads"] = _pair_scores_bwd(
                        h, wv, g, tgt, src, uniforms, rate, inv_keep,
                        av.shape[0], bv.shape[0])
            return cache["grads"]

        return (
            lambda g: shared(g)[0],
            lambda g: shared(g)[1],
            lambda g: shared(g)[2],
        )

    return _record("pair_scores", (a, b, w2), fwd, make)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Node) -> dict[int, Array]:
    """Exact reverse-mode gradients of a scalar loss for every leaf record.

    Returns a map from leaf record index to the gradient array (matching the
    leaf's shape). Raises on a non-scalar loss node.
    """
    lval = loss.value
    if lval.size != 1:
        raise ValueError(f"loss must be scalar, got shape {lval.shape}")
    grads: list[Array | None] = [None] * len(tape.records)
    owned: list[bool] = [False] * len(tape.records)
    grads[loss.idx] = np.ones_like(lval)
    live = tape._live
    for i in range(loss.idx, -1, -1):
        g = grads[i]
        if g is None:
            continue
        rec = tape.records[i]
        if rec.vjps is None:
            continue
        for j, vjp in zip(rec.inputs, rec.vjps):
            if vjp is None or not live[j]:
                continue
            gj = vjp(g)
            if grads[j] is None:
                grads[j] = gj
            elif owned[j]:
                np.add(grads[j], gj, out=grads[j])
            else:
                grads[j] = grads[j] + gj
                owned[j] = True
    out: dict[int, Array] = {}
    for i, rec in enumerate(tape.records):
        if rec.op == "leaf":
            gi = grads[i]
            out[i] = np.asarray(gi, dtype=np.float64) if gi is not None else np.zeros_like(rec.value)
    return out


def gradients(tape: Tape, loss: Node, leaves: dict[str, Node]) -> dict[str, Array]:
    """Backward pass, reported by leaf name."""
    raw = backward(tape, loss)
    return {name: raw[node.idx] for name, node in leaves.items()}


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    failures: list[tuple[str, tuple[int, ...], float, float, float]]

    @property
    def ok(self) -> bool:
        return not self.failures


def _rel_err(a: float, b: float, floor: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(
    f: Callable[[dict[str, Node]], Node],
    leaves: dict[str, Array],
    h: float = 1e-5,
    tol: float = 1e-4,
    abs_floor: float = 1e-5,
) -> GradCheckReport:
    """Compare reverse-mode gradients of f against central finite differences.

    `f` must be deterministic (disable dropout) and map a dict of leaf Nodes
    to a scalar Node.  Every entry of every leaf is perturbed by +/- h; the
    report lists the max relative error and all failing indices.

    The relative-error denominator is floored at `abs_floor` because central
    differences on an O(1)-valued objective carry an absolute noise of
    roughly eps/h plus the h^2 truncation term; entries smaller than the
    floor are effectively checked absolutely against tol * abs_floor.
    """
    leaves = {k: _asarray(v).copy() for k, v in leaves.items()}

    tape = Tape()
    nodes = {k: tape.leaf(v) for k, v in leaves.items()}
    loss = f(nodes)
    got = gradients(tape, loss, nodes)

    def eval_at(vals: dict[str, Array]) -> float:
        t = Tape()
        return float(f({k: t.leaf(v) for k, v in vals.items()}).value)

    max_err = 0.0
    n = 0
    failures = []
    for name, base in leaves.items():
        flat = base.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = eval_at(leaves)
            flat[k] = orig - h
            fm = eval_at(leaves)
            flat[k] = orig
            fd = (fp - fm) / (2.0 * h)
            ad_g = float(got[name].reshape(-1)[k])
            err = _rel_err(fd, ad_g, abs_floor)
            max_err = max(max_err, err)
            n += 1
            if err > tol:
                idx = np.unravel_index(k, base.shape)
                failures.append((name, tuple(int(i) for i in idx), fd, ad_g, err))
    return GradCheckReport(max_rel_err=max_err, n_checked=n, failures=failures)
