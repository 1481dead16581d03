"""Self-supervised pretraining with the two-view geometric contrastive loss.

The two factor encodings of a node, parallel-transported into the shared
tangent space at each factor's pole, act as positive pairs; other nodes in
the pool are negatives.  The loss is the InfoNCE-style sum over both
directions.  Only the layer weight matrices and score-MLP parameters are
trainable; the initial state is recomputed per graph from the Laplacian,
which keeps checkpoints graph-independent.
"""

from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import CheckpointFormatError, NonFiniteLoss
from .graphs import Graph, normalized_laplacian_topk, sample_cycles, sample_trees
from .initstate import init_state
from .layers import (
    BundleState,
    DropoutPlan,
    ModelConfig,
    fbc,
    forward_stack,
    init_params,
    param_shapes,
)
from .spaces import north_pole

logger = logging.getLogger("geobundle.pretrain")

CHECKPOINT_MAGIC = b"RGFM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 0.01
    dropout: float = 0.1
    seed: int = 0
    samples_per_anchor: int = 3
    tree_depth: int = 2
    branch_cap: int = 5
    temperature: float = 1.0
    negative_pool: str = "batch"     # "batch" | "full"
    freeze_samples: bool = False
    eigen_mode: str = "largest"      # "largest" | "smallest"
    spectral_k: int | None = None    # defaults to the factor dimension
    threads: int = 1

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.samples_per_anchor < 1:
            raise ValueError("samples_per_anchor must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.negative_pool not in ("batch", "full"):
            raise ValueError("negative_pool must be 'batch' or 'full'")
        if self.eigen_mode not in ("largest", "smallest"):
            raise ValueError("eigen_mode must be 'largest' or 'smallest'")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


class Adam:
    """Adam with the standard moment hyperparameters (0.9 / 0.999, eps 1e-8)."""

    def __init__(self, shapes: dict[str, tuple[int, ...]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def pole_views(state: BundleState, nodes=None):
    """Both factor encodings transported to their pole tangent spaces.

    Returns the space-like parts only; time components vanish at the pole.
    """
    views = []
    for factor in ("tree", "cycle"):
        f = state.factor(factor)
        coords, encs = f.coords, f.encs
        if nodes is not None:
            coords = ad.take(coords, nodes)
            encs = ad.take(encs, nodes)
        shape = np.shape(ad.val(coords))
        o = np.broadcast_to(north_pole(f.spec).coords, shape)
        # parallel transport to the pole = bundle-convolution term with weight 1
        moved = fbc(encs, coords, o, np.ones((shape[0], 1)), f.spec.curvature)
        views.append(moved[..., 1:])
    return views[0], views[1]


def contrastive_loss(state: BundleState, node_set, tau: float = 1.0):
    """Two-directional contrast between the pole-transported factor views.

    For each node the positive is its own counterpart view; the in-set rows
    serve as negatives.  Zero for a single node by construction.
    """
    nodes = np.asarray(node_set, dtype=np.intp)
    n = len(nodes)
    hview, sview = pole_views(state, nodes)
    if np.shape(ad.val(hview))[1] != np.shape(ad.val(sview))[1]:
        raise ValueError("contrastive loss requires equal factor dimensions")
    sim = ad.matmul(hview, ad.transpose(sview) if isinstance(sview, ad.Node) else np.asarray(sview).T)
    sim = sim * (1.0 / tau)
    diag = ad.take(ad.reshape(sim, (n * n,)), np.arange(n) * (n + 1))
    row_lse = ad.logsumexp_rows(sim)
    col_lse = ad.logsumexp_rows(ad.transpose(sim) if isinstance(sim, ad.Node) else np.asarray(sim).T)
    return ad.sum_(row_lse - diag) + ad.sum_(col_lse - diag)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: ModelConfig
    train: TrainConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int = 0
    epochs_done: int = 0
    rng_state: dict = field(default_factory=dict)

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return load_checkpoint(path)


def _split_u128(x: int) -> list[float]:
    return [float((x >> (32 * i)) & 0xFFFFFFFF) for i in range(4)]


def _join_u128(limbs) -> int:
    return sum(int(l) << (32 * i) for i, l in enumerate(limbs))


_POOL_CODE = {"batch": 0.0, "full": 1.0}
_MODE_CODE = {"largest": 0.0, "smallest": 1.0}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write the versioned binary format.

    Layout: magic "RGFM", little-endian u32 version, then little-endian
    float64 fields in this order: 6 model-config scalars, step and epoch
    counters, 12 training-config scalars, 10 RNG-state limbs, then every
    parameter tensor (C order) in param_shapes order, then the Adam first
    and second moments in the same order.
    """
    m, t = ckpt.model, ckpt.train
    head = [
        float(m.dim_tree), m.curv_tree, float(m.dim_cycle), m.curv_cycle,
        float(m.n_layers), float(m.phi_hidden),
        float(ckpt.step), float(ckpt.epochs_done),
        t.learning_rate, t.dropout, float(t.seed), float(t.samples_per_anchor),
        float(t.tree_depth), float(t.branch_cap), t.temperature, float(t.batch_size),
        _POOL_CODE[t.negative_pool], 1.0 if t.freeze_samples else 0.0,
        _MODE_CODE[t.eigen_mode],
        -1.0 if t.spectral_k is None else float(t.spectral_k),
        float(t.epochs),
    ]
    rng = ckpt.rng_state or _fresh_rng_state(t.seed)
    inner = rng["state"]
    head += _split_u128(inner["state"]) + _split_u128(inner["inc"])
    head += [float(rng.get("has_uint32", 0)), float(rng.get("uinteger", 0))]
    blocks = [np.asarray(head, dtype="<f8").tobytes()]
    for name in param_shapes(m):
        blocks.append(np.ascontiguousarray(ckpt.params[name], dtype="<f8").tobytes())
    for moments in (ckpt.adam_m, ckpt.adam_v):
        for name in param_shapes(m):
            blocks.append(np.ascontiguousarray(moments[name], dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for b in blocks:
            fh.write(b)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic bytes; not a checkpoint file")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    data = np.frombuffer(raw[8:], dtype="<f8")
    head, rest = data[:31], data[31:]
    model = ModelConfig(
        dim_tree=int(head[0]), curv_tree=float(head[1]),
        dim_cycle=int(head[2]), curv_cycle=float(head[3]),
        n_layers=int(head[4]), phi_hidden=int(head[5]),
    )
    pool = "full" if head[16] == 1.0 else "batch"
    mode = "smallest" if head[18] == 1.0 else "largest"
    train = TrainConfig(
        epochs=int(head[20]), batch_size=int(head[15]), learning_rate=float(head[8]),
        dropout=float(head[9]), seed=int(head[10]), samples_per_anchor=int(head[11]),
        tree_depth=int(head[12]), branch_cap=int(head[13]), temperature=float(head[14]),
        negative_pool=pool, freeze_samples=bool(head[17] == 1.0), eigen_mode=mode,
        spectral_k=None if head[19] < 0 else int(head[19]),
    )
    rng_state = {
        "bit_generator": "PCG64",
        "state": {"state": _join_u128(head[21:25]), "inc": _join_u128(head[25:29])},
        "has_uint32": int(head[29]),
        "uinteger": int(head[30]),
    }
    shapes = param_shapes(model)
    arrays = []
    offset = 0
    for _ in range(3):
        block = {}
        for name, shape in shapes.items():
            size = int(np.prod(shape))
            block[name] = rest[offset:offset + size].reshape(shape).copy()
            offset += size
        arrays.append(block)
    if offset != len(rest):
        raise CheckpointFormatError("checkpoint payload length mismatch")
    return Checkpoint(
        model=model, train=train, params=arrays[0], adam_m=arrays[1], adam_v=arrays[2],
        step=int(head[6]), epochs_done=int(head[7]), rng_state=rng_state,
    )


def _fresh_rng_state(seed: int) -> dict:
    return np.random.default_rng(seed).bit_generator.state


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _prepare_state(graph: Graph, model: ModelConfig, cfg: TrainConfig) -> BundleState:
    k = cfg.spectral_k or max(model.dim_tree, model.dim_cycle)
    k = min(k, graph.num_nodes)
    spectral = normalized_laplacian_topk(graph, k, mode=cfg.eigen_mode)
    return init_state(graph, spectral, (model.tree_spec, model.cycle_spec))


def _sample_epoch(graph: Graph, cfg: TrainConfig, epoch_seed_parts) -> tuple[list, list]:
    anchors = range(graph.num_nodes)
    seed = int(np.random.SeedSequence(epoch_seed_parts).generate_state(1)[0])
    trees = sample_trees(graph, anchors, depth=cfg.tree_depth, branch_cap=cfg.branch_cap,
                         samples_per_anchor=cfg.samples_per_anchor, seed=seed)
    cycles = sample_cycles(graph, anchors, samples_per_anchor=cfg.samples_per_anchor,
                           seed=seed)
    return trees, cycles


def _step_shard(state0, trees, cycles, params, model, cfg, pool_nodes, drop_rng):
    tape = ad.Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    dropout = None
    if cfg.dropout > 0.0:
        dropout = DropoutPlan(cfg.dropout, model.phi_hidden, drop_rng)
    out = forward_stack(state0, trees, cycles, leaves, model, dropout)
    loss = contrastive_loss(out, pool_nodes, cfg.temperature)
    value = float(loss.value)
    if not np.isfinite(value):
        raise NonFiniteLoss(f"non-finite loss {value}")
    grads = ad.gradients(tape, loss, leaves)
    return value, grads


def train(graph: Graph, cfg: TrainConfig, model: ModelConfig | None = None):
    """Pretrain on one graph; returns (Checkpoint, per-epoch mean loss trace).

    Deterministic given (graph, cfg, model).  Substructures are resampled
    every epoch unless cfg.freeze_samples is set.
    """
    if graph.num_nodes == 0:
        raise ValueError("cannot train on an empty graph")
    model = model or ModelConfig()
    if cfg.negative_pool == "full" and graph.num_nodes > 2048:
        raise ValueError("full negative pool supported for graphs up to 2048 nodes")
    state0 = _prepare_state(graph, model, cfg)
    params = init_params(model, np.random.default_rng([cfg.seed, 0]))
    adam = Adam(param_shapes(model), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    trace: list[float] = []
    frozen = _sample_epoch(graph, cfg, [cfg.seed, 1, 0]) if cfg.freeze_samples else None
    step = 0
    for epoch in range(cfg.epochs):
        trees, cycles = frozen if frozen else _sample_epoch(graph, cfg, [cfg.seed, 1, epoch])
        tree_by_anchor = _group_by_anchor(trees)
        cycle_by_anchor = _group_by_anchor(cycles)
        order = rng.permutation(graph.num_nodes)
        epoch_losses = []
        for start in range(0, graph.num_nodes, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            shards = np.array_split(batch, cfg.threads) if cfg.threads > 1 else [batch]
            shards = [s for s in shards if len(s)]
            shard_rngs = [np.random.default_rng([cfg.seed, 3, step, i]) for i in range(len(shards))]
            step_loss = 0.0
            pool_total = 0
            grads_total: dict[str, np.ndarray] | None = None
            try:
                results = _run_shards(
                    shards, shard_rngs, state0, tree_by_anchor, cycle_by_anchor,
                    params, model, cfg, graph)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(f"epoch {epoch} step {step}: {exc}") from exc
            for pool_n, (value, grads) in results:
                step_loss += value
                pool_total += pool_n
                if grads_total is None:
                    grads_total = grads
                else:
                    for k in grads_total:
                        grads_total[k] = grads_total[k] + grads[k]
            adam.step(params, grads_total)
            epoch_losses.append(step_loss / max(pool_total, 1))
            step += 1
        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else 0.0
        trace.append(mean_loss)
        logger.info("epoch %d mean loss %.6f", epoch, mean_loss)
    return Checkpoint(
        model=model, train=cfg, params=params, adam_m=adam.m, adam_v=adam.v,
        step=step, epochs_done=cfg.epochs, rng_state=rng.bit_generator.state,
    ), trace


def _run_shards(shards, shard_rngs, state0, tree_by_anchor, cycle_by_anchor,
                params, model, cfg, graph):
    jobs = []
    for anchors in shards:
        trees = [t for a in anchors for t in tree_by_anchor.get(int(a), [])]
        cycles = [c for a in anchors for c in cycle_by_anchor.get(int(a), [])]
        pool = anchors if cfg.negative_pool == "batch" else np.arange(graph.num_nodes)
        jobs.append((trees, cycles, pool))
    if len(jobs) == 1:
        t, c, pool = jobs[0]
        return [(len(pool), _step_shard(state0, t, c, params, model, cfg, pool, shard_rngs[0]))]
    with ThreadPoolExecutor(max_workers=len(jobs)) as ex:
        futures = [
            ex.submit(_step_shard, state0, t, c, params, model, cfg, pool, r)
            for (t, c, pool), r in zip(jobs, shard_rngs)
        ]
        return [(len(pool), f.result()) for (t, c, pool), f in zip(jobs, futures)]


def _group_by_anchor(subs) -> dict[int, list]:
    groups: dict[int, list] = {}
    for s in subs:
        groups.setdefault(s.anchor, []).append(s)
    return groups


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------

def embed(graph: Graph, ckpt: Checkpoint, seed: int = 0) -> np.ndarray:
    """Per-node embedding table (num_nodes, dim_tree + dim_cycle).

    Runs the forward stack with dropout disabled over substructures sampled
    for every node, then concatenates the pole-transported space-like
    encoding parts of both factors.  Works on any graph; the checkpoint
    carries no graph-specific state.
    """
    model, cfg = ckpt.model, ckpt.train
    state = _prepare_state(graph, model, cfg)
    trees, cycles = _sample_epoch(graph, cfg, [seed, 4])
    out = forward_stack(state, trees, cycles, ckpt.params, model, dropout=None)
    hview, sview = pole_views(out)
    return np.concatenate([ad.val(hview), ad.val(sview)], axis=1)
