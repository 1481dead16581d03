"""Graph ingestion, spectral initialization and substructure sampling.

Graphs are undirected, deduplicated, self-loop free, with node ids in
``[0, num_nodes)``.  The structural vocabulary sampled here consists of
rooted BFS trees (one per anchor and sample) and rings of length 3 or 4
through each anchor; anchors that lie on no cycle fall back to a flagged
degenerate 2-node ring so every node still receives updates on the cycle
factor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse

from .errors import EdgeListFormatError

DENSE_EIG_CUTOFF = 4096


@dataclass
class Graph:
    num_nodes: int
    neighbors: list[np.ndarray]
    labels: np.ndarray | None = None
    features: np.ndarray | None = None

    @property
    def num_edges(self) -> int:
        return sum(len(n) for n in self.neighbors) // 2

    def degree(self, u: int) -> int:
        return len(self.neighbors[u])

    def has_edge(self, u: int, v: int) -> bool:
        nbrs = self.neighbors[u]
        i = np.searchsorted(nbrs, v)
        return i < len(nbrs) and nbrs[i] == v

    def edges(self) -> np.ndarray:
        """All undirected edges as an array of (u, v) pairs with u < v."""
        out = [(u, int(v)) for u in range(self.num_nodes) for v in self.neighbors[u] if u < v]
        return np.array(out, dtype=np.int64).reshape(-1, 2)

    @classmethod
    def from_edges(cls, num_nodes: int, edge_pairs) -> "Graph":
        adj: list[set[int]] = [set() for _ in range(num_nodes)]
        for u, v in edge_pairs:
            if u == v:
                continue
            adj[u].add(v)
            adj[v].add(u)
        return cls(num_nodes, [np.array(sorted(s), dtype=np.int64) for s in adj])

    def without_edges(self, drop) -> "Graph":
        """Copy of the graph with the given undirected edges removed."""
        dropset = {(min(u, v), max(u, v)) for u, v in drop}
        kept = [
            (u, v)
            for u, v in self.edges()
            if (int(u), int(v)) not in dropset
        ]
        g = Graph.from_edges(self.num_nodes, kept)
        g.labels = self.labels
        g.features = self.features
        return g

    def adjacency(self) -> sparse.csr_matrix:
        rows = np.concatenate([np.full(len(n), u) for u, n in enumerate(self.neighbors)]) \
            if self.num_nodes else np.zeros(0, dtype=np.int64)
        cols = np.concatenate(self.neighbors) if self.num_nodes else np.zeros(0, dtype=np.int64)
        data = np.ones(len(cols))
        return sparse.csr_matrix((data, (rows, cols)), shape=(self.num_nodes, self.num_nodes))


def load_edge_list(path) -> Graph:
    """Parse a UTF-8 edge list: one "u v" pair per line, "#" comments ignored."""
    pairs = []
    max_id = -1
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise EdgeListFormatError(f"{path}:{lineno}: expected 'u v', got {raw!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise EdgeListFormatError(f"{path}:{lineno}: non-integer node id") from exc
            if u < 0 or v < 0:
                raise EdgeListFormatError(f"{path}:{lineno}: negative node id")
            pairs.append((u, v))
            max_id = max(max_id, u, v)
    return Graph.from_edges(max_id + 1, pairs)


def load_labels(path, num_nodes: int) -> np.ndarray:
    """Parse "node_id class_id" lines into a dense per-node label array (-1 = unlabeled)."""
    labels = np.full(num_nodes, -1, dtype=np.int64)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise EdgeListFormatError(f"{path}:{lineno}: expected 'node class'")
            try:
                node, cls = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise EdgeListFormatError(f"{path}:{lineno}: non-integer field") from exc
            if not 0 <= node < num_nodes:
                raise EdgeListFormatError(f"{path}:{lineno}: node id {node} out of range")
            labels[node] = cls
    return labels


# ---------------------------------------------------------------------------
# spectral initialization
# ---------------------------------------------------------------------------

@dataclass
class SpectralInit:
    encodings: np.ndarray   # (num_nodes, K), unit-norm columns
    K: int
    eigenvalues: np.ndarray


def normalized_laplacian_topk(
    g: Graph,
    K: int,
    mode: str = "largest",
    seed: int = 0,
    dense_cutoff: int = DENSE_EIG_CUTOFF,
) -> SpectralInit:
    """Rows of the K extreme eigenvectors of L = I - D^-1/2 A D^-1/2.

    `mode` selects the largest (default) or smallest eigenvalues.  Dense
    symmetric eigendecomposition up to `dense_cutoff` nodes, seeded block
    power iteration above.  Sign convention: first entry of each
    eigenvector with magnitude above 1e-12 is positive.  Isolated nodes get
    zero rows; columns are renormalized to unit length afterwards.
    """
    n = g.num_nodes
    if not 1 <= K <= n:
        raise ValueError(f"K must be in [1, {n}], got {K}")
    if mode not in ("largest", "smallest"):
        raise ValueError(f"eigen mode must be 'largest' or 'smallest', got {mode!r}")
    deg = np.array([g.degree(u) for u in range(n)], dtype=np.float64)
    isolated = deg == 0
    dinv = np.zeros(n)
    dinv[~isolated] = 1.0 / np.sqrt(deg[~isolated])

    if n <= dense_cutoff:
        adj = g.adjacency().toarray()
        lap = np.eye(n) - (dinv[:, None] * adj) * dinv[None, :]
        evals, evecs = np.linalg.eigh(lap)
        if mode == "largest":
            idx = np.argsort(evals)[::-1][:K]
        else:
            idx = np.argsort(evals)[:K]
        vals, vecs = evals[idx], evecs[:, idx]
    else:
        vals, vecs = _block_power_topk(g, dinv, K, mode, seed)

    for j in range(K):
        col = vecs[:, j]
        nz = np.nonzero(np.abs(col) > 1e-12)[0]
        if len(nz) and col[nz[0]] < 0:
            vecs[:, j] = -col
    vecs[isolated, :] = 0.0
    norms = np.linalg.norm(vecs, axis=0)
    nzcols = norms > 0
    vecs[:, nzcols] /= norms[nzcols]
    return SpectralInit(encodings=vecs, K=K, eigenvalues=vals)


def _block_power_topk(g: Graph, dinv: np.ndarray, K: int, mode: str, seed: int,
                      tol: float = 1e-8, max_iters: int = 5000):
    """Seeded orthogonal iteration for the K extreme Laplacian eigenpairs.

    Iterates on L for the largest eigenvalues, on 2I - L for the smallest
    (the normalized Laplacian spectrum lies in [0, 2]).
    """
    n = g.num_nodes
    adj = g.adjacency()
    dinv_mat = sparse.diags(dinv)
    lap = sparse.identity(n, format="csr") - dinv_mat @ adj @ dinv_mat

    def op(x):
        return lap @ x if mode == "largest" else 2.0 * x - lap @ x

    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((n, K)))
    prev = None
    for _ in range(max_iters):
        q, _ = np.linalg.qr(op(q))
        ritz = np.sort(np.linalg.eigvalsh(q.T @ op(q)))
        if prev is not None and np.max(np.abs(ritz - prev)) < tol:
            break
        prev = ritz
    t = q.T @ op(q)
    tv, tw = np.linalg.eigh(t)
    order = np.argsort(tv)[::-1]
    vecs = q @ tw[:, order]
    vals = tv[order]
    if mode == "smallest":
        vals = 2.0 - vals
    return vals, vecs


# ---------------------------------------------------------------------------
# substructure sampling
# ---------------------------------------------------------------------------

@dataclass
class Substructure:
    """A sampled tree (rooted, leveled) or ring through an anchor node."""

    kind: str                       # "tree" | "cycle"
    nodes: list[int]                # tree: BFS order; cycle: ring order
    edges: list[tuple[int, int]]    # tree: (parent, child); cycle: ring edges
    anchor: int
    levels: list[int] | None = None
    degenerate: bool = False


def sample_trees(
    g: Graph,
    anchors,
    depth: int = 2,
    branch_cap: int = 5,
    samples_per_anchor: int = 3,
    seed: int = 0,
) -> list[Substructure]:
    """Rooted BFS trees with child sets subsampled to `branch_cap`."""
    if depth < 1 or branch_cap < 1:
        raise ValueError("depth and branch_cap must be >= 1")
    out = []
    for anchor in anchors:
        anchor = int(anchor)
        for i in range(samples_per_anchor):
            rng = np.random.default_rng([seed, anchor, i])
            out.append(_bfs_tree(g, anchor, depth, branch_cap, rng))
    return out


def _bfs_tree(g: Graph, anchor: int, depth: int, cap: int, rng) -> Substructure:
    nodes = [anchor]
    levels = [0]
    edges: list[tuple[int, int]] = []
    in_tree = {anchor}
    frontier = [anchor]
    for lvl in range(1, depth + 1):
        nxt = []
        for u in frontier:
            cand = [int(v) for v in g.neighbors[u] if v not in in_tree]
            if not cand:
                continue
            if len(cand) > cap:
                pick = sorted(rng.choice(len(cand), size=cap, replace=False))
                cand = [cand[j] for j in pick]
            for v in cand:
                in_tree.add(v)
                nodes.append(v)
                levels.append(lvl)
                edges.append((u, v))
                nxt.append(v)
        frontier = nxt
    return Substructure("tree", nodes, edges, anchor, levels=levels)


def sample_cycles(
    g: Graph,
    anchors,
    samples_per_anchor: int = 3,
    seed: int = 0,
) -> list[Substructure]:
    """Up to `samples_per_anchor` rings of length 3 or 4 through each anchor.

    Triangles come from sorted-neighbor intersections, quadrilaterals from
    two-hop common-neighbor pairing.  Anchors on no cycle yield a flagged
    degenerate ring (anchor plus one random neighbor, or a singleton for
    isolated anchors) aggregated downstream with uniform weights.
    """
    if samples_per_anchor < 1:
        raise ValueError("samples_per_anchor must be >= 1")
    out = []
    for anchor in anchors:
        anchor = int(anchor)
        rng = np.random.default_rng([seed, anchor])
        rings = _rings_through(g, anchor)
        if rings:
            k = min(samples_per_anchor, len(rings))
            chosen = rng.choice(len(rings), size=k, replace=False)
            for j in sorted(chosen):
                ring = rings[j]
                ring_edges = list(zip(ring, ring[1:] + ring[:1]))
                out.append(Substructure("cycle", list(ring), ring_edges, anchor))
        elif g.degree(anchor) > 0:
            v = int(rng.choice(g.neighbors[anchor]))
            out.append(Substructure(
                "cycle", [anchor, v], [(anchor, v)], anchor, degenerate=True))
        else:
            out.append(Substructure("cycle", [anchor], [], anchor, degenerate=True))
    return out


def _rings_through(g: Graph, a: int) -> list[tuple[int, ...]]:
    nbrs = g.neighbors[a]
    rings: list[tuple[int, ...]] = []
    for u in nbrs:
        u = int(u)
        common = np.intersect1d(nbrs, g.neighbors[u], assume_unique=True)
        for w in common:
            w = int(w)
            if u < w:
                rings.append((a, u, w))
    seen_quads = set()
    for i, u in enumerate(nbrs):
        u = int(u)
        for w in nbrs[i + 1:]:
            w = int(w)
            mid = np.intersect1d(g.neighbors[u], g.neighbors[w], assume_unique=True)
            for y in mid:
                y = int(y)
                if y == a or y == u or y == w:
                    continue
                key = (u, w, y)
                if key not in seen_quads:
                    seen_quads.add(key)
                    rings.append((a, u, y, w))
    return rings


def validate_substructure(sub: Substructure, g: Graph) -> None:
    """Assert the structural invariants; raises AssertionError on violation."""
    assert sub.anchor in sub.nodes
    assert len(set(sub.nodes)) == len(sub.nodes)
    if sub.kind == "tree":
        assert sub.levels is not None and sub.levels[0] == 0
        assert sub.nodes[0] == sub.anchor
        assert len(sub.edges) == len(sub.nodes) - 1
        for parent, child in sub.edges:
            assert g.has_edge(parent, child)
        # acyclic and connected: each non-root has exactly one parent edge
        children = {c for _, c in sub.edges}
        assert children == set(sub.nodes[1:])
    elif sub.kind == "cycle":
        if sub.degenerate:
            assert len(sub.nodes) in (1, 2)
        else:
            assert len(sub.nodes) in (3, 4)
            for u, v in sub.edges:
                assert g.has_edge(u, v)
    else:
        raise AssertionError(f"unknown substructure kind {sub.kind!r}")
