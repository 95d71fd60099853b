"""k-nearest-neighbor graph construction and Leiden community detection.

Self-contained Leiden (fast local moves, randomized refinement within
communities, aggregation on the refined partition) over the resolution-scaled
configuration-null quality function. The refinement stage omits the
well-connectedness filter; at the graph sizes used here the partitions it
returns match the reference behavior (disconnected components never merge,
low resolutions coalesce components).
"""
from __future__ import annotations

from collections import deque

import numpy as np
import scipy.sparse as sp
from sklearn.neighbors import kneighbors_graph

from ..core import DimensionError


class _Graph:
    """Symmetric weighted graph in CSR arrays plus per-node internal weight."""

    def __init__(self, indptr, indices, weights, self_weight):
        self.indptr = indptr
        self.indices = indices
        self.weights = weights
        self.self_weight = self_weight
        self.n = len(indptr) - 1
        # A node's strength counts each self-loop twice, matching the
        # configuration-null convention.
        rows = np.repeat(np.arange(self.n), np.diff(indptr))
        row_sum = np.bincount(rows, weights=weights, minlength=self.n)
        self.strength = row_sum + 2.0 * self_weight
        self.total = float(self.strength.sum() / 2.0)

    @classmethod
    def from_sparse(cls, adjacency: sp.spmatrix) -> "_Graph":
        adj = sp.csr_matrix(adjacency, dtype=np.float64)
        adj = adj.maximum(adj.T)
        self_weight = adj.diagonal() / 2.0
        adj.setdiag(0.0)
        adj.eliminate_zeros()
        return cls(adj.indptr.copy(), adj.indices.copy(), adj.data.copy(), self_weight)

    def neighbors(self, v: int):
        lo, hi = self.indptr[v], self.indptr[v + 1]
        return self.indices[lo:hi], self.weights[lo:hi]


def _local_move(g: _Graph, labels: np.ndarray, gamma: float,
                rng: np.random.Generator) -> bool:
    """Queue-based greedy moves; returns whether anything moved."""
    two_m = 2.0 * g.total
    if two_m <= 0:
        return False
    comm_strength = np.zeros(g.n)
    np.add.at(comm_strength, labels, g.strength)
    free = [c for c in range(g.n) if comm_strength[c] == 0.0]

    order = rng.permutation(g.n)
    queue = deque(order)
    queued = np.ones(g.n, dtype=bool)
    moved_any = False
    while queue:
        v = queue.popleft()
        queued[v] = False
        nbrs, wts = g.neighbors(v)
        comm_w: dict[int, float] = {}
        for u, w in zip(nbrs.tolist(), wts.tolist()):
            c = labels[u]
            comm_w[c] = comm_w.get(c, 0.0) + w
        cur = labels[v]
        k_v = g.strength[v]
        comm_strength[cur] -= k_v
        best, best_gain = cur, comm_w.get(cur, 0.0) - gamma * k_v * comm_strength[cur] / two_m
        for c, w in comm_w.items():
            if c == cur:
                continue
            gain = w - gamma * k_v * comm_strength[c] / two_m
            if gain > best_gain + 1e-12:
                best, best_gain = c, gain
        if best_gain < -1e-12 and free:
            best = free[-1]
        if best != cur:
            if comm_strength[cur] == 0.0:
                free.append(cur)
            if comm_strength[best] == 0.0 and free and free[-1] == best:
                free.pop()
            labels[v] = best
            moved_any = True
            for u in nbrs.tolist():
                if labels[u] != best and not queued[u]:
                    queue.append(u)
                    queued[u] = True
        comm_strength[labels[v]] += k_v
    return moved_any


def _refine(g: _Graph, partition: np.ndarray, gamma: float, theta: float,
            rng: np.random.Generator) -> np.ndarray:
    """Singleton start; isolated nodes merge randomly (gain-weighted) into
    refined communities inside their own partition community."""
    two_m = 2.0 * g.total
    labels = np.arange(g.n)
    comm_strength = g.strength.copy()
    comm_size = np.ones(g.n, dtype=int)
    for v in rng.permutation(g.n):
        if comm_size[labels[v]] > 1:
            continue
        nbrs, wts = g.neighbors(v)
        comm_w: dict[int, float] = {}
        for u, w in zip(nbrs.tolist(), wts.tolist()):
            if partition[u] != partition[v]:
                continue
            c = labels[u]
            if c != labels[v]:
                comm_w[c] = comm_w.get(c, 0.0) + w
        if not comm_w:
            continue
        k_v = g.strength[v]
        cands, gains = [], []
        for c, w in comm_w.items():
            gain = w - gamma * k_v * comm_strength[c] / two_m
            if gain >= 0.0:
                cands.append(c)
                gains.append(gain)
        if not cands:
            continue
        logits = np.asarray(gains) / max(theta, 1e-12)
        p = np.exp(logits - logits.max())
        p /= p.sum()
        target = cands[int(rng.choice(len(cands), p=p))]
        old = labels[v]
        comm_strength[target] += k_v
        comm_strength[old] -= k_v
        comm_size[target] += 1
        comm_size[old] -= 1
        labels[v] = target
    return labels


def _aggregate(g: _Graph, refined: np.ndarray) -> tuple[_Graph, np.ndarray]:
    """Collapse refined communities into nodes; returns (graph, node map)."""
    comms, node_of = np.unique(refined, return_inverse=True)
    nc = len(comms)
    self_weight = np.zeros(nc)
    np.add.at(self_weight, node_of, g.self_weight)
    edge_w: dict[tuple[int, int], float] = {}
    for v in range(g.n):
        cv = node_of[v]
        lo, hi = g.indptr[v], g.indptr[v + 1]
        for u, w in zip(g.indices[lo:hi].tolist(), g.weights[lo:hi].tolist()):
            if u <= v:
                continue
            cu = node_of[u]
            if cu == cv:
                self_weight[cv] += w
            else:
                key = (min(cv, cu), max(cv, cu))
                edge_w[key] = edge_w.get(key, 0.0) + w
    rows, cols, vals = [], [], []
    for (a, b), w in edge_w.items():
        rows += [a, b]
        cols += [b, a]
        vals += [w, w]
    adj = sp.csr_matrix((vals, (rows, cols)), shape=(nc, nc))
    graph = _Graph(adj.indptr.copy(), adj.indices.copy(), adj.data.copy(), self_weight)
    return graph, node_of


def leiden_communities(adjacency: sp.spmatrix, resolution: float = 1.0,
                       seed: int = 0, theta: float = 0.01,
                       max_levels: int = 100) -> np.ndarray:
    """Community labels (consecutive ints) for a symmetric adjacency matrix."""
    rng = np.random.default_rng(seed)
    g = _Graph.from_sparse(adjacency)
    if g.n == 0:
        return np.zeros(0, dtype=int)
    n_original = g.n
    node_map = np.arange(n_original)
    labels = np.arange(g.n)

    for _ in range(max_levels):
        _local_move(g, labels, resolution, rng)
        _, labels = np.unique(labels, return_inverse=True)
        if labels.max() + 1 == g.n:
            break
        refined = _refine(g, labels, resolution, theta, rng)
        agg, node_of = _aggregate(g, refined)
        # Aggregate nodes inherit the unrefined partition as their start.
        agg_labels = np.zeros(agg.n, dtype=int)
        agg_labels[node_of] = labels
        node_map = node_of[node_map]
        if agg.n == g.n:
            g, labels = agg, agg_labels
            break
        g, labels = agg, agg_labels

    _, final = np.unique(labels[node_map], return_inverse=True)
    return final


def knn_graph(embeddings: np.ndarray, k_neighbors: int) -> sp.csr_matrix:
    """Symmetrized Euclidean k-nearest-neighbor connectivity graph."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2:
        raise DimensionError("embeddings must be 2-d (cells x features)")
    if emb.shape[0] < k_neighbors + 1:
        raise DimensionError(
            f"need at least k_neighbors + 1 = {k_neighbors + 1} rows, got {emb.shape[0]}"
        )
    adj = kneighbors_graph(emb, n_neighbors=k_neighbors, mode="connectivity",
                           include_self=False)
    return sp.csr_matrix(adj.maximum(adj.T))


def cluster_labels(embeddings: np.ndarray, k_neighbors: int = 15,
                   resolution: float = 1.0, seed: int = 0) -> np.ndarray:
    """Leiden communities of the kNN graph of the embedding rows."""
    return leiden_communities(knn_graph(embeddings, k_neighbors),
                              resolution=resolution, seed=seed)
