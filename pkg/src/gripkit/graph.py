"""Immutable sparse undirected graphs and matrix-free graph operators.

Every operator honours edge weights: A is the weighted adjacency, D the
weighted degree, P = D^-1 A the random-walk transition and L = D - A the
combinatorial Laplacian. Rows of P that belong to isolated nodes are
identity rows, so P stays row-stochastic on any graph.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import scipy.sparse as sp

from .numerics import ConvergenceError, LinearOperator, cg_solve


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    n: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    edge_weight: np.ndarray
    node_meta: Optional[np.ndarray] = None
    component_label: np.ndarray = field(default=None)

    @property
    def num_directed(self) -> int:
        return int(self.col_idx.shape[0])

    @property
    def m(self) -> int:
        """Number of undirected edges."""
        return self.num_directed // 2

    @property
    def meta_width(self) -> int:
        return 0 if self.node_meta is None else int(self.node_meta.shape[1])

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.edge_weight, self.col_idx, self.row_ptr), shape=(self.n, self.n))

    @cached_property
    def degree(self) -> np.ndarray:
        return _frozen(np.asarray(self.adjacency.sum(axis=1)).ravel())

    @cached_property
    def binary_degree(self) -> np.ndarray:
        return _frozen(np.diff(self.row_ptr).astype(np.float64))

    @cached_property
    def isolated(self) -> np.ndarray:
        return _frozen(self.degree == 0)

    @cached_property
    def row_idx(self) -> np.ndarray:
        """Source node of every directed CSR entry."""
        return _frozen(np.repeat(np.arange(self.n), np.diff(self.row_ptr)))

    @cached_property
    def edges(self) -> np.ndarray:
        """Canonical undirected edge list (i < j), ordered as in CSR."""
        keep = self.row_idx < self.col_idx
        return _frozen(np.stack([self.row_idx[keep], self.col_idx[keep]], axis=1))

    @cached_property
    def undirected_weight(self) -> np.ndarray:
        return _frozen(self.edge_weight[self.row_idx < self.col_idx].copy())

    @cached_property
    def directed_edge_id(self) -> np.ndarray:
        """Undirected edge index of every directed CSR entry."""
        ids = np.empty(self.num_directed, dtype=np.int64)
        keep = self.row_idx < self.col_idx
        ids[keep] = np.arange(int(keep.sum()))
        # reverse entry (j, i) of (i, j): look up by sorted key
        key = self.row_idx * self.n + self.col_idx
        rev = self.col_idx * self.n + self.row_idx
        pos = np.searchsorted(key, rev)
        lower = ~keep
        ids[lower] = ids[pos[lower]]
        return _frozen(ids)

    @cached_property
    def components(self) -> list:
        """Node index arrays of every connected component, by label."""
        order = np.argsort(self.component_label, kind="stable")
        counts = np.bincount(self.component_label)
        return np.split(order, np.cumsum(counts)[:-1])

    @property
    def num_components(self) -> int:
        return int(self.component_label.max()) + 1 if self.n else 0

    @cached_property
    def laplacian(self) -> sp.csr_matrix:
        return (sp.diags(self.degree) - self.adjacency).tocsr()

    @cached_property
    def transition(self) -> sp.csr_matrix:
        inv = np.where(self.isolated, 0.0, 1.0 / np.where(self.isolated, 1.0, self.degree))
        P = sp.diags(inv) @ self.adjacency + sp.diags(self.isolated.astype(np.float64))
        return P.tocsr()

    @cached_property
    def gcn_operator(self) -> sp.csr_matrix:
        """Self-loop augmented symmetric normalisation D^-1/2 (A + I) D^-1/2 (binary)."""
        A = sp.csr_matrix((np.ones(self.num_directed), self.col_idx, self.row_ptr), shape=(self.n, self.n))
        A = A + sp.identity(self.n, format="csr")
        dinv = 1.0 / np.sqrt(np.asarray(A.sum(axis=1)).ravel())
        return (sp.diags(dinv) @ A @ sp.diags(dinv)).tocsr()

    @cached_property
    def _component_laplacians(self) -> list:
        L = self.laplacian
        return [(idx, L[idx][:, idx].tocsr()) for idx in self.components if len(idx) > 1]

    def dense_adjacency(self) -> np.ndarray:
        return self.adjacency.toarray()

    def with_meta(self, node_meta) -> "Graph":
        meta = None if node_meta is None else _frozen(np.array(node_meta, dtype=np.float64).reshape(self.n, -1))
        return Graph(self.n, self.row_ptr, self.col_idx, self.edge_weight, meta, self.component_label)

    def with_weights(self, undirected_weight) -> "Graph":
        w = np.asarray(undirected_weight, dtype=np.float64)
        _check_weights(w)
        return Graph(self.n, self.row_ptr, self.col_idx, _frozen(w[self.directed_edge_id].copy()),
                     self.node_meta, self.component_label)


def _check_weights(w):
    if not np.all(np.isfinite(w)):
        raise ValueError("edge weights must be finite")
    if np.any(w < 0):
        raise ValueError("edge weights must be non-negative")


def _label_components(n, row_ptr, col_idx) -> np.ndarray:
    label = np.full(n, -1, dtype=np.int64)
    current = 0
    for start in range(n):
        if label[start] >= 0:
            continue
        label[start] = current
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in col_idx[row_ptr[u]:row_ptr[u + 1]]:
                if label[v] < 0:
                    label[v] = current
                    queue.append(v)
        current += 1
    return label


def build_graph(edges: Iterable, n: int, weights=None, node_meta=None) -> Graph:
    """Symmetric, deduplicated, sorted CSR graph from an edge list.

    Duplicate edges (in either orientation) keep the weight of their first
    occurrence; self-loops are dropped.
    """
    e = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64).reshape(-1, 2)
    w = np.ones(len(e)) if weights is None else np.asarray(weights, dtype=np.float64).ravel()
    if len(w) != len(e):
        raise ValueError("weights must match the number of edges")
    if len(e) and (e.min() < 0 or e.max() >= n):
        raise IndexError(f"edge endpoint out of range for n={n}")
    _check_weights(w)
    keep = e[:, 0] != e[:, 1]
    e, w = e[keep], w[keep]
    lo, hi = np.minimum(e[:, 0], e[:, 1]), np.maximum(e[:, 0], e[:, 1])
    _, first = np.unique(lo * n + hi, return_index=True)
    first.sort()
    lo, hi, w = lo[first], hi[first], w[first]
    src = np.concatenate([lo, hi])
    dst = np.concatenate([hi, lo])
    ww = np.concatenate([w, w])
    order = np.lexsort((dst, src))
    src, dst, ww = src[order], dst[order], ww[order]
    row_ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(row_ptr, src + 1, 1)
    row_ptr = np.cumsum(row_ptr)
    meta = None
    if node_meta is not None:
        meta = np.array(node_meta, dtype=np.float64).reshape(n, -1)
        if not np.all(np.isfinite(meta)):
            raise ValueError("node meta-data must be finite")
        meta = _frozen(meta)
    labels = _label_components(n, row_ptr, dst)
    return Graph(n, _frozen(row_ptr), _frozen(dst.astype(np.int64)), _frozen(ww), meta, _frozen(labels))


def _as_matrix(g: Graph, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != g.n:
        raise ValueError(f"expected {g.n} rows, got {X.shape[0]}")
    return X


def apply_adjacency(g: Graph, X) -> np.ndarray:
    return g.adjacency @ _as_matrix(g, X)


def apply_transition(g: Graph, X) -> np.ndarray:
    return g.transition @ _as_matrix(g, X)


def apply_transition_adjoint(g: Graph, X) -> np.ndarray:
    """P^T X = A D^-1 X, with the same identity rows for isolated nodes."""
    return g.transition.T @ _as_matrix(g, X)


def apply_laplacian(g: Graph, X) -> np.ndarray:
    X = _as_matrix(g, X)
    return g.degree[:, None] * X - g.adjacency @ X


def deflate(g: Graph, X) -> np.ndarray:
    """Remove the per-component mean from every column."""
    X = _as_matrix(g, X).copy()
    for idx in g.components:
        X[idx] -= X[idx].mean(axis=0)
    return X


def component_mean_projector(g: Graph, X) -> np.ndarray:
    """Orthogonal projection onto per-component constants (null space of L)."""
    X = _as_matrix(g, X)
    return X - deflate(g, X)


def apply_laplacian_pinv(g: Graph, R, tol: float = 1e-8, max_iter: int = 500) -> np.ndarray:
    """L^+ R via per-component conjugate gradient on mean-zero vectors."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    R = deflate(g, R)
    Y = np.zeros_like(R)
    for idx, Lc in g._component_laplacians:
        op = LinearOperator(lambda v, Lc=Lc: Lc @ v, lambda v, Lc=Lc: Lc @ v, (len(idx),), (len(idx),))
        y, res, it = cg_solve(op, R[idx], tol=tol, max_iter=max_iter)
        if res > tol:
            raise ConvergenceError("Laplacian pseudoinverse CG did not converge", res, it)
        Y[idx] = y
    return deflate(g, Y)


def line_graph_laplacian(g: Graph) -> sp.csr_matrix:
    """Laplacian over undirected edges; two edges are adjacent when they share a node."""
    E = g.edges
    m = len(E)
    B = sp.csr_matrix((np.ones(2 * m), (np.concatenate([E[:, 0], E[:, 1]]), np.tile(np.arange(m), 2))),
                      shape=(g.n, m))
    A = (B.T @ B).tolil()
    A.setdiag(0)
    A = A.tocsr()
    A.eliminate_zeros()
    deg = np.asarray(A.sum(axis=1)).ravel()
    return (sp.diags(deg) - A).tocsr()


def disjoint_union(graphs) -> tuple:
    """Block-diagonal union; returns (graph, node offsets of length len(graphs)+1)."""
    offsets = np.cumsum([0] + [g.n for g in graphs])
    row_ptr = [np.zeros(1, dtype=np.int64)]
    cols, weights, labels, metas = [], [], [], []
    nnz = 0
    comp = 0
    for g, off in zip(graphs, offsets[:-1]):
        row_ptr.append(g.row_ptr[1:] + nnz)
        nnz += g.num_directed
        cols.append(g.col_idx + off)
        weights.append(g.edge_weight)
        labels.append(g.component_label + comp)
        comp += g.num_components
        metas.append(g.node_meta)
    meta = None
    if any(m is not None for m in metas):
        if any(m is None for m in metas):
            raise ValueError("cannot union graphs with and without meta-data")
        meta = _frozen(np.concatenate(metas, axis=0))
    g = Graph(int(offsets[-1]), _frozen(np.concatenate(row_ptr)), _frozen(np.concatenate(cols)),
              _frozen(np.concatenate(weights)), meta, _frozen(np.concatenate(labels)))
    return g, offsets


def permute_graph(g: Graph, perm) -> Graph:
    """Relabel node i as perm[i]."""
    perm = np.asarray(perm)
    E = g.edges
    meta = None
    if g.node_meta is not None:
        meta = np.empty_like(g.node_meta)
        meta[perm] = g.node_meta
    return build_graph(perm[E], g.n, g.undirected_weight, meta)


def write_graph(g: Graph, path) -> None:
    """Text format: ``n m``, m lines ``i j w``, optional ``meta c`` block."""
    lines = [f"{g.n} {g.m}"]
    for (i, j), w in zip(g.edges, g.undirected_weight):
        lines.append(f"{i} {j} {float(w)!r}")
    if g.node_meta is not None:
        lines.append(f"meta {g.meta_width}")
        lines.extend(" ".join(repr(float(v)) for v in row) for row in g.node_meta)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_graph(path) -> Graph:
    tokens = Path(path).read_text(encoding="utf-8").split()
    n, m = int(tokens[0]), int(tokens[1])
    body = tokens[2:2 + 3 * m]
    if len(body) != 3 * m:
        raise ValueError("truncated edge block")
    rows = np.array(body, dtype=object).reshape(m, 3) if m else np.zeros((0, 3), dtype=object)
    edges = rows[:, :2].astype(np.int64)
    weights = rows[:, 2].astype(np.float64)
    rest = tokens[2 + 3 * m:]
    meta = None
    if rest:
        if rest[0] != "meta":
            raise ValueError(f"unexpected token {rest[0]!r} after edge block")
        c = int(rest[1])
        vals = np.array(rest[2:], dtype=np.float64)
        if vals.size != n * c:
            raise ValueError("meta-data block has wrong size")
        meta = vals.reshape(n, c)
    return build_graph(edges, n, weights, meta)
