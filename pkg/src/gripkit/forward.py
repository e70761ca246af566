"""Forward operators of graph inverse problems and the measurement model.

Four operators are supported:

* ``Mask``: row selection (property completion),
* ``Diffusion``: k steps of the random-walk transition P (source estimation),
* ``Transport``: averages (or sums) of node states along given paths,
* ``EdgeDiffusion``: the history of a known source diffused by a transition
  matrix whose weights are the unknown edge states. This one is nonlinear
  and is differentiated through the tape instead of a hand-written adjoint.

``forward`` / ``adjoint`` accept plain arrays; ``forward_t`` / ``adjoint_t``
do the same on tape tensors so learned solvers can back-propagate through
the data-fit term.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .graph import Graph, apply_transition, apply_transition_adjoint, disjoint_union, permute_graph, read_graph, write_graph
from .numerics import LinearOperator, Rng

EDGE_WEIGHT_FLOOR = 1e-6
TASK_KINDS = ("classification", "regression")


@dataclass(frozen=True, eq=False)
class Mask:
    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).ravel()
        if len(idx) > 1 and np.any(np.diff(idx) <= 0):
            raise ValueError("mask indices must be strictly increasing")
        object.__setattr__(self, "indices", idx)


@dataclass(frozen=True)
class Diffusion:
    k: int

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("diffusion steps must be non-negative")


@dataclass(frozen=True, eq=False)
class Transport:
    paths: np.ndarray
    average: bool = True

    def __post_init__(self):
        paths = np.asarray(self.paths, dtype=np.int64)
        if paths.ndim != 2 or paths.shape[1] < 1:
            raise ValueError("paths must be a K x L index matrix with L >= 1")
        object.__setattr__(self, "paths", paths)


@dataclass(frozen=True, eq=False)
class EdgeDiffusion:
    x0: np.ndarray
    history_len: int = 1

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=np.float64)
        if x0.ndim == 1:
            x0 = x0[:, None]
        if not np.all(np.isfinite(x0)):
            raise ValueError("known source must be finite")
        if self.history_len < 1:
            raise ValueError("history length must be at least 1")
        object.__setattr__(self, "x0", x0)


Variant = Union[Mask, Diffusion, Transport, EdgeDiffusion]


@dataclass(frozen=True)
class ForwardSpec:
    variant: Variant
    task_kind: str = "regression"

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"task_kind must be one of {TASK_KINDS}")

    @property
    def name(self) -> str:
        return type(self.variant).__name__.lower()

    @property
    def is_linear(self) -> bool:
        return not isinstance(self.variant, EdgeDiffusion)

    def validate(self, g: Graph) -> None:
        v = self.variant
        if isinstance(v, Mask):
            if len(v.indices) and (v.indices[0] < 0 or v.indices[-1] >= g.n):
                raise IndexError("mask index out of range")
        elif isinstance(v, Transport):
            p = v.paths
            if p.size and (p.min() < 0 or p.max() >= g.n):
                raise IndexError("path references an invalid node")
            A = g.adjacency
            a, b = p[:, :-1].ravel(), p[:, 1:].ravel()
            step_ok = (a == b) & g.isolated[a] if len(a) else np.zeros(0, bool)
            linked = np.asarray(A[a, b]).ravel() != 0 if len(a) else np.zeros(0, bool)
            if not np.all(linked | step_ok):
                raise ValueError("consecutive path entries must be graph neighbours")
        elif isinstance(v, EdgeDiffusion):
            if v.x0.shape[0] != g.n:
                raise ValueError("known source must have one row per node")


# --- linear operators ----------------------------------------------------

def mask_forward(x, indices) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) and (indices.min() < 0 or indices.max() >= x.shape[0]):
        raise IndexError("mask index out of range")
    return x[indices]


def mask_adjoint(d, indices, n: int) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) and (indices.min() < 0 or indices.max() >= n):
        raise IndexError("mask index out of range")
    out = np.zeros((n,) + d.shape[1:])
    out[indices] = d
    return out


def diffusion_forward(g: Graph, x0, k: int) -> np.ndarray:
    x = np.asarray(x0, dtype=np.float64)
    squeeze = x.ndim == 1
    for _ in range(k):
        x = apply_transition(g, x)
    if k == 0:
        x = np.array(x, dtype=np.float64)
    return x[:, 0] if squeeze and x.ndim == 2 else x


def diffusion_adjoint(g: Graph, d, k: int) -> np.ndarray:
    y = np.asarray(d, dtype=np.float64)
    squeeze = y.ndim == 1
    for _ in range(k):
        y = apply_transition_adjoint(g, y)
    if k == 0:
        y = np.array(y, dtype=np.float64)
    return y[:, 0] if squeeze and y.ndim == 2 else y


def _path_scale(paths, average: bool) -> float:
    return 1.0 / paths.shape[1] if average else 1.0


def transport_forward(g: Graph, x, paths, average: bool = True) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    paths = np.asarray(paths, dtype=np.int64)
    if paths.size and (paths.min() < 0 or paths.max() >= x.shape[0]):
        raise IndexError("path references an invalid node")
    return x[paths].sum(axis=1) * _path_scale(paths, average)


def transport_adjoint(d, paths, n: int, average: bool = True) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    paths = np.asarray(paths, dtype=np.int64)
    K, L = paths.shape
    out = np.zeros((n,) + d.shape[1:])
    np.add.at(out, paths.ravel(), np.repeat(d, L, axis=0))
    return out * _path_scale(paths, average)


# --- nonlinear edge diffusion ----------------------------------------------

def edge_diffusion_forward(g: Graph, x_edge, x0, history_len: int):
    """Stacked history [x1; ...; xH] with x(k+1) = P(x_edge) x(k).

    Works on arrays, or on tape tensors when ``x_edge`` is a ``Tensor``.
    """
    taped = isinstance(x_edge, ad.Tensor)
    xe = ad.value_of(x_edge).reshape(-1)
    if xe.shape[0] != g.m:
        raise ValueError(f"expected {g.m} edge states, got {xe.shape[0]}")
    if not np.all(np.isfinite(xe)):
        raise ValueError("edge states must be finite")
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 1:
        x0 = x0[:, None]
    w = ad.clamp_min(x_edge if taped else ad.Tensor(xe), EDGE_WEIGHT_FLOOR)
    x = ad.Tensor(x0)
    history = []
    for _ in range(history_len):
        x = ad.edge_transition(g, w, x)
        history.append(x)
    out = ad.concat_rows(history)
    return out if taped else out.value


# --- dispatch ----------------------------------------------------------------

def output_rows(g: Graph, spec: ForwardSpec) -> int:
    v = spec.variant
    if isinstance(v, Mask):
        return len(v.indices)
    if isinstance(v, Diffusion):
        return g.n
    if isinstance(v, Transport):
        return v.paths.shape[0]
    return v.history_len * g.n


def forward(g: Graph, spec: ForwardSpec, x):
    v = spec.variant
    if isinstance(v, Mask):
        return mask_forward(x, v.indices)
    if isinstance(v, Diffusion):
        return diffusion_forward(g, x, v.k)
    if isinstance(v, Transport):
        return transport_forward(g, x, v.paths, v.average)
    return edge_diffusion_forward(g, x, v.x0, v.history_len)


def adjoint(g: Graph, spec: ForwardSpec, d):
    v = spec.variant
    if isinstance(v, Mask):
        return mask_adjoint(d, v.indices, g.n)
    if isinstance(v, Diffusion):
        return diffusion_adjoint(g, d, v.k)
    if isinstance(v, Transport):
        return transport_adjoint(d, v.paths, g.n, v.average)
    raise TypeError("edge diffusion is nonlinear; differentiate it through the tape")


def linear_operator(g: Graph, spec: ForwardSpec, channels: int = 1) -> LinearOperator:
    if not spec.is_linear:
        raise TypeError("edge diffusion has no fixed linear operator")
    return LinearOperator(lambda x: forward(g, spec, x), lambda d: adjoint(g, spec, d),
                          (g.n, channels), (output_rows(g, spec), channels))


def forward_t(g: Graph, spec: ForwardSpec, x):
    """Forward operator on tape tensors."""
    if spec.is_linear:
        return ad.linear_map(lambda v: forward(g, spec, v), lambda d: adjoint(g, spec, d), x)
    return forward(g, spec, ad.as_tensor(x))


def adjoint_t(g: Graph, spec: ForwardSpec, d):
    return ad.linear_map(lambda v: adjoint(g, spec, v), lambda x: forward(g, spec, x), d)


def data_graph_index(spec: ForwardSpec, node_graph: np.ndarray) -> np.ndarray:
    """Graph id of every data row, given the graph id of every node."""
    v = spec.variant
    if isinstance(v, Mask):
        return node_graph[v.indices]
    if isinstance(v, Diffusion):
        return node_graph.copy()
    if isinstance(v, Transport):
        return node_graph[v.paths[:, 0]]
    return np.tile(node_graph, v.history_len)


# --- problems ------------------------------------------------------------------

@dataclass(eq=False)
class Problem:
    graph: Graph
    spec: ForwardSpec
    d_obs: np.ndarray
    sigma: float
    x_true: Optional[np.ndarray] = None
    target: str = "node"
    node_graph: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.d_obs = np.asarray(self.d_obs, dtype=np.float64)
        if self.d_obs.ndim == 1:
            self.d_obs = self.d_obs[:, None]
        if self.x_true is not None:
            self.x_true = np.asarray(self.x_true, dtype=np.float64)
            if self.x_true.ndim == 1:
                self.x_true = self.x_true[:, None]
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.target not in ("node", "edge"):
            raise ValueError("target must be 'node' or 'edge'")
        if self.d_obs.shape[0] != output_rows(self.graph, self.spec):
            raise ValueError("d_obs shape does not match the forward operator")
        if self.node_graph is None:
            self.node_graph = np.zeros(self.graph.n, dtype=np.int64)
        self.spec.validate(self.graph)

    @property
    def task_kind(self) -> str:
        return self.spec.task_kind

    @property
    def num_graphs(self) -> int:
        return int(self.node_graph.max()) + 1 if self.graph.n else 1

    @property
    def state_shape(self) -> tuple:
        if self.target == "edge":
            return (self.graph.m, 1)
        if self.x_true is not None:
            return (self.graph.n, self.x_true.shape[1])
        if self.spec.is_linear:
            return (self.graph.n, self.d_obs.shape[1])
        raise ValueError("cannot infer the state shape")

    @property
    def data_graph(self) -> np.ndarray:
        return data_graph_index(self.spec, self.node_graph)

    @property
    def state_graph(self) -> np.ndarray:
        if self.target == "edge":
            return self.node_graph[self.graph.edges[:, 0]]
        return self.node_graph

    def forward(self, x):
        return forward(self.graph, self.spec, x)

    def adjoint(self, d):
        return adjoint(self.graph, self.spec, d)


def observe(g: Graph, spec: ForwardSpec, x_true, sigma: float, rng: Rng) -> np.ndarray:
    """d = F(x) + sigma * N(0, I)."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    clean = np.asarray(forward(g, spec, x_true), dtype=np.float64)
    if clean.ndim == 1:
        clean = clean[:, None]
    if sigma == 0:
        return clean
    return clean + rng.normal(clean.shape, sigma)


def batch_problems(problems) -> tuple:
    """Disjoint union of problems sharing a forward variant type and task.

    Returns the batched problem and the node offsets of its members.
    """
    first = problems[0]
    kinds = {type(p.spec.variant) for p in problems}
    if len(kinds) != 1 or len({p.spec.task_kind for p in problems}) != 1:
        raise ValueError("batched problems must share the forward variant and task kind")
    g, offsets = disjoint_union([p.graph for p in problems])
    node_graph = np.concatenate([np.full(p.graph.n, i, dtype=np.int64) for i, p in enumerate(problems)])
    v0 = first.spec.variant
    if isinstance(v0, Mask):
        variant = Mask(np.concatenate([p.spec.variant.indices + off for p, off in zip(problems, offsets)]))
        d = np.concatenate([p.d_obs for p in problems])
    elif isinstance(v0, Diffusion):
        if len({p.spec.variant.k for p in problems}) != 1:
            raise ValueError("batched diffusion problems must share k")
        variant = v0
        d = np.concatenate([p.d_obs for p in problems])
    elif isinstance(v0, Transport):
        if len({(p.spec.variant.paths.shape[1], p.spec.variant.average) for p in problems}) != 1:
            raise ValueError("batched transport problems must share path length and convention")
        variant = Transport(np.concatenate([p.spec.variant.paths + off for p, off in zip(problems, offsets)]),
                            v0.average)
        d = np.concatenate([p.d_obs for p in problems])
    else:
        H = v0.history_len
        if len({p.spec.variant.history_len for p in problems}) != 1:
            raise ValueError("batched edge problems must share the history length")
        variant = EdgeDiffusion(np.concatenate([p.spec.variant.x0 for p in problems]), H)
        # history blocks are stacked per step, so interleave members step by step
        blocks = []
        for h in range(H):
            for p in problems:
                n = p.graph.n
                blocks.append(p.d_obs[h * n:(h + 1) * n])
        d = np.concatenate(blocks)
    xs = [p.x_true for p in problems]
    x_true = None if any(x is None for x in xs) else np.concatenate(xs)
    sigma = max(p.sigma for p in problems)
    batched = Problem(g, ForwardSpec(variant, first.spec.task_kind), d, sigma, x_true, first.target, node_graph)
    return batched, offsets


def permute_problem(p: Problem, perm) -> Problem:
    """Relabel node i as perm[i] (paths and data rows follow the relabelling)."""
    perm = np.asarray(perm, dtype=np.int64)
    n = p.graph.n
    g = permute_graph(p.graph, perm)
    v = p.spec.variant
    inv = np.empty(n, dtype=np.int64)
    inv[perm] = np.arange(n)

    def move_nodes(a):
        out = np.empty_like(a)
        out[perm] = a
        return out

    d = p.d_obs
    if isinstance(v, Mask):
        new_idx = perm[v.indices]
        order = np.argsort(new_idx)
        variant, d = Mask(new_idx[order]), d[order]
    elif isinstance(v, Diffusion):
        variant, d = v, move_nodes(d)
    elif isinstance(v, Transport):
        # path k starts wherever it starts; reorder paths by their new start node
        new_paths = perm[v.paths]
        order = np.argsort(new_paths[:, 0], kind="stable")
        variant, d = Transport(new_paths[order], v.average), d[order]
    else:
        H = v.history_len
        variant = EdgeDiffusion(move_nodes(v.x0), H)
        d = np.concatenate([move_nodes(d[h * n:(h + 1) * n]) for h in range(H)])
    x = p.x_true
    if x is not None:
        if p.target == "node":
            x = move_nodes(x)
        else:
            x = _edge_values_after_permute(p.graph, g, perm, x)
    return Problem(g, ForwardSpec(variant, p.spec.task_kind), d, p.sigma, x, p.target)


def _edge_values_after_permute(old: Graph, new: Graph, perm, values):
    old_e = perm[old.edges]
    key_old = np.minimum(old_e[:, 0], old_e[:, 1]) * old.n + np.maximum(old_e[:, 0], old_e[:, 1])
    key_new = new.edges[:, 0] * new.n + new.edges[:, 1]
    lookup = dict(zip(key_old.tolist(), range(len(key_old))))
    return values[[lookup[k] for k in key_new.tolist()]]


def edge_permutation(old: Graph, new: Graph, perm) -> np.ndarray:
    """Index array q with new_edge_values = old_edge_values[q]."""
    return _edge_values_after_permute(old, new, perm, np.arange(old.m))


# --- serialization -----------------------------------------------------------
# Matrix files: 8-byte magic, uint64 ndim, uint64 dims, float64 payload, all little-endian.

MATRIX_MAGIC = b"GRIPMAT1"


def write_matrix(path, a) -> None:
    a = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
    header = MATRIX_MAGIC + np.array([a.ndim, *a.shape], dtype="<u8").tobytes()
    Path(path).write_bytes(header + a.tobytes())


def read_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != MATRIX_MAGIC:
        raise ValueError(f"{path}: not a matrix file")
    ndim = int(np.frombuffer(raw, dtype="<u8", count=1, offset=8)[0])
    shape = tuple(int(s) for s in np.frombuffer(raw, dtype="<u8", count=ndim, offset=16))
    data = np.frombuffer(raw, dtype="<f8", offset=16 + 8 * ndim)
    return data.reshape(shape).astype(np.float64)


def spec_to_dict(spec: ForwardSpec) -> dict:
    v = spec.variant
    out = {"variant": spec.name, "task_kind": spec.task_kind}
    if isinstance(v, Mask):
        out["indices"] = v.indices.tolist()
    elif isinstance(v, Diffusion):
        out["k"] = v.k
    elif isinstance(v, Transport):
        out["paths"] = v.paths.tolist()
        out["average"] = v.average
    else:
        out["history_len"] = v.history_len
        out["x0"] = "x0.bin"
    return out


def spec_from_dict(doc: dict, directory=None) -> ForwardSpec:
    kind = doc["variant"]
    if kind == "mask":
        v = Mask(np.asarray(doc["indices"], dtype=np.int64))
    elif kind == "diffusion":
        v = Diffusion(int(doc["k"]))
    elif kind == "transport":
        v = Transport(np.asarray(doc["paths"], dtype=np.int64).reshape(-1, len(doc["paths"][0])),
                      bool(doc.get("average", True)))
    elif kind == "edgediffusion":
        v = EdgeDiffusion(read_matrix(Path(directory) / doc["x0"]), int(doc["history_len"]))
    else:
        raise ValueError(f"unknown forward variant {kind!r}")
    return ForwardSpec(v, doc["task_kind"])


def save_problem(p: Problem, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_graph(p.graph, d / "graph.txt")
    doc = spec_to_dict(p.spec)
    doc.update({"sigma": p.sigma, "target": p.target, "has_truth": p.x_true is not None})
    (d / "spec.json").write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    if isinstance(p.spec.variant, EdgeDiffusion):
        write_matrix(d / "x0.bin", p.spec.variant.x0)
    write_matrix(d / "d_obs.bin", p.d_obs)
    if p.x_true is not None:
        write_matrix(d / "x_true.bin", p.x_true)


def load_problem(directory) -> Problem:
    d = Path(directory)
    if not (d / "spec.json").exists():
        raise FileNotFoundError(f"{d} is not a problem directory")
    doc = json.loads((d / "spec.json").read_text(encoding="utf-8"))
    g = read_graph(d / "graph.txt")
    spec = spec_from_dict(doc, d)
    x = read_matrix(d / "x_true.bin") if doc.get("has_truth") else None
    return Problem(g, spec, read_matrix(d / "d_obs.bin"), float(doc["sigma"]), x, doc["target"])
