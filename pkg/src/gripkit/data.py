"""Synthetic graphs, task constructors and on-disk dataset manifests.

Every generator is a pure function of its parameters and an ``Rng``; dataset
splits draw from sub-seeds derived by fixed offsets so their streams never
coincide.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .forward import Diffusion, EdgeDiffusion, ForwardSpec, Mask, Problem, Transport, load_problem, observe, save_problem
from .graph import Graph, apply_transition, build_graph
from .numerics import Rng, derive_seed

GENERATORS = ("sbm", "point_cloud", "er_weighted")
TASKS = ("completion", "source", "transport", "edge_recovery")
SPLITS = ("train", "val", "test")
SPLIT_OFFSETS = {"train": 101, "val": 202, "test": 303}


@dataclass
class DatasetSpec:
    generator: str = "sbm"
    task: str = "completion"
    n: int = 80
    classes: int = 6
    p_in: float = 0.5
    p_out: float = 0.05
    knn_k: int = 10
    edge_p: float = 0.05
    nb: int = 4
    k: int = 4
    pl: int = 8
    history_len: int = 4
    num_sources: int = 4
    smooth_steps: int = 4
    sigma: float = 0.0
    seed: int = 0
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"generator must be one of {GENERATORS}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        for name in ("p_in", "p_out", "edge_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.n < 1 or self.classes < 1:
            raise ValueError("n and classes must be positive")
        if self.task == "completion" and self.nb * self.classes > self.n:
            raise ValueError("nb * classes exceeds the node count")
        if self.pl < 1 or self.k < 0 or self.history_len < 1 or self.num_sources < 1:
            raise ValueError("pl, history_len, num_sources >= 1 and k >= 0 required")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.task == "edge_recovery" and self.generator != "er_weighted":
            raise ValueError("edge_recovery needs the er_weighted generator")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("split sizes must be non-negative")

    @property
    def task_kind(self) -> str:
        return "classification" if self.task in ("completion", "source") else "regression"

    def split_size(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown dataset keys: {sorted(unknown)}")
        return cls(**doc)


# --- generators ------------------------------------------------------------------

def balanced_labels(n: int, classes: int, rng: Rng) -> np.ndarray:
    return np.arange(n, dtype=np.int64)[rng.permutation(n)] % classes


def gen_sbm(n: int, classes: int, p_in: float, p_out: float, rng: Rng):
    """Stochastic block model with balanced labels and no node meta-data."""
    if p_in <= p_out:
        warnings.warn("p_in <= p_out: blocks are not assortative", stacklevel=2)
    labels = balanced_labels(n, classes, rng)
    U = rng.uniform((n, n))
    prob = np.where(labels[:, None] == labels[None, :], p_in, p_out)
    i, j = np.nonzero(np.triu(U < prob, k=1))
    return build_graph(np.stack([i, j], axis=1), n), labels


def sphere_points(n: int, rng: Rng) -> np.ndarray:
    p = rng.normal((n, 3))
    norm = np.linalg.norm(p, axis=1, keepdims=True)
    while np.any(norm < 1e-12):
        bad = norm[:, 0] < 1e-12
        p[bad] = rng.normal((int(bad.sum()), 3))
        norm = np.linalg.norm(p, axis=1, keepdims=True)
    return p / norm


def knn_edges(points: np.ndarray, k: int) -> np.ndarray:
    tree = cKDTree(points)
    _, nbr = tree.query(points, k=k + 1)
    src = np.repeat(np.arange(len(points)), k)
    dst = nbr[:, 1:].reshape(-1)
    return np.stack([src, dst], axis=1)


def gen_point_cloud(n: int, num_parts: int, knn_k: int, rng: Rng):
    """Unit-sphere samples split into azimuthal sectors, joined by a symmetric k-NN graph.

    Node meta-data is [x, y, z, nx, ny, nz]; on the sphere the normal is the point.
    """
    if not 1 <= knn_k < n:
        raise ValueError("need 1 <= knn_k < n")
    pts = sphere_points(n, rng)
    normals = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    phi = np.arctan2(pts[:, 1], pts[:, 0]) + np.pi
    labels = np.minimum((phi / (2 * np.pi) * num_parts).astype(np.int64), num_parts - 1)
    g = build_graph(knn_edges(pts, knn_k), n, node_meta=np.concatenate([pts, normals], axis=1))
    return g, labels


def distinct_positions(n: int, rng: Rng) -> np.ndarray:
    pos = rng.uniform((n, 2))
    while len(np.unique(pos, axis=0)) < n:
        _, first = np.unique(pos, axis=0, return_index=True)
        dup = np.setdiff1d(np.arange(n), first)
        pos[dup] = rng.uniform((len(dup), 2))
    return pos


def gen_er_weighted(n: int, edge_p: float, rng: Rng):
    """Erdos-Renyi graph on random planar positions; weights are inverse distances.

    Returns the weighted graph (meta = positions) and the m x 1 edge weights.
    """
    if not 0.0 < edge_p <= 1.0:
        raise ValueError("edge_p must lie in (0, 1]")
    pos = distinct_positions(n, rng)
    U = rng.uniform((n, n))
    i, j = np.nonzero(np.triu(U < edge_p, k=1))
    w = 1.0 / np.linalg.norm(pos[i] - pos[j], axis=1)
    g = build_graph(np.stack([i, j], axis=1), n, weights=w, node_meta=pos)
    return g, g.undirected_weight[:, None].copy()


def sample_paths(g: Graph, pl: int, rng: Rng) -> np.ndarray:
    """One uniform random walk of length ``pl`` from every node; isolated nodes stay put."""
    if pl < 1:
        raise ValueError("pl must be >= 1")
    paths = np.empty((g.n, pl), dtype=np.int64)
    paths[:, 0] = np.arange(g.n)
    deg = np.diff(g.row_ptr)
    for t in range(1, pl):
        cur = paths[:, t - 1]
        u = rng.uniform(g.n)
        d = deg[cur]
        step = np.minimum((u * d).astype(np.int64), np.maximum(d - 1, 0))
        nxt = g.col_idx[np.minimum(g.row_ptr[cur] + step, max(len(g.col_idx) - 1, 0))] if len(g.col_idx) else cur
        paths[:, t] = np.where(d > 0, nxt, cur)
    return paths


def smooth_field(g: Graph, steps: int, rng: Rng) -> np.ndarray:
    """Diffused white noise, standardized to unit sample std."""
    x = rng.normal((g.n, 1))
    for _ in range(steps):
        x = apply_transition(g, x)
    std = float(np.std(x))
    return x / std if std > 0 else x


def one_hot(labels, classes: int) -> np.ndarray:
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _graph_for(spec: DatasetSpec, rng: Rng):
    if spec.generator == "sbm":
        return gen_sbm(spec.n, spec.classes, spec.p_in, spec.p_out, rng)
    if spec.generator == "point_cloud":
        return gen_point_cloud(spec.n, spec.classes, spec.knn_k, rng)
    g, w = gen_er_weighted(spec.n, spec.edge_p, rng)
    return g, w


def make_problem(spec: DatasetSpec, rng: Rng) -> Problem:
    g, truth = _graph_for(spec, rng)
    if spec.task == "edge_recovery":
        # the weights are the unknown; the solver only sees the topology
        g = g.with_weights(np.ones(g.m))
        src = rng.choice(min(spec.num_sources, g.n), g.n)
        x0 = np.zeros((g.n, len(src)))
        x0[src, np.arange(len(src))] = 1.0
        fspec = ForwardSpec(EdgeDiffusion(x0, spec.history_len), "regression")
        d = observe(g, fspec, truth, spec.sigma, rng)
        return Problem(g, fspec, d, spec.sigma, truth, "edge")
    if spec.generator == "er_weighted":
        labels = balanced_labels(spec.n, spec.classes, rng)
    else:
        labels = truth
    if spec.task == "completion":
        picks = []
        for c in range(spec.classes):
            members = np.flatnonzero(labels == c)
            if len(members) < spec.nb:
                raise ValueError(f"class {c} has {len(members)} nodes, fewer than nb={spec.nb}")
            picks.append(members[rng.choice(spec.nb, len(members))])
        fspec = ForwardSpec(Mask(np.sort(np.concatenate(picks))), "classification")
        x = one_hot(labels, spec.classes)
    elif spec.task == "source":
        fspec = ForwardSpec(Diffusion(spec.k), "classification")
        x = one_hot(labels, spec.classes)
    else:
        x = smooth_field(g, spec.smooth_steps, rng)
        fspec = ForwardSpec(Transport(sample_paths(g, spec.pl, rng), average=True), "regression")
    d = observe(g, fspec, x, spec.sigma, rng)
    return Problem(g, fspec, d, spec.sigma, x)


# --- datasets --------------------------------------------------------------------

def split_seed(spec: DatasetSpec, split: str) -> int:
    return derive_seed(spec.seed, SPLIT_OFFSETS[split])


def make_split(spec: DatasetSpec, split: str) -> list:
    base = split_seed(spec, split)
    return [make_problem(spec, Rng(derive_seed(base, i))) for i in range(spec.split_size(split))]


def make_dataset(spec: DatasetSpec) -> dict:
    return {s: make_split(spec, s) for s in SPLITS}


def write_dataset(spec: DatasetSpec, directory, dataset: dict = None) -> dict:
    """Write every problem under directory/<split>/<index>/ plus index.json."""
    root = Path(directory)
    dataset = dataset if dataset is not None else make_dataset(spec)
    index = {"spec": asdict(spec), "splits": {}}
    for split, problems in dataset.items():
        names = []
        for i, p in enumerate(problems):
            name = f"{split}/{i:05d}"
            save_problem(p, root / name)
            names.append(name)
        index["splits"][split] = names
    tmp = root / "index.json.tmp"
    tmp.write_text(json.dumps(index, indent=1) + "\n", encoding="utf-8")
    tmp.replace(root / "index.json")
    return dataset


def read_dataset(directory) -> tuple:
    root = Path(directory)
    if not (root / "index.json").exists():
        raise FileNotFoundError(f"{root} has no index.json")
    index = json.loads((root / "index.json").read_text(encoding="utf-8"))
    spec = DatasetSpec.from_dict(index["spec"])
    data = {s: [load_problem(root / name) for name in names] for s, names in index["splits"].items()}
    return spec, data
