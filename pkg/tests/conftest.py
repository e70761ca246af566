import numpy as np
import pytest
from hypothesis import strategies as st

from gripkit.forward import Diffusion, EdgeDiffusion, ForwardSpec, Mask, Problem, Transport, forward
from gripkit.graph import build_graph
from gripkit.data import sample_paths
from gripkit.numerics import Rng


def random_graph(n, p, seed, weighted=False, meta_width=0):
    rng = np.random.default_rng(seed)
    U = rng.random((n, n))
    i, j = np.nonzero(np.triu(U < p, k=1))
    w = rng.uniform(0.5, 2.0, len(i)) if weighted else None
    meta = rng.standard_normal((n, meta_width)) if meta_width else None
    return build_graph(np.stack([i, j], axis=1), n, w, meta)


def ring_graph(n, chords=(), meta_width=0, seed=0):
    edges = [(i, (i + 1) % n) for i in range(n)] + list(chords)
    meta = np.random.default_rng(seed).standard_normal((n, meta_width)) if meta_width else None
    return build_graph(edges, n, node_meta=meta)


@st.composite
def graphs(draw, min_n=2, max_n=16, weighted=True):
    n = draw(st.integers(min_n, max_n))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    chosen = draw(st.lists(st.sampled_from(pairs), max_size=3 * n, unique=True)) if pairs else []
    w = draw(st.lists(st.floats(0.1, 5.0), min_size=len(chosen), max_size=len(chosen))) if weighted else None
    return build_graph(chosen, n, w)


def make_problem(kind, g, channels=2, seed=0, task="regression", sigma=0.0):
    """Small problem of a given forward kind with a random truth."""
    rng = np.random.default_rng(seed)
    n = g.n
    if kind == "mask":
        idx = np.sort(rng.choice(n, max(1, n // 3), replace=False))
        spec = ForwardSpec(Mask(idx), task)
    elif kind == "diffusion":
        spec = ForwardSpec(Diffusion(2), task)
    elif kind == "transport":
        spec = ForwardSpec(Transport(sample_paths(g, 3, Rng(seed))), task)
    else:
        x0 = np.zeros((n, 2))
        x0[rng.choice(n, 2, replace=False), [0, 1]] = 1.0
        spec = ForwardSpec(EdgeDiffusion(x0, 2), "regression")
        w = rng.uniform(0.5, 2.0, (g.m, 1))
        return Problem(g, spec, forward(g, spec, w), 0.0, w, "edge")
    if task == "classification":
        x = np.eye(channels)[rng.integers(0, channels, n)]
    else:
        x = rng.standard_normal((n, channels))
    return Problem(g, spec, forward(g, spec, x), sigma, x)


@pytest.fixture
def ring12():
    return ring_graph(12, chords=[(0, 5), (2, 8), (3, 10)], meta_width=2)
