import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gripkit import autodiff as ad
from gripkit.data import sample_paths
from gripkit.forward import (Diffusion, EdgeDiffusion, ForwardSpec, Mask, Problem, Transport, adjoint, batch_problems,
                             edge_diffusion_forward, edge_permutation, forward, linear_operator, load_problem, observe,
                             permute_problem, read_matrix, save_problem, transport_forward, write_matrix)
from gripkit.numerics import Rng, adjoint_mismatch

from conftest import graphs, make_problem, random_graph


def spec_for(kind, g, seed=0):
    rng = np.random.default_rng(seed)
    if kind == "mask":
        return ForwardSpec(Mask(np.sort(rng.choice(g.n, max(1, g.n // 2), replace=False))))
    if kind == "diffusion":
        return ForwardSpec(Diffusion(3))
    return ForwardSpec(Transport(sample_paths(g, 4, Rng(seed))))


@given(graphs(min_n=3), st.sampled_from(["mask", "diffusion", "transport"]), st.integers(0, 100))
@settings(max_examples=60, deadline=None)
def test_adjoint_identity(g, kind, seed):
    spec = spec_for(kind, g, seed)
    op = linear_operator(g, spec, channels=2)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.in_shape)
    y = rng.standard_normal(op.out_shape)
    assert adjoint_mismatch(op, x, y) < 1e-12


def test_linear_operators_match_dense_matrices():
    g = random_graph(10, 0.3, 1, weighted=True)
    n = g.n
    for kind in ("mask", "diffusion", "transport"):
        spec = spec_for(kind, g, 3)
        M = np.column_stack([forward(g, spec, e[:, None]).ravel() for e in np.eye(n)])
        X = np.random.default_rng(0).standard_normal((n, 2))
        np.testing.assert_allclose(forward(g, spec, X), M @ X, atol=1e-13)
        D = np.random.default_rng(1).standard_normal((M.shape[0], 2))
        np.testing.assert_allclose(adjoint(g, spec, D), M.T @ D, atol=1e-13)


def test_diffusion_is_transition_power():
    g = random_graph(9, 0.4, 2, weighted=True)
    P = g.transition.toarray()
    x = np.random.default_rng(0).standard_normal((9, 1))
    np.testing.assert_allclose(forward(g, ForwardSpec(Diffusion(4)), x), np.linalg.matrix_power(P, 4) @ x, atol=1e-13)
    np.testing.assert_array_equal(forward(g, ForwardSpec(Diffusion(0)), x), x)


def test_transport_average_and_sum_conventions():
    g = random_graph(8, 0.5, 0)
    paths = sample_paths(g, 3, Rng(0))
    x = np.arange(8.0)[:, None]
    s = transport_forward(g, x, paths, average=False)
    a = transport_forward(g, x, paths, average=True)
    np.testing.assert_allclose(s, x[paths].sum(axis=1))
    np.testing.assert_allclose(a, s / 3)


def test_invalid_specs_rejected():
    g = build_small()
    with pytest.raises(ValueError):
        Mask([3, 1])
    with pytest.raises(IndexError):
        ForwardSpec(Mask([0, 9])).validate(g)
    with pytest.raises(ValueError):
        ForwardSpec(Transport(np.array([[0, 2]]))).validate(g)  # 0 and 2 not adjacent
    with pytest.raises(ValueError):
        Diffusion(-1)
    with pytest.raises(ValueError):
        EdgeDiffusion(np.array([np.nan, 0, 0]))
    with pytest.raises(ValueError):
        ForwardSpec(Diffusion(1), "ranking")


def build_small():
    from gripkit.graph import build_graph
    return build_graph([(0, 1), (1, 2)], 3)


def test_edge_diffusion_matches_dense_recurrence():
    g = random_graph(9, 0.4, 4)
    rng = np.random.default_rng(0)
    w = rng.uniform(0.2, 2.0, g.m)
    w[0] = -0.5  # clamped to the floor
    x0 = rng.standard_normal((9, 2))
    W = g.with_weights(np.maximum(w, 1e-6)).dense_adjacency()
    s = W.sum(1)
    P = np.where(s[:, None] > 0, W / np.where(s > 0, s, 1)[:, None], 0.0) + np.diag(s == 0)
    want, x = [], x0
    for _ in range(3):
        x = P @ x
        want.append(x)
    np.testing.assert_allclose(edge_diffusion_forward(g, w, x0, 3), np.concatenate(want), atol=1e-13)


def test_edge_diffusion_gradcheck_in_weights():
    g = random_graph(8, 0.5, 5)
    w = np.random.default_rng(1).uniform(0.5, 2.0, (g.m, 1))
    x0 = np.random.default_rng(2).standard_normal((8, 2))
    err = ad.gradcheck(lambda t: edge_diffusion_forward(g, t[0], x0, 3), [w])
    assert err < 1e-6


def test_edge_diffusion_rejects_bad_input():
    g = random_graph(6, 0.6, 1)
    with pytest.raises(ValueError):
        edge_diffusion_forward(g, np.ones(g.m + 1), np.ones(6), 2)
    with pytest.raises(ValueError):
        edge_diffusion_forward(g, np.full(g.m, np.inf), np.ones(6), 2)


def test_observe_noise_statistics():
    g = random_graph(50, 0.1, 0)
    spec = ForwardSpec(Diffusion(1))
    x = np.zeros((50, 1))
    assert np.array_equal(observe(g, spec, x, 0.0, Rng(0)), forward(g, spec, x))
    noise = np.concatenate([observe(g, spec, x, 0.3, Rng(s)) for s in range(200)])
    assert abs(noise.std() - 0.3) < 5 * 0.3 / np.sqrt(2 * noise.size)
    with pytest.raises(ValueError):
        observe(g, spec, x, -1.0, Rng(0))


@pytest.mark.parametrize("kind", ["mask", "diffusion", "transport", "edge"])
def test_batched_forward_is_blockwise(kind):
    probs = [make_problem(kind, random_graph(n, 0.4, n), seed=n) for n in (6, 9, 7)]
    b, off = batch_problems(probs)
    np.testing.assert_allclose(b.forward(b.x_true), b.d_obs, atol=1e-13)
    for k, p in enumerate(probs):
        assert np.all(b.node_graph[off[k]:off[k + 1]] == k)
    assert np.bincount(b.data_graph).tolist() == [p.d_obs.shape[0] for p in probs]


def test_batch_rejects_mixed_variants():
    g = random_graph(6, 0.5, 0)
    with pytest.raises(ValueError):
        batch_problems([make_problem("mask", g), make_problem("diffusion", g)])


@pytest.mark.parametrize("kind", ["mask", "diffusion", "transport", "edge"])
def test_permuted_problem_is_consistent(kind):
    g = random_graph(10, 0.35, 7)
    p = make_problem(kind, g, seed=3)
    perm = np.random.default_rng(0).permutation(g.n)
    q = permute_problem(p, perm)
    np.testing.assert_allclose(q.forward(q.x_true), q.d_obs, atol=1e-13)
    if kind == "edge":
        np.testing.assert_array_equal(q.x_true, p.x_true[edge_permutation(p.graph, q.graph, perm)])
    else:
        np.testing.assert_array_equal(q.x_true[perm], p.x_true)


def test_problem_state_shape_and_validation():
    g = random_graph(8, 0.5, 0)
    p = make_problem("edge", g)
    assert p.state_shape == (g.m, 1)
    with pytest.raises(ValueError):
        Problem(g, ForwardSpec(Diffusion(1)), np.zeros((3, 1)), 0.0)
    with pytest.raises(ValueError):
        Problem(g, ForwardSpec(Diffusion(1)), np.zeros((8, 1)), -0.1)


@pytest.mark.parametrize("kind", ["mask", "diffusion", "transport", "edge"])
def test_problem_round_trip(tmp_path, kind):
    p = make_problem(kind, random_graph(9, 0.4, 2, meta_width=2), seed=1)
    save_problem(p, tmp_path / "p")
    q = load_problem(tmp_path / "p")
    np.testing.assert_array_equal(q.d_obs, p.d_obs)
    np.testing.assert_array_equal(q.x_true, p.x_true)
    assert q.spec.name == p.spec.name and q.target == p.target
    np.testing.assert_allclose(q.forward(q.x_true), p.d_obs, atol=1e-13)


def test_matrix_file_round_trip_and_magic(tmp_path):
    a = np.random.default_rng(0).standard_normal((3, 4))
    write_matrix(tmp_path / "a.bin", a)
    np.testing.assert_array_equal(read_matrix(tmp_path / "a.bin"), a)
    (tmp_path / "b.bin").write_bytes(b"nonsense" * 4)
    with pytest.raises(ValueError):
        read_matrix(tmp_path / "b.bin")


def test_load_problem_missing_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_problem(tmp_path / "nope")
