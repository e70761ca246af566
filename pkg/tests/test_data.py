import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gripkit.data import (SPLIT_OFFSETS, DatasetSpec, balanced_labels, gen_er_weighted, gen_point_cloud, gen_sbm,
                          knn_edges, make_problem, make_split, read_dataset, sample_paths, smooth_field,
                          sphere_points, split_seed, write_dataset)
from gripkit.numerics import Rng, derive_seed

from conftest import random_graph


def test_balanced_labels_counts():
    labels = balanced_labels(23, 5, Rng(0))
    counts = np.bincount(labels, minlength=5)
    assert counts.max() - counts.min() <= 1 and counts.sum() == 23


def test_sbm_edge_densities_monte_carlo():
    n, p_in, p_out = 120, 0.4, 0.05
    g, labels = gen_sbm(n, 3, p_in, p_out, Rng(0))
    same = labels[:, None] == labels[None, :]
    A = g.dense_adjacency() > 0
    iu = np.triu_indices(n, 1)
    s, A = same[iu], A[iu]
    for mask, p in ((s, p_in), (~s, p_out)):
        rate, N = A[mask].mean(), mask.sum()
        assert abs(rate - p) < 5 * np.sqrt(p * (1 - p) / N)


def test_sbm_warns_when_not_assortative():
    with pytest.warns(UserWarning):
        gen_sbm(10, 2, 0.1, 0.2, Rng(0))


def test_sphere_points_on_unit_sphere_and_isotropic():
    p = sphere_points(20000, Rng(1))
    np.testing.assert_allclose(np.linalg.norm(p, axis=1), 1.0, rtol=1e-12)
    # each coordinate of a uniform sphere point has mean 0 and variance 1/3
    assert np.all(np.abs(p.mean(axis=0)) < 5 * np.sqrt(1 / 3 / len(p)))
    np.testing.assert_allclose(p.var(axis=0), 1 / 3, atol=0.02)


def test_knn_edges_match_brute_force():
    pts = np.random.default_rng(0).standard_normal((30, 3))
    e = knn_edges(pts, 4)
    D = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    np.fill_diagonal(D, np.inf)
    want = np.argsort(D, axis=1)[:, :4]
    for i in range(30):
        assert set(e[e[:, 0] == i, 1].tolist()) == set(want[i].tolist())


def test_point_cloud_meta_and_labels():
    g, labels = gen_point_cloud(60, 4, 5, Rng(2))
    assert g.node_meta.shape == (60, 6)
    np.testing.assert_allclose(g.node_meta[:, :3], g.node_meta[:, 3:])
    assert set(labels.tolist()) <= set(range(4))
    assert np.all(np.diff(g.row_ptr) >= 5)  # symmetrised k-NN: every node keeps its k neighbours
    with pytest.raises(ValueError):
        gen_point_cloud(5, 2, 5, Rng(0))


def test_er_weighted_inverse_distances():
    g, w = gen_er_weighted(40, 0.2, Rng(3))
    pos = g.node_meta
    E = g.edges
    np.testing.assert_allclose(w[:, 0], 1.0 / np.linalg.norm(pos[E[:, 0]] - pos[E[:, 1]], axis=1), rtol=1e-12)
    np.testing.assert_array_equal(g.undirected_weight, w[:, 0])
    with pytest.raises(ValueError):
        gen_er_weighted(10, 0.0, Rng(0))


@given(st.integers(2, 20), st.integers(1, 9), st.integers(0, 100))
@settings(max_examples=40, deadline=None)
def test_paths_are_walks(n, pl, seed):
    g = random_graph(n, 0.3, seed)
    paths = sample_paths(g, pl, Rng(seed))
    assert paths.shape == (n, pl)
    assert np.array_equal(paths[:, 0], np.arange(n))
    A = g.dense_adjacency() > 0
    a, b = paths[:, :-1].ravel(), paths[:, 1:].ravel()
    assert np.all(A[a, b] | ((a == b) & g.isolated[a]))


def test_path_steps_are_uniform_monte_carlo():
    from gripkit.graph import build_graph
    g = build_graph([(0, 1), (0, 2), (0, 3)], 4)
    hits = np.concatenate([sample_paths(g, 2, Rng(s))[0, 1:] for s in range(3000)])
    freq = np.bincount(hits, minlength=4)[1:] / len(hits)
    assert np.all(np.abs(freq - 1 / 3) < 5 * np.sqrt(2 / 9 / len(hits)))


def test_smooth_field_unit_std():
    g = random_graph(30, 0.2, 0)
    assert np.std(smooth_field(g, 3, Rng(0))) == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("task,generator", [("completion", "sbm"), ("source", "point_cloud"),
                                            ("transport", "sbm"), ("edge_recovery", "er_weighted")])
def test_make_problem_is_consistent(task, generator):
    spec = DatasetSpec(generator=generator, task=task, n=40, classes=4, nb=2, edge_p=0.2, knn_k=4)
    p = make_problem(spec, Rng(0))
    np.testing.assert_allclose(p.forward(p.x_true), p.d_obs, atol=1e-12)
    assert p.task_kind == spec.task_kind
    if task == "completion":
        labels = p.x_true.argmax(1)[p.spec.variant.indices]
        assert np.all(np.bincount(labels, minlength=4) == 2)
    if task == "edge_recovery":
        assert p.target == "edge" and np.all(p.graph.undirected_weight == 1.0)
        assert np.all(p.spec.variant.x0.sum(0) == 1.0)


def test_make_problem_noise():
    spec = DatasetSpec(task="source", n=40, classes=4, sigma=0.1)
    p = make_problem(spec, Rng(0))
    resid = p.d_obs - p.forward(p.x_true)
    assert 0.05 < resid.std() < 0.15


def test_completion_rejects_small_classes():
    with pytest.raises(ValueError):
        DatasetSpec(n=10, classes=6, nb=2)


def test_spec_validation():
    with pytest.raises(ValueError):
        DatasetSpec(generator="grid")
    with pytest.raises(ValueError):
        DatasetSpec(task="edge_recovery")
    with pytest.raises(ValueError):
        DatasetSpec(p_in=1.5)
    with pytest.raises(ValueError):
        DatasetSpec.from_dict({"nodes": 5})


def test_split_seeds_distinct_and_deterministic():
    spec = DatasetSpec(n=30, classes=3, nb=2, n_train=3, n_val=2, n_test=2, seed=4)
    seeds = {s: split_seed(spec, s) for s in SPLIT_OFFSETS}
    assert len(set(seeds.values())) == 3
    assert seeds["train"] == derive_seed(4, 101)
    a, b = make_split(spec, "train"), make_split(spec, "train")
    for p, q in zip(a, b):
        np.testing.assert_array_equal(p.d_obs, q.d_obs)
        np.testing.assert_array_equal(p.graph.edges, q.graph.edges)
    assert not np.array_equal(a[0].graph.edges, make_split(spec, "val")[0].graph.edges)


def test_dataset_round_trip(tmp_path):
    spec = DatasetSpec(task="transport", n=20, classes=2, n_train=2, n_val=1, n_test=1)
    data = write_dataset(spec, tmp_path)
    index = json.loads((tmp_path / "index.json").read_text())
    assert index["splits"]["train"] == ["train/00000", "train/00001"]
    spec2, data2 = read_dataset(tmp_path)
    assert spec2 == spec
    for s in data:
        for p, q in zip(data[s], data2[s]):
            np.testing.assert_array_equal(p.d_obs, q.d_obs)
            np.testing.assert_array_equal(p.x_true, q.x_true)
    assert not (tmp_path / "index.json.tmp").exists()


def test_read_dataset_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path)
