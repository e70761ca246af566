import csv

import numpy as np
import pytest

from gripkit.classical import (ClassicalConfig, DivergenceError, Trace, data_residual_and_gradient,
                               solve_scale_space, solve_variational_classical)

from conftest import make_problem, random_graph


def dense_F(p):
    n = p.graph.n
    return np.column_stack([p.forward(e[:, None]).ravel() for e in np.eye(n)])


def test_gd_matches_dense_recurrence():
    p = make_problem("diffusion", random_graph(10, 0.35, 0), channels=1)
    F = dense_F(p)
    L = p.graph.laplacian.toarray()
    cfg = ClassicalConfig(alpha=0.2, step_size=0.3, max_iter=25, stop_nmse=1e-30)
    x, trace = solve_variational_classical(p, cfg)
    y = np.zeros((10, 1))
    for _ in range(25):
        y = y - 0.3 * (F.T @ (F @ y - p.d_obs) + 0.2 * L @ y)
    np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-14)
    assert len(trace.data_fit) == 26


@pytest.mark.parametrize("reg", ["laplacian", "tikhonov"])
def test_gd_converges_to_normal_equations(reg):
    p = make_problem("mask", random_graph(12, 0.4, 1), channels=2)
    F = dense_F(p)
    R = p.graph.laplacian.toarray() if reg == "laplacian" else np.eye(12)
    alpha = 0.5
    H = F.T @ F + alpha * R
    if np.linalg.matrix_rank(H) < 12:
        pytest.skip("singular normal equations")
    want = np.linalg.solve(H, F.T @ p.d_obs)
    step = 1.0 / np.linalg.eigvalsh(H).max()
    cfg = ClassicalConfig(regularizer=reg, alpha=alpha, step_size=step, max_iter=20000, stop_nmse=1e-30)
    x, _ = solve_variational_classical(p, cfg)
    np.testing.assert_allclose(x, want, atol=1e-7)


def test_gd_stops_on_data_fit():
    p = make_problem("mask", random_graph(10, 0.4, 2), channels=1)
    cfg = ClassicalConfig(alpha=0.0, step_size=0.5, stop_nmse=1e-3, max_iter=1000)
    _, trace = solve_variational_classical(p, cfg)
    assert trace.data_fit[-1] < 1e-3 and np.all(trace.data_fit[:-1] >= 1e-3)
    assert len(trace.recovery) == len(trace.data_fit)


def test_classification_gradient_matches_finite_differences():
    p = make_problem("diffusion", random_graph(8, 0.5, 3), channels=3, task="classification")
    x = np.random.default_rng(0).standard_normal((8, 3))

    def f(z):
        r, _ = data_residual_and_gradient(p, z)
        return 0.5 * np.sum(r * r)

    _, g = data_residual_and_gradient(p, x)
    num = np.zeros_like(x)
    h = 1e-6
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        num[idx] = (f(x + e) - f(x - e)) / (2 * h)
    np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-9)


def test_edge_gradient_matches_finite_differences():
    p = make_problem("edge", random_graph(8, 0.5, 4))
    x = np.random.default_rng(1).uniform(0.5, 1.5, p.state_shape)

    def f(z):
        r, _ = data_residual_and_gradient(p, z)
        return 0.5 * np.sum(r * r)

    _, g = data_residual_and_gradient(p, x)
    num = np.zeros_like(x)
    h = 1e-6
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        num[idx] = (f(x + e) - f(x - e)) / (2 * h)
    np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-9)


def test_edge_baseline_reduces_data_fit():
    p = make_problem("edge", random_graph(10, 0.4, 5))
    cfg = ClassicalConfig(alpha=0.01, step_size=1.0, max_iter=200, stop_nmse=1e-8)
    _, trace = solve_variational_classical(p, cfg)
    assert trace.data_fit[-1] < trace.data_fit[0]


def test_divergence_is_reported():
    p = make_problem("mask", random_graph(10, 0.5, 6), channels=1)
    with pytest.raises(DivergenceError) as err:
        solve_variational_classical(p, ClassicalConfig(alpha=5.0, step_size=10.0, max_iter=100, stop_nmse=1e-30))
    assert err.value.iteration > 0


@pytest.mark.parametrize("weight", [1.0, 7.5])
def test_scale_space_matches_dense_oracle(weight):
    g = random_graph(9, 0.3, 7)
    p = make_problem("mask", g, channels=2)
    F = dense_F(p)
    L = g.laplacian.toarray()
    Pi = np.zeros((9, 9))
    for c in range(g.num_components):
        members = g.component_label == c
        Pi[np.ix_(members, members)] = 1.0 / members.sum()
    Hinv = np.linalg.pinv(L) + weight * Pi
    cfg = ClassicalConfig(step_size=0.2, max_iter=15, pinv_tol=1e-13, pinv_max_iter=2000, null_space_weight=weight)
    trace = solve_scale_space(p, cfg)
    x = np.zeros((9, 2))
    for k in range(15):
        x = x - 0.2 * Hinv @ (F.T @ (F @ x - p.d_obs))
        np.testing.assert_allclose(trace[k + 1], x, atol=1e-9)


def test_scale_space_rejects_edge_problems():
    with pytest.raises(TypeError):
        solve_scale_space(make_problem("edge", random_graph(6, 0.5, 0)), ClassicalConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        ClassicalConfig(regularizer="tv")
    with pytest.raises(ValueError):
        ClassicalConfig(stop_nmse=0.0)
    with pytest.raises(ValueError):
        ClassicalConfig(alpha=-1.0)


def test_trace_csv(tmp_path):
    Trace(np.array([1.0, 0.5]), np.array([0.3, 0.1])).write_csv(tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["iter", "data_fit_nmse", "recovery_nmse"]
    assert rows[2] == ["1", "0.5", "0.1"]
