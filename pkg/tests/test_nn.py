import numpy as np
import pytest

from gripkit import autodiff as ad
from gripkit.autodiff import Tensor
from gripkit.nn import (AdamState, GcnParams, adam_step, cross_entropy_logits, cross_entropy_probs, gcn_forward,
                        load_checkpoint, make_gcn, make_mlp, mlp_forward, mse, save_checkpoint, time_embedding)
from gripkit.numerics import NonFiniteError, Rng

from conftest import random_graph

TOL = 1e-6


def gcn_with_bias(rng, *shape_args, residual=True):
    p = make_gcn(*shape_args, rng=rng, residual=residual)
    for b in p.biases:
        b.value[:] = rng.normal(b.shape, 0.3)
    return p


def test_gcn_forward_matches_dense_reference():
    g = random_graph(9, 0.4, 0)
    A = g.gcn_operator.toarray()
    p = gcn_with_bias(Rng(1), 3, 5, 2, 3)
    X = np.random.default_rng(0).standard_normal((9, 3))
    W = [w.value for w in p.weights]
    B = [b.value for b in p.biases]
    h = A @ X @ W[0] + B[0]
    h = h + (A @ np.maximum(h, 0) @ W[1] + B[1])  # square hidden layer: skip connection
    want = A @ np.maximum(h, 0) @ W[2] + B[2]
    np.testing.assert_allclose(gcn_forward(g, X, p).value, want, atol=1e-13)


def test_gcn_gradcheck_all_parameters():
    g = random_graph(7, 0.5, 2)
    p = gcn_with_bias(Rng(3), 3, 4, 2, 3)
    X = np.random.default_rng(1).standard_normal((7, 3))
    arrays = [X] + [t.value for t in p.tensors()]

    def fn(t):
        ws, bs = t[1::2], t[2::2]
        return gcn_forward(g, t[0], GcnParams(list(ws), list(bs), True))

    assert ad.gradcheck(fn, arrays) < TOL


def test_gcn_zero_last_layer_outputs_zero():
    g = random_graph(6, 0.5, 0)
    p = make_gcn(3, 4, 2, 3, Rng(0), zero_last=True)
    assert np.array_equal(gcn_forward(g, np.ones((6, 3)), p).value, np.zeros((6, 2)))


def test_gcn_is_permutation_equivariant():
    from gripkit.graph import permute_graph
    g = random_graph(10, 0.3, 4)
    p = gcn_with_bias(Rng(2), 2, 4, 3, 3)
    X = np.random.default_rng(0).standard_normal((10, 2))
    perm = np.random.default_rng(1).permutation(10)
    Xp = np.empty_like(X)
    Xp[perm] = X
    Y = gcn_forward(g, X, p).value
    Yp = gcn_forward(permute_graph(g, perm), Xp, p).value
    np.testing.assert_allclose(Yp[perm], Y, atol=1e-12)


def test_gcn_width_mismatch():
    g = random_graph(5, 0.5, 0)
    with pytest.raises(ValueError):
        gcn_forward(g, np.ones((5, 2)), make_gcn(3, 4, 1, 2, Rng(0)))
    with pytest.raises(ValueError):
        make_gcn(3, 4, 1, 0, Rng(0))


def test_mlp_gradcheck_and_width_check():
    p = make_mlp([4, 6, 1], Rng(0))
    arrays = [np.random.default_rng(0).standard_normal((5, 4))] + [t.value for t in p.tensors()]

    def fn(t):
        from gripkit.nn import MlpParams
        return mlp_forward(t[0], MlpParams(list(t[1::2]), list(t[2::2])))

    assert ad.gradcheck(fn, arrays) < TOL
    with pytest.raises(ValueError):
        mlp_forward(np.ones((2, 3)), p)


def test_time_embedding_layout():
    e = time_embedding(2.0, 6)
    freq = 1.0 / 10000.0 ** (np.arange(3) * 2 / 6)
    np.testing.assert_allclose(e[0::2], np.sin(2.0 * freq))
    np.testing.assert_allclose(e[1::2], np.cos(2.0 * freq))
    with pytest.raises(ValueError):
        time_embedding(0.0, 3)


def test_cross_entropy_values_and_gradients():
    logits = np.array([[2.0, 0.0, -1.0], [0.5, 0.5, 0.0]])
    target = np.eye(3)[[0, 2]]
    ls = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    assert cross_entropy_logits(logits, target).value == pytest.approx(-(ls * target).sum() / 2, rel=1e-14)
    assert ad.gradcheck(lambda t: cross_entropy_logits(t[0], target), [logits]) < TOL
    probs = np.exp(ls)
    assert cross_entropy_probs(probs, target).value == pytest.approx(-(ls * target).sum() / 2, rel=1e-12)
    with pytest.raises(NonFiniteError):
        cross_entropy_logits(np.array([[np.nan, 0.0]]), np.array([[1.0, 0.0]]))


def test_mse_value():
    assert mse(np.ones((2, 2)), np.zeros((2, 2))).value == 1.0


def test_adam_first_step_matches_hand_computation():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    g = np.array([0.5, -4.0])
    adam_step([p], [g], AdamState(lr=0.1, eps=1e-3))
    # bias-corrected first step: m_hat = g, v_hat = g^2
    np.testing.assert_allclose(p.value, np.array([1.0, -2.0]) - 0.1 * g / (np.abs(g) + 1e-3))


def test_adam_weight_decay_and_amsgrad_max():
    p = Tensor(np.array([2.0]), requires_grad=True)
    st = AdamState(lr=0.01, wd=0.5)
    adam_step([p], [np.zeros(1)], st)
    assert p.value[0] < 2.0  # decay alone moves it toward zero
    adam_step([p], [np.array([10.0])], st)
    adam_step([p], [np.array([0.01])], st)
    assert st.v_max[0][0] >= st.v[0][0]


def test_adam_minimises_quadratic():
    p = Tensor(np.array([3.0, -1.0]), requires_grad=True)
    st = AdamState(lr=0.05)
    for _ in range(500):
        adam_step([p], [2 * p.value], st)
    assert np.abs(p.value).max() < 0.05


def test_adam_rejects_nonfinite_gradient():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(NonFiniteError):
        adam_step([p], [np.array([np.inf, 0.0])], AdamState())


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a.weight": rng.standard_normal((3, 4)), "b": rng.standard_normal((1,)), "é": np.zeros((0, 2))}
    save_checkpoint(tmp_path / "c.bin", arrays, {"solver": "var"})
    got, man = load_checkpoint(tmp_path / "c.bin")
    assert list(got) == list(arrays) and man == {"solver": "var"}
    for k in arrays:
        assert got[k].shape == arrays[k].shape
        assert got[k].tobytes() == arrays[k].tobytes()
