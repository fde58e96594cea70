from __future__ import annotations

import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from momrl.activations import Activation, activation_moment_coefficients
from momrl.moments import (MomentIndices, MomentSet, SampleBatch, estimate_P2, estimate_Q1,
                           estimate_Q2, estimate_R3, hermite_tensor, naive_moment_contractions,
                           outer_tilde_matrix, outer_tilde_vector)
from momrl.recovery import TwoLayerNet, sample_planted

RELU = Activation("relu")
ACTS = [RELU, Activation("squared_relu"), Activation("power", degree=3),
        Activation("leaky_relu", slope=0.2)]


def _unit(rng, d):
    a = rng.standard_normal(d)
    return a / np.linalg.norm(a)


def _loop_tilde_vector(v):
    d = v.shape[0]
    T = np.zeros((d, d, d))
    for a, b, c in itertools.product(range(d), repeat=3):
        T[a, b, c] = v[a] * (b == c) + v[b] * (a == c) + v[c] * (a == b)
    return T


def _loop_tilde_matrix(M):
    # six placements of a symmetric M next to an identity pair
    d = M.shape[0]
    T = np.zeros((d,) * 4)
    for a, b, c, e in itertools.product(range(d), repeat=4):
        T[a, b, c, e] = (M[a, b] * (c == e) + M[a, c] * (b == e) + M[b, c] * (a == e)
                         + M[a, e] * (b == c) + M[b, e] * (a == c) + M[c, e] * (a == b))
    return T


def test_outer_tilde_vector_examples():
    assert outer_tilde_vector(np.array([2.0])).item() == 6.0
    e1 = np.array([1.0, 0.0])
    assert np.array_equal(outer_tilde_vector(e1), _loop_tilde_vector(e1))
    assert not outer_tilde_vector(np.zeros(3)).any()


def test_outer_tilde_matrix_examples():
    assert outer_tilde_matrix(np.eye(1)).item() == pytest.approx(6.0)
    M = np.diag([1.0, 0.0])
    assert np.allclose(outer_tilde_matrix(M), _loop_tilde_matrix(M), atol=1e-14)
    assert not outer_tilde_matrix(np.zeros((3, 3))).any()


@given(st.integers(0, 10_000), st.integers(1, 4))
def test_outer_tilde_matrix_matches_loop(seed, d):
    A = np.random.default_rng(seed).standard_normal((d, d))
    M = A + A.T
    assert np.allclose(outer_tilde_matrix(M), _loop_tilde_matrix(M), atol=1e-12)


def test_outer_tilde_matrix_symmetrizes_with_warning():
    M = np.array([[1.0, 2.0], [0.0, 1.0]])
    with pytest.warns(UserWarning):
        T = outer_tilde_matrix(M)
    assert np.allclose(T, _loop_tilde_matrix(0.5 * (M + M.T)))


def test_hermite_tensors_are_centred():
    X = np.random.default_rng(0).standard_normal((40_000, 2))
    for j in (1, 2, 3, 4):
        mean = np.mean([hermite_tensor(x, j) for x in X[:20_000]], axis=0)
        assert np.abs(mean).max() < 0.15


def test_fourth_hermite_contraction_closed_form():
    rng = np.random.default_rng(3)
    x, a = rng.standard_normal(4), _unit(rng, 4)
    xa, eye = x @ a, np.eye(4)
    closed = (xa ** 2 * np.outer(x, x) - xa ** 2 * eye - 2 * xa * (np.outer(x, a) + np.outer(a, x))
              - np.outer(x, x) + 2 * np.outer(a, a) + eye)
    assert np.allclose(hermite_tensor(x, 4) @ a @ a, closed, atol=1e-12)


@pytest.mark.parametrize("act", ACTS, ids=lambda a: a.kind)
@given(seed=st.integers(0, 10_000), d=st.integers(2, 4), k=st.integers(1, 2))
def test_estimators_match_loop_oracle(act, seed, d, k):
    rng = np.random.default_rng(seed)
    net = TwoLayerNet(rng.choice([-1.0, 1.0], size=k), rng.standard_normal((k, d)), act)
    batch = sample_planted(net, 200, rng, noise=0.1, radius=2.5)
    ind = MomentIndices.select(act)
    alpha = _unit(rng, d)
    V = np.linalg.qr(rng.standard_normal((d, k)))[0]
    slow = naive_moment_contractions(batch, alpha, ind, V)
    fast = {"P2": estimate_P2(batch, alpha, ind), "Q1": estimate_Q1(batch, alpha, ind),
            "R3": estimate_R3(batch, alpha, V, ind), "Q2": estimate_Q2(batch, alpha, V, ind)}
    for key in fast:
        assert np.allclose(fast[key], slow[key], rtol=0, atol=1e-10), key


def test_every_order_combination_matches_oracle():
    rng = np.random.default_rng(7)
    net = TwoLayerNet([1.0, -1.0], rng.standard_normal((2, 3)))
    batch = sample_planted(net, 150, rng)
    alpha, V = _unit(rng, 3), np.linalg.qr(rng.standard_normal((3, 2)))[0]
    for j2, j3, l1, l2 in itertools.product((2, 3, 4), (3, 4), (1, 2, 3, 4), (2, 3, 4)):
        ind = MomentIndices(j2, j3, l1, l2, {1: 1.0, 2: 1.0, 3: 1.0, 4: 1.0}, 0)
        slow = naive_moment_contractions(batch, alpha, ind, V)
        assert np.allclose(estimate_P2(batch, alpha, ind), slow["P2"], atol=1e-10)
        assert np.allclose(estimate_Q1(batch, alpha, ind), slow["Q1"], atol=1e-10)
        assert np.allclose(estimate_R3(batch, alpha, V, ind), slow["R3"], atol=1e-10)
        assert np.allclose(estimate_Q2(batch, alpha, V, ind), slow["Q2"], atol=1e-10)


def test_shard_merge_is_associative():
    rng = np.random.default_rng(1)
    net = TwoLayerNet([1.0], [[1.0, 0.5, 0.0]])
    batch = sample_planted(net, 1000, rng)
    ind, alpha = MomentIndices.select(RELU), _unit(rng, 3)
    whole = estimate_P2(batch, alpha, ind)
    parts = batch.partition(4)
    merged = sum(estimate_P2(p, alpha, ind) * p.n for p in parts) / batch.n
    assert np.allclose(whole, merged, rtol=1e-10, atol=1e-14)


def _unit_planted(n, seed, v=(1.0,), W=((1.0,) + (0.0,) * 9,)):
    rng = np.random.default_rng(seed)
    net = TwoLayerNet(list(v), np.array(W))
    return net, sample_planted(net, n, rng)


def test_claim_oracle_single_relu_neuron():
    _, batch = _unit_planted(200_000, 0)
    ind = MomentIndices.select(RELU)
    m = activation_moment_coefficients(RELU, 1.0).m
    alpha = _unit(np.random.default_rng(5), 10)
    e1 = np.eye(10)[0]
    P2 = estimate_P2(batch, alpha, ind)
    assert np.linalg.norm(P2 - m[1] * np.outer(e1, e1), 2) <= 0.02
    Q1 = estimate_Q1(batch, alpha, ind)
    assert np.linalg.norm(Q1 - m[0] * e1) <= 0.02
    V = e1[:, None]
    Q2 = estimate_Q2(batch, alpha, V, ind)
    assert abs(Q2.item() - m[1]) <= 0.02
    R3 = estimate_R3(batch, alpha, V, ind)
    assert abs(R3.item() - m[3] * alpha[0]) <= 0.02


def test_cancelling_pair_gives_small_moments():
    e1 = (1.0,) + (0.0,) * 9
    _, batch = _unit_planted(200_000, 1, v=(1.0, -1.0), W=(e1, e1))
    assert not batch.y.any()
    ind = MomentIndices.select(RELU)
    alpha = _unit(np.random.default_rng(2), 10)
    V = np.eye(10)[:, :1]
    assert np.linalg.norm(estimate_P2(batch, alpha, ind), 2) <= 0.02
    assert np.abs(estimate_R3(batch, alpha, V, ind)).max() <= 0.02
    assert np.linalg.norm(estimate_Q1(batch, alpha, ind)) <= 0.02


def test_zero_labels_give_zero_estimates():
    rng = np.random.default_rng(0)
    batch = SampleBatch(rng.standard_normal((500, 4)), np.zeros(500))
    ind = MomentIndices.select(RELU)
    alpha, V = _unit(rng, 4), np.eye(4)[:, :2]
    assert not estimate_P2(batch, alpha, ind).any()
    assert not estimate_R3(batch, alpha, V, ind).any()


def test_truncation_is_negligible():
    rng = np.random.default_rng(0)
    net = TwoLayerNet([1.0, 1.0], np.eye(10)[:2])
    X = rng.standard_normal((100_000, 10))
    full = SampleBatch(X, net(X))
    cut = sample_planted(net, 100_000, np.random.default_rng(0))
    ind, alpha = MomentIndices.select(RELU), _unit(rng, 10)
    a, b = estimate_P2(full, alpha, ind), estimate_P2(cut, alpha, ind)
    assert np.linalg.norm(a - b) <= 1e-6 * np.linalg.norm(a)


def test_weight_scaling_scales_moments():
    ind = MomentIndices.select(RELU)
    alpha = _unit(np.random.default_rng(9), 10)
    e1 = np.eye(10)[0]
    base = estimate_P2(sample_planted(TwoLayerNet([1.0], e1[None]), 200_000,
                                      np.random.default_rng(4)), alpha, ind)
    twice = estimate_P2(sample_planted(TwoLayerNet([1.0], 2 * e1[None]), 200_000,
                                       np.random.default_rng(4)), alpha, ind)
    assert np.allclose(twice, 2.0 * base, atol=1e-12)


def test_input_validation():
    rng = np.random.default_rng(0)
    batch = SampleBatch(rng.standard_normal((10, 3)), np.ones(10))
    ind = MomentIndices.select(RELU)
    with pytest.raises(ValueError):
        estimate_P2(batch, np.ones(3), ind)
    with pytest.raises(ValueError):
        estimate_R3(batch, np.eye(3)[0], np.ones((3, 2)), ind)
    with pytest.raises(ValueError):
        estimate_Q2(batch, np.eye(3)[0], None, ind)
    with pytest.raises(ValueError):
        estimate_P2(SampleBatch(np.zeros((0, 3)), np.zeros(0)), np.eye(3)[0], ind)
    with pytest.raises(ValueError):
        SampleBatch(np.full((2, 2), 100.0), np.ones(2), radius=1.0)


def test_partition_sizes():
    batch = SampleBatch(np.zeros((10, 2)), np.zeros(10))
    assert [p.n for p in batch.partition(4)] == [3, 3, 2, 2]


def test_sample_batch_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    net = TwoLayerNet([1.0], [[1.0, 2.0]])
    batch = sample_planted(net, 50, rng, noise=0.1, radius=2.0)
    batch.save(tmp_path / "b.txt")
    back = SampleBatch.load(tmp_path / "b.txt")
    assert np.array_equal(back.x, batch.x) and np.array_equal(back.y, batch.y)
    assert np.array_equal(back.truncated, batch.truncated)
    assert back.radius == 2.0 and back.noise == 0.1


def test_moment_set_dump(tmp_path):
    ms = MomentSet(np.eye(3)[0], MomentIndices.select(RELU), [(0, 5)], P2=np.eye(3))
    ms.dump(tmp_path / "m.npz")
    data = np.load(tmp_path / "m.npz")
    assert np.array_equal(data["P2"], np.eye(3))
    assert list(data["indices"]) == [2, 4, 1, 2]
