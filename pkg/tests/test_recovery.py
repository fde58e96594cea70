from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from momrl.activations import Activation
from momrl.moments import MomentIndices, SampleBatch
from momrl.recovery import (AlignmentError, RankDeficientDesign, RecoveryConfig, TwoLayerNet,
                            assemble_network, comparison_table, empirical_loss_and_gradient,
                            estimate_subspace, exact_recover, match_rows, noisy_recover, refine,
                            sample_planted, solve_linear_systems, tensor_decompose)

RELU = Activation("relu")


def _proj_dist(V, B):
    return np.linalg.norm(V @ V.T - B @ B.T, 2)


def _planted(k=2, d=10, v=None):
    W = np.eye(d)[:k]
    return TwoLayerNet(np.ones(k) if v is None else v, W, RELU)


def test_net_matches_loop():
    rng = np.random.default_rng(0)
    net = TwoLayerNet([1.0, -1.0], rng.standard_normal((2, 5)))
    X = rng.standard_normal((20, 5))
    loop = [sum(v * max(w @ x, 0.0) for v, w in zip(net.v, net.W)) for x in X]
    assert np.allclose(net(X), loop, atol=1e-14)


def test_net_conditioning():
    net = TwoLayerNet([1.0, 1.0], np.diag([2.0, 1.0]))
    assert net.kappa == pytest.approx(2.0)
    assert net.lam == pytest.approx(2.0)
    with pytest.raises(ValueError):
        TwoLayerNet([0.5], [[1.0]])


def test_config_validation():
    for bad in ({"n": 0}, {"T": 0}, {"eps": 1.0}, {"L": 0}):
        with pytest.raises(ValueError):
            RecoveryConfig(**bad)
    assert RecoveryConfig().restarts(2) == int(np.ceil(200 * np.log(3)))


def test_subspace_diagonal():
    rng = np.random.default_rng(0)
    V, info = estimate_subspace(np.diag([1.0, 0.5, 0.0, 0.0]), 2, 200, rng)
    assert _proj_dist(V, np.eye(4)[:, :2]) <= 1e-8
    assert np.allclose(V.T @ V, np.eye(2), atol=1e-12)


def test_subspace_diagonal_fifty_iterations_rate():
    # power iteration on 3I + P converges at ratio (3 + 0.5) / (3 + 1) per step
    rng = np.random.default_rng(0)
    V, _ = estimate_subspace(np.diag([1.0, 0.5, 0.0, 0.0]), 2, 50, rng)
    assert _proj_dist(V, np.eye(4)[:, :2]) <= 50 * (3.0 / 3.5) ** 50


def test_subspace_uses_both_branches():
    rng = np.random.default_rng(1)
    V, info = estimate_subspace(np.diag([1.0, -0.8, 0.01, 0.0]), 2, 500, rng)
    assert info["branch_counts"] == (1, 1)
    assert abs(V[:, 0] @ np.eye(4)[0]) == pytest.approx(1.0, abs=1e-8)
    assert abs(V[:, 1] @ np.eye(4)[1]) == pytest.approx(1.0, abs=1e-8)


@given(st.integers(0, 10_000))
def test_subspace_matches_eigh(seed):
    rng = np.random.default_rng(seed)
    Q = np.linalg.qr(rng.standard_normal((5, 5)))[0]
    lam = np.array([2.0, -1.5, 0.1, 0.05, 0.0])
    P = Q @ np.diag(lam) @ Q.T
    V, _ = estimate_subspace(P, 2, 400, rng)
    assert _proj_dist(V, Q[:, :2]) <= 1e-6


def test_subspace_on_planted_moments():
    from momrl.moments import estimate_P2
    rng = np.random.default_rng(2)
    net = TwoLayerNet([1.0, 1.0], np.eye(10)[:2] + 0.3 * np.eye(10)[2:4], RELU)
    batch = sample_planted(net, 200_000, rng)
    alpha = rng.standard_normal(10)
    alpha /= np.linalg.norm(alpha)
    P2 = estimate_P2(batch, alpha, MomentIndices.select(RELU))
    V, _ = estimate_subspace(P2, 2, 100, rng)
    wbar = net.W / np.linalg.norm(net.W, axis=1, keepdims=True)
    assert np.linalg.norm(wbar - wbar @ V @ V.T, axis=1).max() <= 0.1


def _cube(u):
    return np.einsum("a,b,c->abc", u, u, u)


def test_tensor_orthogonal():
    e = np.eye(2)
    td = tensor_decompose(2 * _cube(e[0]) + _cube(e[1]), 2, 20, np.random.default_rng(0))
    assert np.allclose(td.weights, [2.0, 1.0], atol=1e-8)
    assert np.allclose(np.abs(td.components), e, atol=1e-8)
    assert td.stable


@given(st.integers(0, 10_000))
def test_tensor_rank_one(seed):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(3)
    u /= np.linalg.norm(u)
    td = tensor_decompose(_cube(u), 1, 10, rng)
    assert min(np.linalg.norm(td.components[0] - u), np.linalg.norm(td.components[0] + u)) <= 1e-8


def test_tensor_with_noise():
    rng = np.random.default_rng(3)
    Q = np.linalg.qr(rng.standard_normal((3, 3)))[0]
    T = 2 * _cube(Q[:, 0]) + _cube(Q[:, 1])
    noise = rng.uniform(-1, 1, T.shape)
    T += 1e-3 * noise / np.abs(noise).max()
    td = tensor_decompose(T, 2, 30, rng)
    for comp, ref in zip(td.components, Q.T[:2]):
        assert min(np.linalg.norm(comp - ref), np.linalg.norm(comp + ref)) <= 1e-2


def test_linear_systems_examples():
    z, r, info = solve_linear_systems(np.array([[1.0]]), np.eye(3)[:, :1],
                                      0.5 * np.eye(3)[0], np.array([[0.0]]))
    assert z == pytest.approx([0.5]) and info["residual_z"] == 0.0
    U = np.eye(2)
    Q2 = 2 * np.outer(U[0], U[0]) - 3 * np.outer(U[1], U[1])
    _, r, _ = solve_linear_systems(U, np.eye(2), np.zeros(2), Q2)
    assert np.allclose(r, [2.0, -3.0])


def test_linear_systems_perturbed():
    rng = np.random.default_rng(0)
    U = np.linalg.qr(rng.standard_normal((2, 2)))[0]
    V = np.linalg.qr(rng.standard_normal((5, 2)))[0]
    z = np.array([0.7, -1.2])
    delta = rng.standard_normal(5)
    Q1 = V @ U.T @ z + 1e-3 * delta / np.linalg.norm(delta)
    zh, _, _ = solve_linear_systems(U, V, Q1, np.zeros((2, 2)))
    A = V @ U.T
    oracle = np.linalg.solve(A.T @ A, A.T @ Q1)
    assert np.allclose(zh, oracle, atol=1e-12)
    assert np.linalg.norm(zh - z) <= 1e-2


def test_linear_systems_rank_deficient():
    U = np.array([[1.0, 0.0], [1.0, 0.0]])
    with pytest.raises(RankDeficientDesign):
        solve_linear_systems(U, np.eye(2), np.zeros(2), np.zeros((2, 2)))


def _assemble_inputs(v, scale):
    ind = MomentIndices.select(RELU)
    d = 4
    alpha = np.full(d, 0.5)
    V = np.eye(d)[:, :1]
    U = np.array([[1.0]])
    a = alpha[0]
    z = np.array([v * ind.c[ind.l1] * a ** (ind.l1 - 1) * scale ** (ind.p + 1)])
    r = np.array([v * ind.c[ind.l2] * a ** (ind.l2 - 2) * scale ** (ind.p + 1)])
    return z, r, U, V, alpha, ind


@pytest.mark.parametrize("v,scale", [(1.0, 1.0), (-1.0, 1.0), (1.0, 2.0)])
def test_assemble_network(v, scale):
    z, r, U, V, alpha, ind = _assemble_inputs(v, scale)
    net = assemble_network(z, r, U, V, alpha, ind, RELU)
    assert net.v[0] == v
    assert np.allclose(net.W, scale * np.eye(4)[:1], atol=1e-12)


def test_assemble_alignment_error():
    z, r, U, V, _, ind = _assemble_inputs(1.0, 1.0)
    with pytest.raises(AlignmentError) as info:
        assemble_network(z, r, U, V, np.eye(4)[1], ind, RELU)
    assert info.value.neuron == 0


def test_noisy_recover_planted():
    net = _planted()
    batch = sample_planted(net, 400_000, np.random.default_rng(0), noise=0.1)
    report = noisy_recover(batch, 2, rng=np.random.default_rng(1), reference=net)
    m = match_rows(report.net, net)
    assert m.relative_row_error <= 0.1 and m.signs_match
    assert report.status == "success"
    assert "row  v_ref" in comparison_table(report.net, net)


def test_noisy_recover_single_neuron():
    net = _planted(k=1)
    batch = sample_planted(net, 400_000, np.random.default_rng(0))
    report = noisy_recover(batch, 1, rng=np.random.default_rng(1), reference=net)
    assert match_rows(report.net, net).relative_frobenius <= 0.02


def test_duplicate_rows_are_flagged():
    w = np.eye(10)[0]
    net = TwoLayerNet([1.0, 1.0], np.stack([w, w]), RELU)
    batch = sample_planted(net, 100_000, np.random.default_rng(0))
    report = noisy_recover(batch, 2, rng=np.random.default_rng(1))
    assert report.status in ("degraded", "failed")
    assert "gap" in report.reason or "Gram" in report.reason or "residual" in report.reason


def test_recovery_is_deterministic():
    net = _planted()
    batch = sample_planted(net, 20_000, np.random.default_rng(0))
    a = noisy_recover(batch, 2, rng=np.random.default_rng(5)).to_json()
    b = noisy_recover(batch, 2, rng=np.random.default_rng(5)).to_json()
    assert a == b
    data = json.loads(a)
    assert data["schema"] == "momrl.recoveryreport/1"
    assert "subspace" in data["diagnostics"]


def test_exact_recover_planted():
    rng = np.random.default_rng(3)
    W = rng.standard_normal((2, 10))
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    net = TwoLayerNet([1.0, -1.0], W, RELU)
    batch = sample_planted(net, 200_000, np.random.default_rng(4))
    report = exact_recover(batch, 2, rng=np.random.default_rng(5), reference=net)
    assert report.status == "success"
    assert match_rows(report.net, net).frobenius_error <= 1e-6
    assert np.all(np.diff(report.loss_history) <= 0.0)


def test_exact_recover_from_truth_is_a_fixed_point():
    net = _planted()
    batch = sample_planted(net, 5_000, np.random.default_rng(0))
    report = exact_recover(batch, 2, init=net)
    assert report.diagnostics["gd_iterations"] == 0
    assert report.loss_history == [0.0]


def test_exact_recover_ill_conditioned():
    W = np.vstack([np.eye(10)[0], np.eye(10)[0] + 1e-6 * np.eye(10)[1]])
    net = TwoLayerNet([1.0, 1.0], W, RELU)
    assert net.kappa > 1e5
    batch = sample_planted(net, 20_000, np.random.default_rng(0))
    report = exact_recover(batch, 2, RecoveryConfig(gd_max_iter=200), rng=np.random.default_rng(1))
    assert report.status in ("degraded", "failed")


def test_gradient_zero_at_interpolant():
    net = _planted()
    batch = sample_planted(net, 2_000, np.random.default_rng(0))
    loss, grad = empirical_loss_and_gradient(net, batch.inside())
    assert loss == 0.0 and np.linalg.norm(grad) <= 1e-10


def test_gradient_single_sample_closed_form():
    w = np.array([1.0, 2.0])
    x = np.array([0.5, 0.25])
    y = 0.3
    net = TwoLayerNet([1.0], w[None], RELU)
    loss, grad = empirical_loss_and_gradient(net, SampleBatch(x[None], np.array([y])))
    assert loss == pytest.approx(0.5 * (w @ x - y) ** 2)
    assert np.allclose(grad[0], (w @ x - y) * x)


def _central_difference(net, batch, h=1e-6):
    fd = np.zeros_like(net.W)
    for idx in np.ndindex(*net.W.shape):
        Wp, Wm = net.W.copy(), net.W.copy()
        Wp[idx] += h
        Wm[idx] -= h
        lp, _ = empirical_loss_and_gradient(TwoLayerNet(net.v, Wp, net.activation), batch)
        lm, _ = empirical_loss_and_gradient(TwoLayerNet(net.v, Wm, net.activation), batch)
        fd[idx] = (lp - lm) / (2 * h)
    return fd


@pytest.mark.parametrize("act", [Activation("squared_relu"), Activation("power", degree=3)],
                         ids=lambda a: a.kind)
@given(seed=st.integers(0, 10_000))
def test_gradient_matches_finite_differences(act, seed):
    rng = np.random.default_rng(seed)
    net = TwoLayerNet(rng.choice([-1.0, 1.0], 2), rng.standard_normal((2, 3)), act)
    batch = SampleBatch(rng.standard_normal((30, 3)), rng.standard_normal(30))
    _, grad = empirical_loss_and_gradient(net, batch)
    fd = _central_difference(net, batch)
    assert np.linalg.norm(grad - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-8)


def test_refine_empty_batch_raises():
    with pytest.raises(ValueError):
        refine(_planted(), SampleBatch(np.zeros((0, 10)), np.zeros(0)), RecoveryConfig())
