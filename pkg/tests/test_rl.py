from __future__ import annotations

import math

import numpy as np
import pytest

from momrl.instances import (ActionIndependentMdp, PlantedQMdp, make_action_independent,
                             make_planted_q, random_net)
from momrl.mdp import SimulatorAccess, TabularMdp, evaluate_policy_exact, exact_dp_solve
from momrl.recovery import RecoveryConfig, TwoLayerNet
from momrl.rl import (LevelFailure, NeuralRlConfig, diagnose, explore_level, learn_bellman_complete,
                      learn_deterministic, learn_policy_complete, learn_with_gap, measure_gap,
                      telescoping_holds)


def test_config_validation():
    with pytest.raises(ValueError):
        NeuralRlConfig(n=0)
    with pytest.raises(ValueError):
        NeuralRlConfig(eps=0.0)
    assert NeuralRlConfig(eps=0.0, rho=0.5).level_precision(2, "gap") == 0.125
    assert NeuralRlConfig(eps=0.2).level_precision(2, "policy_complete") == pytest.approx(0.05)


def test_gap_variant_needs_rho():
    mdp = make_planted_q(np.random.default_rng(0), H=1)
    with pytest.raises(ValueError):
        learn_with_gap(mdp, NeuralRlConfig(n=1000), 0)


def test_explore_last_level_labels_are_rewards():
    mdp = make_planted_q(np.random.default_rng(0), H=2)
    access = SimulatorAccess(mdp)
    rng = np.random.default_rng(1)
    batch = explore_level(access, 2, None, 2_000, 10 * math.sqrt(10), rng)
    inside = ~batch.truncated
    assert np.allclose(batch.y[inside], mdp.nets[1](batch.x[inside]), atol=1e-12)
    assert access.queries.tolist() == [0, int(inside.sum())]


def test_explore_truncation_fraction():
    mdp = make_planted_q(np.random.default_rng(0), H=1)
    batch = explore_level(SimulatorAccess(mdp), 1, None, 100_000, 10 * math.sqrt(10),
                          np.random.default_rng(0))
    assert batch.truncated.mean() <= 1e-6


def test_explore_backup_with_zero_continuation():
    mdp = make_action_independent(np.random.default_rng(0), H=2)
    batch = explore_level(SimulatorAccess(mdp), 1, None, 1_000, 100.0, np.random.default_rng(1),
                          label_mode="backup", v_next=np.zeros(mdp.n_states))
    assert np.allclose(batch.y, mdp.nets[0](batch.x), atol=1e-12)
    with pytest.raises(ValueError):
        explore_level(SimulatorAccess(mdp), 1, None, 10, 1.0, np.random.default_rng(0), "other")


def test_measure_gap_examples():
    two = TabularMdp(np.tile([1.0, 0.3], (1, 3, 1)), np.full((1, 3, 2, 3), 1 / 3))
    assert measure_gap(two) == pytest.approx(0.7)
    flat = TabularMdp(np.full((1, 2, 3), 0.5), np.full((1, 2, 3, 2), 0.5))
    assert measure_gap(flat) == math.inf


def test_measure_gap_matches_enumeration():
    mdp = make_planted_q(np.random.default_rng(2), H=2, S=3, A=5)
    sol = exact_dp_solve(mdp)
    gaps = [sol.V[h, s] - sol.Q[h, s, a] for h in range(2) for s in range(3) for a in range(5)
            if sol.V[h, s] - sol.Q[h, s, a] > 1e-12]
    assert measure_gap(mdp) == pytest.approx(min(gaps))


def test_planted_instance_satisfies_bellman():
    mdp = make_planted_q(np.random.default_rng(3))
    sol = exact_dp_solve(mdp)
    for h in (1, 2):
        q = mdp.nets[h - 1](mdp.candidate_features(h).reshape(-1, mdp.d)).reshape(4, 16)
        assert np.allclose(sol.Q[h - 1], q, atol=1e-12)


def test_gap_instance_generator():
    mdp = make_planted_q(np.random.default_rng(4), min_gap=0.5)
    assert measure_gap(mdp) >= 0.5


def test_deterministic_single_level():
    mdp = make_planted_q(np.random.default_rng(5), H=1)
    stack = learn_deterministic(mdp, NeuralRlConfig(n=200_000), 0)
    _, V = evaluate_policy_exact(mdp, stack.policy)
    assert V[0, 0] == exact_dp_solve(mdp).v1()
    assert stack.levels_done == [1]


def test_deterministic_rejects_stochastic():
    mdp = make_action_independent(np.random.default_rng(0), H=1)
    with pytest.raises(ValueError):
        learn_deterministic(mdp, NeuralRlConfig(n=1000), 0)


def test_rank_deficient_level_is_named():
    mdp = make_planted_q(np.random.default_rng(6), H=2, rank_deficient_level=2)
    with pytest.raises(LevelFailure) as info:
        learn_deterministic(mdp, NeuralRlConfig(n=50_000, recovery=RecoveryConfig(gd_max_iter=200)), 0)
    assert info.value.level == 2


def test_policy_complete_single_level_and_accounting():
    mdp = make_action_independent(np.random.default_rng(7), H=1)
    cfg = NeuralRlConfig(n=100_000, eps=0.2)
    stack = learn_policy_complete(mdp, cfg, 1)
    assert stack.queries[0] == cfg.n - stack.truncated[0]
    assert np.array_equal(stack.policy.table[0], np.argmax(stack.q_tables[0], axis=1))
    diag = diagnose(stack, mdp, probes=1000)
    assert diag["suboptimality"] <= 0.2


def test_policy_complete_vacuous_eps():
    mdp = make_action_independent(np.random.default_rng(8), H=2)
    stack = learn_policy_complete(mdp, NeuralRlConfig(n=50_000, eps=5.0, allow_degraded=True), 2)
    assert stack.levels_done == [2, 1]
    assert np.array_equal(stack.policy.table, np.argmax(stack.q_tables, axis=2))
    assert stack.queries.sum() == 2 * 50_000 - stack.truncated.sum()


def test_bellman_zero_reward_instance():
    rng = np.random.default_rng(9)
    base = make_action_independent(rng, H=2)
    w = np.eye(10)[:1]
    zero = TwoLayerNet([1.0, -1.0], np.vstack([w, w]))
    mdp = ActionIndependentMdp([zero, zero], base.offsets, base.candidate_actions, base.next_law)
    stack = learn_bellman_complete(mdp, NeuralRlConfig(n=200_000, eps=0.2, allow_degraded=True), 3)
    assert np.abs(stack.q_tables).max() <= 0.2
    assert diagnose(stack, mdp, probes=0)["suboptimality"] == 0.0


def test_gap_violation_flag():
    mdp = make_planted_q(np.random.default_rng(10), H=1, min_gap=0.5)
    stack = learn_with_gap(mdp, NeuralRlConfig(n=200_000, rho=50.0, allow_degraded=True), 0)
    assert stack.gap_violation is True and stack.measured_gap >= 0.5
    ok = learn_with_gap(mdp, NeuralRlConfig(n=200_000, rho=0.5), 0)
    assert ok.gap_violation is False
    _, V = evaluate_policy_exact(mdp, ok.policy)
    assert V[0, 0] == exact_dp_solve(mdp).v1()


def test_telescoping_check():
    from momrl.rl import LevelDiagnostics
    lv = lambda h, sub, err: LevelDiagnostics(h, err, err, sub, None, True)
    good = {"levels": [lv(1, 0.15, 0.05), lv(2, 0.05, 0.05)]}
    assert telescoping_holds(good, 0.2, 2)
    bad = {"levels": [lv(1, 0.5, 0.05), lv(2, 0.05, 0.05)]}
    assert not telescoping_holds(bad, 0.2, 2)


def test_learning_is_deterministic():
    mdp = make_planted_q(np.random.default_rng(11), H=1)
    a = learn_deterministic(mdp, NeuralRlConfig(n=50_000), 7)
    b = learn_deterministic(mdp, NeuralRlConfig(n=50_000), 7)
    assert np.array_equal(a.q_tables, b.q_tables)
