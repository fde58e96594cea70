"""Level-wise RL learners that reduce planning to planted-network recovery.

All four learners sweep h = H, ..., 1. At each level they draw Gaussian
feature points, label the in-radius ones through the simulator, recover a
network from the labelled batch, and act greedily on it over the candidate
actions. They differ only in how labels are formed and how the network is
fitted:

    variant          labels                 recovery        additive offset
    deterministic    rollout return         exact           no
    policy_complete  rollout return         moment-based    yes
    bellman          r + V_hat(s')          moment-based    yes
    gap              rollout return         moment-based    no
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .activations import Activation
from .mdp import (DP_CAP, EnumerationCapExceeded, Mdp, Policy, SimulatorAccess, evaluate_policy_exact, exact_dp_solve,
                  first_argmax, level_tables)
from .moments import SampleBatch
from .recovery import RecoveryConfig, RecoveryReport, TwoLayerNet, exact_recover, noisy_recover
from .rng import stream

VARIANTS = ("deterministic", "policy_complete", "bellman", "gap")


class LevelFailure(RuntimeError):
    def __init__(self, level: int, stage: str, report: RecoveryReport | None = None):
        reason = report.reason if report is not None else ""
        super().__init__(f"level {level}: {stage} failed {reason}".strip())
        self.level = level
        self.stage = stage
        self.report = report


@dataclass
class NeuralRlConfig:
    n: int = 200_000
    k: int = 2
    eps: float = 0.2
    rho: float | None = None
    delta: float | None = None
    noiseless: bool | None = None     # None: exact recovery only for the deterministic variant
    fit_offset: bool | None = None
    allow_degraded: bool = False
    activation: Activation = field(default_factory=Activation)
    recovery: RecoveryConfig = field(default_factory=RecoveryConfig)

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.eps <= 0 and (self.rho is None or self.rho <= 0):
            raise ValueError("need eps > 0 or rho > 0")
        radius = self.recovery.radius
        if self.delta is not None and radius is not None and self.delta > radius:
            raise ValueError("exploration radius exceeds the truncation radius")

    def level_precision(self, H: int, variant: str) -> float:
        if variant == "gap":
            return self.rho / 4.0
        return self.eps / (2.0 * H)


@dataclass
class LearnedValueStack:
    variant: str
    horizon: int
    nets: list[TwoLayerNet | None]
    offsets: np.ndarray
    q_tables: np.ndarray              # (H, S, A) recovered Q over candidates
    policy: Policy
    reports: list[RecoveryReport | None]
    queries: np.ndarray               # labelled queries per level
    truncated: np.ndarray             # out-of-radius draws per level
    extrapolated: np.ndarray          # candidate features outside the ball
    levels_done: list[int] = field(default_factory=list)
    measured_gap: float | None = None
    gap_violation: bool | None = None

    @property
    def v_hat(self) -> np.ndarray:
        V = np.zeros((self.horizon + 1, self.q_tables.shape[1]))
        V[:-1] = self.q_tables.max(axis=2)
        return V

    def q_at_features(self, h: int, x: np.ndarray) -> np.ndarray:
        return self.nets[h - 1](x) + self.offsets[h - 1]


# ---------------------------------------------------------------------------
# exploration


def explore_level(access: SimulatorAccess, h: int, tail: Policy | None, n: int, delta: float,
                  rng: np.random.Generator, label_mode: str = "rollout",
                  v_next: np.ndarray | None = None) -> SampleBatch:
    """n Gaussian feature draws labelled at level h; out-of-ball draws get 0."""
    mdp = access.mdp
    mdp.check_level(h)
    if label_mode not in ("rollout", "backup"):
        raise ValueError("label_mode must be 'rollout' or 'backup'")
    X = rng.standard_normal((n, mdp.d))
    inside = np.linalg.norm(X, axis=1) <= delta
    y = np.zeros(n)
    if inside.any():
        s, a = mdp.preimage(h, X[inside], rng)
        r, nxt = access.query(h, s, a, rng)
        if label_mode == "rollout":
            if h < mdp.horizon:
                r = r + access.tail_returns(h + 1, nxt, tail, rng)
        else:
            cont = np.zeros(mdp.n_states) if v_next is None else np.asarray(v_next)
            r = r + cont[nxt]
        y[inside] = r
    return SampleBatch(X, y, radius=delta, truncated=~inside)


# ---------------------------------------------------------------------------
# learners


def _recover(batch: SampleBatch, config: NeuralRlConfig, exact: bool, offset: bool,
             rng: np.random.Generator, precision: float) -> tuple[RecoveryReport, float]:
    rcfg = config.recovery
    rcfg = RecoveryConfig(**{**rcfg.__dict__, "eps": min(max(precision, 1e-6), 0.999)})
    if exact:
        report = exact_recover(batch, config.k, rcfg, rng, config.activation)
    else:
        report = noisy_recover(batch, config.k, rcfg, rng, config.activation, center=offset)
    c = 0.0
    if offset and report.net is not None:
        inside = ~batch.truncated
        c = float(np.mean(batch.y[inside] - report.net(batch.x[inside])))
    return report, c


def _learn(mdp: Mdp, config: NeuralRlConfig, rng: np.random.Generator | int,
           variant: str) -> LearnedValueStack:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "gap" and (config.rho is None or config.rho <= 0):
        raise ValueError("the gap variant needs rho > 0")
    seed = rng if isinstance(rng, (int, np.integer)) else int(rng.integers(2 ** 63))
    H, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    delta = config.delta if config.delta is not None else 10.0 * math.sqrt(mdp.d)
    exact = config.noiseless if config.noiseless is not None else variant == "deterministic"
    offset = config.fit_offset if config.fit_offset is not None else variant in (
        "policy_complete", "bellman")
    label_mode = "backup" if variant == "bellman" else "rollout"
    precision = config.level_precision(H, variant)
    access = SimulatorAccess(mdp, "generative", seed=int(seed))
    nets: list[TwoLayerNet | None] = [None] * H
    offsets = np.zeros(H)
    q_tables = np.zeros((H, S, A))
    table = np.zeros((H, S), dtype=int)
    reports: list[RecoveryReport | None] = [None] * H
    truncated = np.zeros(H, dtype=int)
    extrap = np.zeros(H, dtype=int)
    done: list[int] = []
    v_next = np.zeros(S)
    for h in range(H, 0, -1):
        tail = Policy(table, mdp.candidate_actions) if h < H else None
        batch = explore_level(access, h, tail, config.n, delta, stream(seed, "explore", h),
                              label_mode, v_next)
        truncated[h - 1] = int(batch.truncated.sum())
        report, c = _recover(batch, config, exact, offset, stream(seed, "recover", h), precision)
        reports[h - 1] = report
        if report.net is None or report.status == "failed" or (
                report.status == "degraded" and not config.allow_degraded):
            raise LevelFailure(h, "exact recovery" if exact else "moment recovery", report)
        nets[h - 1] = report.net
        offsets[h - 1] = c
        phi = mdp.candidate_features(h)
        extrap[h - 1] = int(np.sum(np.linalg.norm(phi, axis=2) > delta))
        q = report.net(phi.reshape(-1, mdp.d)).reshape(S, A) + c
        q_tables[h - 1] = q
        # argmax over actions, lowest index on ties
        table[h - 1] = first_argmax(q, axis=1)
        v_next = q.max(axis=1)
        done.append(h)
    return LearnedValueStack(variant, H, nets, offsets, q_tables,
                             Policy(table, mdp.candidate_actions), reports,
                             access.queries.copy(), truncated, extrap, done)


def learn_deterministic(mdp: Mdp, config: NeuralRlConfig, rng) -> LearnedValueStack:
    """Rollout labels with exact recovery at each level."""
    if not mdp.deterministic:
        raise ValueError("learn_deterministic needs deterministic transitions")
    return _learn(mdp, config, rng, "deterministic")


def learn_policy_complete(mdp: Mdp, config: NeuralRlConfig, rng) -> LearnedValueStack:
    """Rollout labels with moment-based recovery at precision eps / 2H."""
    return _learn(mdp, config, rng, "policy_complete")


def learn_bellman_complete(mdp: Mdp, config: NeuralRlConfig, rng) -> LearnedValueStack:
    """One-step backup labels r + V_hat_{h+1}(s') with moment-based recovery."""
    return _learn(mdp, config, rng, "bellman")


def learn_with_gap(mdp: Mdp, config: NeuralRlConfig, rng) -> LearnedValueStack:
    """Rollout labels with moment-based recovery at precision rho / 4.

    On enumerable instances the true gap is measured and a violation flagged.
    """
    stack = _learn(mdp, config, rng, "gap")
    try:
        stack.measured_gap = measure_gap(mdp)
    except EnumerationCapExceeded:
        return stack
    stack.gap_violation = stack.measured_gap < config.rho
    return stack


# ---------------------------------------------------------------------------
# oracle-side diagnostics


def measure_gap(mdp: Mdp, tol: float = 1e-12, cap: int = DP_CAP) -> float:
    """Smallest V*(s) - Q*(s, a) over actions that are not optimal."""
    sol = exact_dp_solve(mdp, cap)
    gaps = sol.V[:-1, :, None] - sol.Q
    sub = gaps[gaps > tol]
    return float(sub.min()) if sub.size else math.inf


@dataclass
class LevelDiagnostics:
    level: int
    policy_q_error: float       # max |Q_hat - Q^{pi_{h+1..H}}| over states and candidates
    optimal_q_error: float      # max |Q_hat - Q*| over states and candidates
    suboptimality: float        # max_s V*_h(s) - V^pi_h(s)
    probe_error: float | None   # sup over probe features against the level target
    greedy_matches_oracle: bool


def diagnose(stack: LearnedValueStack, mdp: Mdp, probes: int = 10_000,
             rng: np.random.Generator | None = None, delta: float | None = None) -> dict[str, Any]:
    """Compare a learned stack with exact planning on an enumerable instance."""
    sol = exact_dp_solve(mdp)
    Qpi, Vpi = evaluate_policy_exact(mdp, stack.policy)
    H = mdp.horizon
    rng = rng if rng is not None else np.random.default_rng(0)
    delta = delta if delta is not None else 10.0 * math.sqrt(mdp.d)
    levels = []
    for h in range(1, H + 1):
        qh = stack.q_tables[h - 1]
        probe_err = None
        if probes and hasattr(mdp, "feature_q") and stack.nets[h - 1] is not None:
            X = rng.standard_normal((probes, mdp.d))
            X = X[np.linalg.norm(X, axis=1) <= delta]
            target_next = sol.V[h] if stack.variant in ("bellman", "deterministic", "gap") else Vpi[h]
            target = mdp.feature_q(h, X, target_next)
            probe_err = float(np.max(np.abs(stack.q_at_features(h, X) - target)))
        opt_sets = np.isclose(sol.Q[h - 1], sol.V[h - 1][:, None], rtol=0, atol=1e-9)
        chosen = stack.policy.table[h - 1]
        levels.append(LevelDiagnostics(
            level=h,
            policy_q_error=float(np.max(np.abs(qh - Qpi[h - 1]))),
            optimal_q_error=float(np.max(np.abs(qh - sol.Q[h - 1]))),
            suboptimality=float(np.max(sol.V[h - 1] - Vpi[h - 1])),
            probe_error=probe_err,
            greedy_matches_oracle=bool(np.all(opt_sets[np.arange(mdp.n_states), chosen]))))
    s0 = mdp.initial_state
    return {"v_star": float(sol.V[0, s0]), "v_pi": float(Vpi[0, s0]),
            "suboptimality": float(sol.V[0, s0] - Vpi[0, s0]), "levels": levels,
            "queries": stack.queries.tolist(), "total_queries": int(stack.queries.sum())}


def telescoping_holds(diag: dict, eps: float, H: int, tol: float = 1e-9) -> bool:
    """Check subopt_h <= (H - h + 1) eps / H + slack_h at every level.

    slack_h adds twice the excess of each later level's error over eps / 2H.
    """
    levels = {ld.level: ld for ld in diag["levels"]}
    for h in range(1, H + 1):
        slack = sum(2.0 * max(0.0, levels[l].policy_q_error - eps / (2 * H))
                    for l in range(h, H + 1))
        if levels[h].suboptimality > (H - h + 1) * eps / H + slack + tol:
            return False
    return True
