"""Episodic MDPs over finite state sets with vector-valued actions.

Levels are numbered 1..H as in the usual episodic convention. Every MDP
carries a finite candidate action set used for planning; continuous actions
(any vector of the right length) may still be queried when the subclass
defines rewards and transitions for them.
"""

from __future__ import annotations

import csv
import json
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .rng import stream

DP_CAP = 1_000_000


class MdpError(RuntimeError):
    pass


class InvalidLevel(MdpError):
    pass


class AccessModeError(MdpError):
    pass


class PreimageUnavailable(MdpError):
    pass


class EnumerationCapExceeded(MdpError):
    pass


def _as_states(s, m: int | None = None) -> np.ndarray:
    s = np.atleast_1d(np.asarray(s, dtype=int))
    if m is not None and s.shape[0] == 1 and m > 1:
        s = np.repeat(s, m)
    return s


def _as_actions(a) -> np.ndarray:
    return np.atleast_2d(np.asarray(a, dtype=float))


class Mdp(ABC):
    """Finite-state episodic MDP. Subclasses fill in the vectorised maps."""

    horizon: int
    n_states: int
    initial_state: int = 0
    candidate_actions: np.ndarray
    feature_bound: float = math.inf

    # -- maps every subclass provides ---------------------------------

    @abstractmethod
    def features(self, h: int, s, a) -> np.ndarray:
        """phi_h(s, a) for paired arrays of states and action vectors."""

    @abstractmethod
    def mean_reward(self, h: int, s, a) -> np.ndarray:
        ...

    @abstractmethod
    def transition_probs(self, h: int, s, a) -> np.ndarray:
        """Next-state distributions, one row per (s, a) pair."""

    # -- defaults -------------------------------------------------------

    @property
    def deterministic(self) -> bool:
        return False

    @property
    def n_actions(self) -> int:
        return self.candidate_actions.shape[0]

    def sample_reward(self, h: int, s, a, rng: np.random.Generator) -> np.ndarray:
        return self.mean_reward(h, s, a)

    def sample_next(self, h: int, s, a, rng: np.random.Generator) -> np.ndarray:
        probs = self.transition_probs(h, s, a)
        cdf = np.cumsum(probs, axis=1)
        u = rng.random(probs.shape[0])[:, None]
        return np.minimum((u >= cdf).sum(axis=1), self.n_states - 1)

    def preimage(self, h: int, x: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Some (s, a) with phi_h(s, a) = x, row by row."""
        raise PreimageUnavailable(f"{type(self).__name__} has no feature inverse")

    def feature_query(self, h: int, x: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Reward and next state for the pair found by ``preimage``."""
        s, a = self.preimage(h, x, rng)
        return self.sample_reward(h, s, a, rng), self.sample_next(h, s, a, rng)

    def check_level(self, h: int) -> None:
        if not 1 <= h <= self.horizon:
            raise InvalidLevel(f"level {h} outside 1..{self.horizon}")

    def candidate_index(self, a: np.ndarray) -> np.ndarray:
        """Index of each action row in the candidate set, or -1."""
        a = _as_actions(a)
        eq = np.all(np.isclose(a[:, None, :], self.candidate_actions[None, :, :],
                               rtol=0.0, atol=1e-12), axis=2)
        idx = np.where(eq.any(axis=1), eq.argmax(axis=1), -1)
        return idx

    def to_dict(self) -> dict:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# tabular MDP


class TabularMdp(Mdp):
    """Explicit tables: actions are the one-hot candidate vectors.

    ``reward_spread`` turns the reward at (h, s, a) into mean +/- spread with
    probability one half each.
    """

    def __init__(self, rewards, transitions, features=None, reward_spread=None,
                 initial_state: int = 0, seed: int = 0):
        R = np.asarray(rewards, dtype=float)
        P = np.asarray(transitions, dtype=float)
        if R.ndim != 3:
            raise ValueError("rewards must have shape (H, S, A)")
        H, S, A = R.shape
        if P.shape != (H, S, A, S):
            raise ValueError("transitions must have shape (H, S, A, S)")
        if np.any(P < -1e-12) or not np.allclose(P.sum(axis=3), 1.0, atol=1e-9):
            raise ValueError("transition rows must be probability vectors")
        self.R = R
        self.P = np.clip(P, 0.0, None)
        self.spread = np.zeros_like(R) if reward_spread is None else np.asarray(reward_spread, float)
        if self.spread.shape != R.shape or np.any(self.spread < 0):
            raise ValueError("reward_spread must be non-negative with shape (H, S, A)")
        self.horizon, self.n_states = H, S
        self.initial_state = int(initial_state)
        self.candidate_actions = np.eye(A)
        self.phi = (np.broadcast_to(np.eye(S * A).reshape(S, A, S * A), (H, S, A, S * A)).copy()
                    if features is None else np.asarray(features, dtype=float))
        self.feature_bound = float(np.max(np.linalg.norm(self.phi, axis=-1)))
        self.seed = seed
        self._validate_returns()

    def _validate_returns(self) -> None:
        lo_r, hi_r = self.R - self.spread, self.R + self.spread
        hi = np.zeros(self.n_states)
        lo = np.zeros(self.n_states)
        for h in range(self.horizon - 1, -1, -1):
            hi = np.max(hi_r[h] + self.P[h] @ hi, axis=1)
            lo = np.min(lo_r[h] + self.P[h] @ lo, axis=1)
        if np.min(lo_r) < 0 or np.max(hi) > self.horizon + 1e-12:
            raise ValueError("rewards must be non-negative with every return in [0, H]")

    @property
    def deterministic(self) -> bool:
        return bool(np.all(np.isclose(self.P.max(axis=3), 1.0)))

    def _ai(self, a) -> np.ndarray:
        idx = self.candidate_index(a)
        if np.any(idx < 0):
            raise ValueError("tabular MDPs only accept candidate (one-hot) actions")
        return idx

    def features(self, h, s, a):
        self.check_level(h)
        ai = self._ai(a)
        return self.phi[h - 1, _as_states(s, ai.shape[0]), ai]

    def mean_reward(self, h, s, a):
        self.check_level(h)
        ai = self._ai(a)
        return self.R[h - 1, _as_states(s, ai.shape[0]), ai]

    def sample_reward(self, h, s, a, rng):
        self.check_level(h)
        ai = self._ai(a)
        s = _as_states(s, ai.shape[0])
        sign = np.where(rng.random(ai.shape[0]) < 0.5, -1.0, 1.0)
        return self.R[h - 1, s, ai] + sign * self.spread[h - 1, s, ai]

    def transition_probs(self, h, s, a):
        self.check_level(h)
        ai = self._ai(a)
        return self.P[h - 1, _as_states(s, ai.shape[0]), ai]

    def to_dict(self) -> dict:
        return {"schema": "momrl.mdp/1", "type": "tabular", "seed": self.seed,
                "initial_state": self.initial_state, "rewards": self.R.tolist(),
                "reward_spread": self.spread.tolist(), "transitions": self.P.tolist(),
                "features": self.phi.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "TabularMdp":
        return cls(data["rewards"], data["transitions"], data.get("features"),
                   data.get("reward_spread"), data.get("initial_state", 0), data.get("seed", 0))


def deterministic_chain(rewards, next_state) -> TabularMdp:
    """Tabular MDP with P(next_state[h, s, a] | s, a) = 1."""
    R = np.asarray(rewards, dtype=float)
    nxt = np.asarray(next_state, dtype=int)
    H, S, A = R.shape
    P = np.zeros((H, S, A, S))
    hh, ss, aa = np.meshgrid(range(H), range(S), range(A), indexing="ij")
    P[hh, ss, aa, nxt] = 1.0
    return TabularMdp(R, P)


# ---------------------------------------------------------------------------
# policies and trajectories


@dataclass(frozen=True)
class Policy:
    """Deterministic policy as a (H, S) table of candidate-action indices."""

    table: np.ndarray
    candidate_actions: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.table, dtype=int)
        if t.ndim != 2:
            raise ValueError("policy table must be (H, S)")
        if np.any(t < 0) or np.any(t >= self.candidate_actions.shape[0]):
            raise ValueError("policy emits an action outside the candidate set")
        object.__setattr__(self, "table", t)

    @property
    def horizon(self) -> int:
        return self.table.shape[0]

    def index(self, h: int, s) -> np.ndarray:
        return self.table[h - 1, _as_states(s)]

    def action(self, h: int, s) -> np.ndarray:
        return self.candidate_actions[self.index(h, s)]


@dataclass
class Trajectory:
    start_level: int
    states: list[int] = field(default_factory=list)
    actions: list[np.ndarray] = field(default_factory=list)
    action_ids: list[int] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    terminal: bool = False

    @property
    def total(self) -> float:
        return float(sum(self.rewards))

    def __len__(self) -> int:
        return len(self.rewards)

    def records(self, episode: int) -> list[dict]:
        return [{"episode": episode, "level": self.start_level + i, "state": s,
                 "action": aid, "reward": r}
                for i, (s, aid, r) in enumerate(zip(self.states, self.action_ids, self.rewards))]


def write_trajectory_log(path: str | Path, trajectories: Sequence[Trajectory]) -> None:
    """CSV with one row per step: episode, level, state, action, reward."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["episode", "level", "state", "action", "reward"])
        w.writeheader()
        for ep, traj in enumerate(trajectories):
            w.writerows(traj.records(ep))


# ---------------------------------------------------------------------------
# simulator access


@dataclass
class SimulatorAccess:
    """Query surface with per-level counters.

    ``queries[h-1]`` counts (h, s, a)-addressed generative queries, ``steps``
    counts every simulated transition at that level (rollout tails included)
    and ``episodes`` counts episodes started from the initial state.
    """

    mdp: Mdp
    mode: str = "generative"
    seed: int = 0
    queries: np.ndarray = field(init=False)
    steps: np.ndarray = field(init=False)
    episodes: int = field(init=False, default=0)

    def __post_init__(self) -> None:
        if self.mode not in ("generative", "online"):
            raise ValueError("mode must be 'generative' or 'online'")
        self.queries = np.zeros(self.mdp.horizon, dtype=np.int64)
        self.steps = np.zeros(self.mdp.horizon, dtype=np.int64)

    def _need_generative(self) -> None:
        if self.mode != "generative":
            raise AccessModeError("state-action queries need generative access")

    def _step(self, h: int, s, a, rng) -> tuple[np.ndarray, np.ndarray]:
        self.mdp.check_level(h)
        a = _as_actions(a)
        s = _as_states(s, a.shape[0])
        r = self.mdp.sample_reward(h, s, a, rng)
        nxt = self.mdp.sample_next(h, s, a, rng)
        self.steps[h - 1] += a.shape[0]
        return r, nxt

    def query(self, h: int, s, a, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised generative query for paired states and actions."""
        self._need_generative()
        self.mdp.check_level(h)
        r, nxt = self._step(h, s, a, rng)
        self.queries[h - 1] += r.shape[0]
        return r, nxt

    def generative_query(self, h: int, s: int, a, rng: np.random.Generator) -> tuple[float, int]:
        r, nxt = self.query(h, [s], _as_actions(a), rng)
        return float(r[0]), int(nxt[0])

    def query_feature(self, h: int, x: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Generative query at feature points through the MDP's inverse map."""
        self._need_generative()
        self.mdp.check_level(h)
        x = np.atleast_2d(x)
        r, nxt = self.mdp.feature_query(h, x, rng)
        self.queries[h - 1] += x.shape[0]
        self.steps[h - 1] += x.shape[0]
        return r, nxt

    def tail_returns(self, h: int, states: np.ndarray, tail: Policy | None,
                     rng: np.random.Generator) -> np.ndarray:
        """Sum of rewards from level h to H following ``tail`` (vectorised)."""
        total = np.zeros(len(states))
        s = np.asarray(states, dtype=int)
        for level in range(h, self.mdp.horizon + 1):
            r, s = self._step(level, s, tail.action(level, s), rng)
            total += r
        return total

    def rollout(self, h: int, s: int, a, tail: Policy | None, rng: np.random.Generator,
                prefix: Sequence[np.ndarray] | None = None) -> Trajectory:
        """Trajectory starting with (s, a) at level h, then following ``tail``.

        In online mode ``prefix`` lists the actions for levels 1..h-1 and must
        lead from the initial state to ``s``.
        """
        self.mdp.check_level(h)
        if h < self.mdp.horizon and tail is None:
            raise ValueError("a tail policy is required below the last level")
        traj = Trajectory(start_level=h)
        if self.mode == "online":
            self.episodes += 1
            cur = self.mdp.initial_state
            if prefix is None or len(prefix) != h - 1:
                raise AccessModeError("online rollouts need the h-1 prefix actions")
            for level, pa in enumerate(prefix, start=1):
                _, nxt = self._step(level, [cur], pa, rng)
                cur = int(nxt[0])
            if cur != s:
                raise AccessModeError(f"prefix reaches state {cur}, not {s}")
            r, nxt = self._step(h, [s], a, rng)
        else:
            r, nxt = self.query(h, [s], a, rng)
        a = _as_actions(a)[0]
        traj.states.append(int(s))
        traj.actions.append(a)
        traj.action_ids.append(int(self.mdp.candidate_index(a)[0]))
        traj.rewards.append(float(r[0]))
        cur = int(nxt[0])
        for level in range(h + 1, self.mdp.horizon + 1):
            act = tail.action(level, cur)
            r, nxt = self._step(level, [cur], act, rng)
            traj.states.append(cur)
            traj.actions.append(act[0])
            traj.action_ids.append(int(tail.index(level, cur)[0]))
            traj.rewards.append(float(r[0]))
            cur = int(nxt[0])
        traj.terminal = True
        return traj

    def run_episode(self, policy: Policy | Callable[[int, int], np.ndarray],
                    rng: np.random.Generator) -> Trajectory:
        """Full episode from the initial state; allowed in both modes."""
        self.episodes += 1
        traj = Trajectory(start_level=1)
        cur = self.mdp.initial_state
        for level in range(1, self.mdp.horizon + 1):
            if isinstance(policy, Policy):
                act, aid = policy.action(level, cur)[0], int(policy.index(level, cur)[0])
            else:
                act = np.asarray(policy(level, cur), dtype=float)
                aid = int(self.mdp.candidate_index(act)[0])
            r, nxt = self._step(level, [cur], act, rng)
            traj.states.append(cur)
            traj.actions.append(act)
            traj.action_ids.append(aid)
            traj.rewards.append(float(r[0]))
            cur = int(nxt[0])
        traj.terminal = True
        return traj


# ---------------------------------------------------------------------------
# planning oracles


@dataclass
class DpSolution:
    Q: np.ndarray          # (H, S, A)
    V: np.ndarray          # (H + 1, S), last row zero
    policy: Policy

    def v1(self, s: int | None = None) -> float:
        return float(self.V[0, 0 if s is None else s])


def _check_cap(mdp: Mdp, cap: int) -> None:
    size = mdp.n_states * mdp.n_actions * mdp.horizon
    if size > cap:
        raise EnumerationCapExceeded(f"|S||A|H = {size} exceeds cap {cap}")


def level_tables(mdp: Mdp, h: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean rewards (S, A) and transition tensor (S, A, S) at level h."""
    S, A = mdp.n_states, mdp.n_actions
    ss = np.repeat(np.arange(S), A)
    aa = np.tile(mdp.candidate_actions, (S, 1))
    R = mdp.mean_reward(h, ss, aa).reshape(S, A)
    P = mdp.transition_probs(h, ss, aa).reshape(S, A, S)
    return R, P


def first_argmax(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """argmax with ties resolved toward the lowest index."""
    return np.argmax(values, axis=axis)


def exact_dp_solve(mdp: Mdp, cap: int = DP_CAP) -> DpSolution:
    """Backward induction over every state and candidate action."""
    _check_cap(mdp, cap)
    H, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    Q = np.zeros((H, S, A))
    V = np.zeros((H + 1, S))
    for h in range(H, 0, -1):
        R, P = level_tables(mdp, h)
        Q[h - 1] = R + P @ V[h]
        V[h - 1] = Q[h - 1].max(axis=1)
    table = first_argmax(Q, axis=2)
    return DpSolution(Q, V, Policy(table, mdp.candidate_actions))


def evaluate_policy_exact(mdp: Mdp, policy: Policy, cap: int = DP_CAP) -> tuple[np.ndarray, np.ndarray]:
    """Q^pi (H, S, A) and V^pi (H + 1, S) by backward recursion."""
    _check_cap(mdp, cap)
    H, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    Q = np.zeros((H, S, A))
    V = np.zeros((H + 1, S))
    for h in range(H, 0, -1):
        R, P = level_tables(mdp, h)
        Q[h - 1] = R + P @ V[h]
        V[h - 1] = Q[h - 1][np.arange(S), policy.table[h - 1]]
    return Q, V


def bellman_residual(mdp: Mdp, Q: np.ndarray) -> float:
    """Max-norm violation of the optimality recursion by a (H, S, A) table."""
    H = mdp.horizon
    worst = 0.0
    for h in range(1, H + 1):
        R, P = level_tables(mdp, h)
        nxt = Q[h].max(axis=1) if h < H else np.zeros(mdp.n_states)
        worst = max(worst, float(np.max(np.abs(Q[h - 1] - (R + P @ nxt)))))
    return worst


def greedy_policy(q_functions, n_states: int, candidate_actions: np.ndarray) -> Policy:
    """Greedy candidate action per (level, state), lowest index on ties.

    ``q_functions`` is either an (H, S, A) array or a list of callables
    q_h(states, actions) evaluated on paired arrays.
    """
    A = np.asarray(candidate_actions)
    if A.shape[0] == 0:
        raise ValueError("empty action set")
    if isinstance(q_functions, np.ndarray):
        return Policy(first_argmax(q_functions, axis=2), A)
    ss = np.repeat(np.arange(n_states), A.shape[0])
    aa = np.tile(A, (n_states, 1))
    table = [first_argmax(np.asarray(q(ss, aa)).reshape(n_states, A.shape[0]), axis=1)
             for q in q_functions]
    return Policy(np.array(table), A)


@dataclass
class PolicyValue:
    mean: float
    stderr: float
    exact: bool
    n_episodes: int


def evaluate_policy(mdp: Mdp, policy: Policy, n_episodes: int = 1000,
                    rng: np.random.Generator | int | None = None, method: str = "auto",
                    cap: int = DP_CAP) -> PolicyValue:
    """Value of ``policy`` from the initial state.

    ``auto`` enumerates when the MDP fits under the cap, otherwise runs
    ``n_episodes`` Monte Carlo episodes; episode i draws from its own stream.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    size = mdp.n_states * mdp.n_actions * mdp.horizon
    if method == "exact" or (method == "auto" and size <= cap):
        _, V = evaluate_policy_exact(mdp, policy, cap)
        return PolicyValue(float(V[0, mdp.initial_state]), 0.0, True, 0)
    seed = rng if isinstance(rng, (int, np.integer)) else (
        int(rng.integers(2 ** 63)) if rng is not None else 0)
    access = SimulatorAccess(mdp, "online", seed=int(seed))
    returns = np.array([access.run_episode(policy, stream(int(seed), "episode", i)).total
                        for i in range(n_episodes)])
    se = float(returns.std(ddof=1) / math.sqrt(n_episodes)) if n_episodes > 1 else 0.0
    return PolicyValue(float(returns.mean()), se, False, n_episodes)


# ---------------------------------------------------------------------------
# serialization


def save_mdp(mdp: Mdp, path: str | Path) -> None:
    Path(path).write_text(json.dumps(mdp.to_dict(), indent=1, sort_keys=True))


def load_mdp(path: str | Path) -> Mdp:
    data = json.loads(Path(path).read_text())
    if data.get("schema") != "momrl.mdp/1":
        raise ValueError("unrecognised MDP schema")
    kind = data["type"]
    if kind == "tabular":
        return TabularMdp.from_dict(data)
    from . import instances, poly  # local import: those modules build on this one
    if kind in instances.INSTANCE_TYPES:
        return instances.INSTANCE_TYPES[kind].from_dict(data)
    if kind in poly.INSTANCE_TYPES:
        return poly.INSTANCE_TYPES[kind].from_dict(data)
    raise ValueError(f"unknown MDP type {kind!r}")
