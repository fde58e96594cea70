"""Synthetic MDP families whose value functions are planted two-layer nets.

Every family here uses the feature map phi_h(s, a) = a + b_s with per-state
offsets b_s, so any feature point x has the preimage (s, x - b_s) for every
state s. Actions are arbitrary real vectors; planning uses a finite stored
candidate set.
"""

from __future__ import annotations

import math

import numpy as np

from .activations import Activation
from .mdp import Mdp, _as_actions, _as_states
from .recovery import TwoLayerNet
from .sampling import PositiveMeasureSet


class FeatureMdp(Mdp):
    def __init__(self, horizon: int, offsets, candidates, initial_state: int = 0, seed: int = 0):
        self.horizon = int(horizon)
        self.offsets = np.atleast_2d(np.asarray(offsets, dtype=float))
        self.n_states = self.offsets.shape[0]
        self.candidate_actions = np.atleast_2d(np.asarray(candidates, dtype=float))
        if self.candidate_actions.shape[1] != self.offsets.shape[1]:
            raise ValueError("actions and offsets must share the feature dimension")
        self.initial_state = int(initial_state)
        self.seed = seed
        phi = self.candidate_actions[None, :, :] + self.offsets[:, None, :]
        self.feature_bound = float(np.max(np.linalg.norm(phi, axis=2)))

    @property
    def d(self) -> int:
        return self.offsets.shape[1]

    def features(self, h, s, a):
        self.check_level(h)
        a = _as_actions(a)
        return a + self.offsets[_as_states(s, a.shape[0])]

    def preimage(self, h, x, rng):
        self.check_level(h)
        x = np.atleast_2d(x)
        s = rng.integers(self.n_states, size=x.shape[0])
        return s, x - self.offsets[s]

    def feature_region(self, h: int) -> PositiveMeasureSet:
        return PositiveMeasureSet.full_space(self.d)

    def state_action_image(self, h: int, s: int) -> PositiveMeasureSet:
        return PositiveMeasureSet.full_space(self.d)

    def action_for_feature(self, h: int, s: int, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(x) - self.offsets[s]

    def candidate_features(self, h: int) -> np.ndarray:
        """(S, A, d) features of every state paired with every candidate."""
        return self.candidate_actions[None, :, :] + self.offsets[:, None, :]

    def _base_dict(self) -> dict:
        return {"schema": "momrl.mdp/1", "horizon": self.horizon, "seed": self.seed,
                "initial_state": self.initial_state, "offsets": self.offsets.tolist(),
                "candidates": self.candidate_actions.tolist()}


class PlantedQMdp(FeatureMdp):
    """Deterministic MDP with Q*_h(s, a) = f_h(phi_h(s, a)) for planted nets f_h.

    Transitions are T_h(s, a) = argmax_s' <G_h[s'], a>; rewards are defined
    as f_h(phi) - V*_{h+1}(T_h(s, a)) so the Bellman recursion holds exactly
    over the candidate set.
    """

    def __init__(self, nets, offsets, candidates, G, initial_state: int = 0, seed: int = 0):
        super().__init__(len(nets), offsets, candidates, initial_state, seed)
        self.nets = list(nets)
        self.G = np.asarray(G, dtype=float)
        if self.G.shape != (self.horizon, self.n_states, self.d):
            raise ValueError("G must have shape (H, S, d)")
        self.v_star = np.zeros((self.horizon + 1, self.n_states))
        for h in range(self.horizon, 0, -1):
            q = self.nets[h - 1](self.candidate_features(h).reshape(-1, self.d))
            self.v_star[h - 1] = q.reshape(self.n_states, -1).max(axis=1)

    @property
    def deterministic(self) -> bool:
        return True

    def next_state(self, h, s, a):
        a = _as_actions(a)
        return np.argmax(a @ self.G[h - 1].T, axis=1)

    def mean_reward(self, h, s, a):
        self.check_level(h)
        phi = self.features(h, s, a)
        return self.nets[h - 1](phi) - self.v_star[h, self.next_state(h, s, a)]

    def transition_probs(self, h, s, a):
        self.check_level(h)
        nxt = self.next_state(h, s, a)
        P = np.zeros((nxt.shape[0], self.n_states))
        P[np.arange(nxt.shape[0]), nxt] = 1.0
        return P

    def sample_next(self, h, s, a, rng):
        self.check_level(h)
        return self.next_state(h, s, a)

    def feature_q(self, h: int, x: np.ndarray, v_next: np.ndarray | None = None) -> np.ndarray:
        """Q*_h as a function of the feature point (v_next is ignored)."""
        return self.nets[h - 1](x)

    def to_dict(self) -> dict:
        out = self._base_dict()
        out.update(type="planted_q", nets=[n.to_dict() for n in self.nets], G=self.G.tolist())
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PlantedQMdp":
        return cls([TwoLayerNet.from_dict(n) for n in data["nets"]], data["offsets"],
                   data["candidates"], data["G"], data["initial_state"], data["seed"])


class ActionIndependentMdp(FeatureMdp):
    """Rewards r_h = f_h(phi_h(s, a)); next state drawn from a fixed law p_h.

    Because the next-state law ignores (s, a), every Q^pi_h equals f_h plus a
    level constant, which keeps both completeness notions exact.
    """

    def __init__(self, nets, offsets, candidates, next_law, reward_noise: float = 0.0,
                 initial_state: int = 0, seed: int = 0):
        super().__init__(len(nets), offsets, candidates, initial_state, seed)
        self.nets = list(nets)
        self.next_law = np.asarray(next_law, dtype=float)
        if self.next_law.shape != (self.horizon, self.n_states):
            raise ValueError("next_law must have shape (H, S)")
        if not np.allclose(self.next_law.sum(axis=1), 1.0):
            raise ValueError("next_law rows must sum to one")
        self.reward_noise = float(reward_noise)

    @property
    def deterministic(self) -> bool:
        return bool(np.all(np.isclose(self.next_law.max(axis=1), 1.0)))

    def mean_reward(self, h, s, a):
        self.check_level(h)
        return self.nets[h - 1](self.features(h, s, a))

    def sample_reward(self, h, s, a, rng):
        r = self.mean_reward(h, s, a)
        if self.reward_noise > 0:
            r = r + self.reward_noise * rng.standard_normal(r.shape[0])
        return r

    def transition_probs(self, h, s, a):
        self.check_level(h)
        m = _as_actions(a).shape[0]
        return np.tile(self.next_law[h - 1], (m, 1))

    def feature_q(self, h: int, x: np.ndarray, v_next: np.ndarray) -> np.ndarray:
        """Q_h at feature points for continuation values v_next (length S)."""
        return self.nets[h - 1](x) + float(self.next_law[h - 1] @ v_next)

    def to_dict(self) -> dict:
        out = self._base_dict()
        out.update(type="action_independent", nets=[n.to_dict() for n in self.nets],
                   next_law=self.next_law.tolist(), reward_noise=self.reward_noise)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ActionIndependentMdp":
        return cls([TwoLayerNet.from_dict(n) for n in data["nets"]], data["offsets"],
                   data["candidates"], data["next_law"], data.get("reward_noise", 0.0),
                   data["initial_state"], data["seed"])


INSTANCE_TYPES = {"planted_q": PlantedQMdp, "action_independent": ActionIndependentMdp}


# ---------------------------------------------------------------------------
# generators


def random_net(rng: np.random.Generator, d: int, k: int, activation: Activation | None = None,
               norm_range: tuple[float, float] = (1.0, 2.0), signs: bool = True,
               rank_deficient: bool = False) -> TwoLayerNet:
    """Orthogonal row directions with norms drawn from ``norm_range``.

    ``rank_deficient`` copies the first row and its sign into every other row,
    so the copies add up instead of cancelling.
    """
    Q = np.linalg.qr(rng.standard_normal((d, k)))[0].T
    norms = rng.uniform(*norm_range, size=k)
    W = Q * norms[:, None]
    v = rng.choice([-1.0, 1.0], size=k) if signs else np.ones(k)
    if rank_deficient:
        W = np.repeat(W[:1], k, axis=0)
        v = np.repeat(v[:1], k)
    return TwoLayerNet(v, W, activation or Activation())


def make_planted_q(rng: np.random.Generator, d: int = 10, k: int = 2, H: int = 2, S: int = 4,
                   A: int = 16, offset_scale: float = 0.5, min_gap: float | None = None,
                   rank_deficient_level: int | None = None, max_proposals: int = 100_000,
                   activation: Activation | None = None) -> PlantedQMdp:
    """Planted-Q* instance.

    Q*_h(s, a) = f_h(a + b_s) does not depend on the transitions, so with
    ``min_gap`` candidates are accepted one at a time only if every (h, s)
    keeps its best value at least ``min_gap`` above the runner-up.
    """
    nets = [random_net(rng, d, k, activation, rank_deficient=(h + 1 == rank_deficient_level))
            for h in range(H)]
    offsets = offset_scale * rng.standard_normal((S, d))
    G = rng.standard_normal((H, S, d))
    if min_gap is None:
        return PlantedQMdp(nets, offsets, rng.standard_normal((A, d)), G)
    cands = np.zeros((0, d))
    values = np.zeros((H, S, 0))
    for _ in range(max_proposals):
        if cands.shape[0] == A:
            return PlantedQMdp(nets, offsets, cands, G)
        a = rng.standard_normal(d)
        q = np.stack([net(a + offsets) for net in nets])[:, :, None]
        trial = np.sort(np.concatenate([values, q], axis=2), axis=2)
        if trial.shape[2] < 2 or np.all(trial[:, :, -1] - trial[:, :, -2] >= min_gap):
            cands = np.vstack([cands, a])
            values = np.concatenate([values, q], axis=2)
    raise RuntimeError(f"could not place {A} candidates with gap >= {min_gap}")


def make_action_independent(rng: np.random.Generator, d: int = 10, k: int = 2, H: int = 2,
                            S: int = 4, A: int = 16, offset_scale: float = 0.5,
                            stochastic: bool = True, reward_noise: float = 0.0,
                            activation: Activation | None = None) -> ActionIndependentMdp:
    nets = [random_net(rng, d, k, activation) for _ in range(H)]
    offsets = offset_scale * rng.standard_normal((S, d))
    cands = rng.standard_normal((A, d))
    if stochastic:
        law = rng.dirichlet(np.ones(S), size=H)
    else:
        law = np.zeros((H, S))
        law[np.arange(H), rng.integers(S, size=H)] = 1.0
    return ActionIndependentMdp(nets, offsets, cands, law, reward_noise)


def default_delta(d: int) -> float:
    return 10.0 * math.sqrt(d)
