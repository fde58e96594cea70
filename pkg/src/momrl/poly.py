"""Polynomial value families, exact-interpolation DP, and the hard two-state instance.

Two families are supported:

    rank_k    f(x) = sum_i lam_i <v_i, x>^{p_i}          D = d k
    q_of_Ux   f(x) = q(U x), q dense of degree <= p       D = d (k + 1)^p

Both equal <Theta, x~^{(x) p}> with x~ = (1, x) for a lifted tensor Theta.
Fitting is nonlinear least squares from many random starts, accepted only when
the worst residual is at the round-off floor.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.optimize import least_squares

from .instances import PlantedQMdp
from .mdp import (AccessModeError, Mdp, Policy, SimulatorAccess, _as_actions, _as_states,
                  first_argmax)
from .rng import stream
from .sampling import AcceptanceTooLow, PositiveMeasureSet, sample_positive_measure


class InsufficientSamples(ValueError):
    pass


class NoSolutionAtLevel(RuntimeError):
    def __init__(self, level: int, residual: float):
        super().__init__(f"level {level}: no family member fits the labels "
                         f"(best max residual {residual:.3e})")
        self.level = level
        self.residual = residual


class InvalidIndexTuple(ValueError):
    pass


class SizeCapExceeded(ValueError):
    pass


# ---------------------------------------------------------------------------
# families


def _lift(X: np.ndarray) -> np.ndarray:
    return np.hstack([np.ones((X.shape[0], 1)), X])


def contract_lifted(theta: np.ndarray, X) -> np.ndarray:
    """<Theta, x~^{(x) p}> for each row of X."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Xt = _lift(X)
    out = np.broadcast_to(theta, (X.shape[0],) + theta.shape)
    for _ in range(theta.ndim):
        out = np.einsum("n...j,nj->n...", out, Xt)
    return out


def _check_dim(X, d: int) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != d:
        raise ValueError(f"expected points of dimension {d}, got {X.shape[1]}")
    return X


@dataclass(frozen=True)
class RankK:
    """f(x) = sum_i lam_i <v_i, x>^{p_i}."""

    lam: np.ndarray
    V: np.ndarray
    degrees: tuple[int, ...]
    variant = "rank_k"

    def __post_init__(self) -> None:
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        V = np.atleast_2d(np.asarray(self.V, dtype=float))
        degrees = tuple(int(p) for p in self.degrees)
        if not (lam.shape[0] == V.shape[0] == len(degrees)):
            raise ValueError("lam, V and degrees must have one entry per term")
        if any(p < 1 for p in degrees):
            raise ValueError("term degrees must be positive")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "degrees", degrees)

    @property
    def d(self) -> int:
        return self.V.shape[1]

    @property
    def k(self) -> int:
        return self.V.shape[0]

    @property
    def p(self) -> int:
        return max(self.degrees)

    @property
    def D(self) -> int:
        return self.d * self.k

    def __call__(self, X) -> np.ndarray:
        X = _check_dim(X, self.d)
        proj = X @ self.V.T
        return np.sum(self.lam * proj ** np.array(self.degrees), axis=1)

    def lifted(self) -> np.ndarray:
        p, d = self.p, self.d
        theta = np.zeros((d + 1,) * p)
        e0 = np.zeros(d + 1)
        e0[0] = 1.0
        for lam, v, deg in zip(self.lam, self.V, self.degrees):
            vt = np.concatenate([[0.0], v])
            term = np.array(lam)
            for f in [vt] * deg + [e0] * (p - deg):
                term = np.multiply.outer(term, f)
            theta += term
        return theta

    def canonical(self) -> "RankK":
        """Unit directions, scale and sign in lam, first nonzero entry positive,
        terms sorted by degree then direction."""
        lam, V = self.lam.copy(), self.V.copy()
        for i, p in enumerate(self.degrees):
            norm = np.linalg.norm(V[i])
            if norm == 0:
                lam[i], V[i] = 0.0, 0.0
                continue
            V[i] /= norm
            lam[i] *= norm ** p
            nz = np.flatnonzero(np.abs(V[i]) > 1e-12)
            if nz.size and V[i, nz[0]] < 0:
                V[i] = -V[i]
                lam[i] *= (-1.0) ** p
        order = sorted(range(self.k), key=lambda i: (self.degrees[i], tuple(np.round(V[i], 12))))
        return RankK(lam[order], V[order], tuple(self.degrees[i] for i in order))

    def to_dict(self) -> dict:
        return {"variant": self.variant, "lam": self.lam.tolist(), "V": self.V.tolist(),
                "degrees": list(self.degrees)}


def monomials(k: int, p: int) -> list[tuple[int, ...]]:
    """Exponent vectors of total degree <= p in k variables, graded then lexicographic."""
    out = []
    for total in range(p + 1):
        for e in itertools.product(range(total + 1), repeat=k):
            if sum(e) == total:
                out.append(e)
    return sorted(out, key=lambda e: (sum(e), tuple(-x for x in e)))


@dataclass(frozen=True)
class QOfUx:
    """f(x) = q(U x) for a dense polynomial q of degree <= p in k variables."""

    U: np.ndarray
    coeffs: np.ndarray
    p: int
    variant = "q_of_Ux"

    def __post_init__(self) -> None:
        U = np.atleast_2d(np.asarray(self.U, dtype=float))
        c = np.atleast_1d(np.asarray(self.coeffs, dtype=float))
        if c.shape[0] != len(monomials(U.shape[0], int(self.p))):
            raise ValueError("one coefficient per monomial of degree <= p is required")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "p", int(self.p))

    @property
    def d(self) -> int:
        return self.U.shape[1]

    @property
    def k(self) -> int:
        return self.U.shape[0]

    @property
    def D(self) -> int:
        return self.d * (self.k + 1) ** self.p

    def __call__(self, X) -> np.ndarray:
        Y = _check_dim(X, self.d) @ self.U.T
        E = np.array(monomials(self.k, self.p))
        return np.prod(Y[:, None, :] ** E[None, :, :], axis=2) @ self.coeffs

    def lifted(self) -> np.ndarray:
        k, d, p = self.k, self.d, self.p
        C = np.zeros((k + 1,) * p)
        for c, e in zip(self.coeffs, monomials(k, p)):
            idx = [0] * (p - sum(e)) + [j + 1 for j, m in enumerate(e) for _ in range(m)]
            C[tuple(idx)] += c
        Ut = np.zeros((k + 1, d + 1))
        Ut[0, 0] = 1.0
        Ut[1:, 1:] = self.U
        theta = C
        for _ in range(p):
            # contract the leading k-side mode and append the matching d-side mode
            theta = np.tensordot(theta, Ut, axes=([0], [0]))
        return theta

    def to_dict(self) -> dict:
        return {"variant": self.variant, "U": self.U.tolist(), "coeffs": self.coeffs.tolist(),
                "p": self.p}


Family = RankK | QOfUx


def family_from_dict(data: dict) -> Family:
    if data["variant"] == "rank_k":
        return RankK(data["lam"], data["V"], tuple(data["degrees"]))
    if data["variant"] == "q_of_Ux":
        return QOfUx(data["U"], data["coeffs"], data["p"])
    raise ValueError(f"unknown family variant {data['variant']!r}")


@dataclass(frozen=True)
class FamilySpec:
    """Shape of a family without parameters; what the learner is told."""

    variant: str
    d: int
    k: int = 1
    p: int = 2
    degrees: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.variant not in ("rank_k", "q_of_Ux"):
            raise ValueError(f"unknown family variant {self.variant!r}")
        if self.d < 1 or self.k < 1 or self.p < 1:
            raise ValueError("d, k and p must be positive")
        if self.variant == "rank_k":
            deg = tuple(self.degrees) if self.degrees is not None else (self.p,) * self.k
            if len(deg) != self.k or max(deg) > self.p or min(deg) < 1:
                raise ValueError("rank_k degrees must be k values in 1..p")
            object.__setattr__(self, "degrees", deg)

    @property
    def D(self) -> int:
        if self.variant == "rank_k":
            return self.d * self.k
        return self.d * (self.k + 1) ** self.p

    @property
    def n_params(self) -> int:
        if self.variant == "rank_k":
            return self.k * (self.d + 1)
        return self.k * self.d + len(monomials(self.k, self.p))

    def build(self, theta: np.ndarray) -> Family:
        theta = np.asarray(theta, dtype=float)
        if self.variant == "rank_k":
            return RankK(theta[:self.k], theta[self.k:].reshape(self.k, self.d), self.degrees)
        kd = self.k * self.d
        return QOfUx(theta[:kd].reshape(self.k, self.d), theta[kd:], self.p)

    def random_theta(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(self.n_params)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "d": self.d, "k": self.k, "p": self.p,
                "degrees": None if self.degrees is None else list(self.degrees)}

    @classmethod
    def from_dict(cls, data: dict) -> "FamilySpec":
        deg = data.get("degrees")
        return cls(data["variant"], data["d"], data.get("k", 1), data.get("p", 2),
                   None if deg is None else tuple(deg))


# ---------------------------------------------------------------------------
# fitting


@dataclass
class FitResult:
    status: str                     # unique | ambiguous | no_solution
    family: Family | None
    max_residual: float
    bound: float
    n_accepted: int
    disagreement: float
    restarts: int

    @property
    def ok(self) -> bool:
        return self.status == "unique"


def fit_family(X, y, spec: FamilySpec, rng: np.random.Generator, restarts: int = 32,
               probes: int = 100, residual_scale: float = 1e-8,
               agree_tol: float = 1e-6) -> FitResult:
    """Interpolate y_i = f(x_i) over the family described by ``spec``.

    Every restart that meets the residual bound is evaluated on fresh Gaussian
    probes; if two of them disagree there the design is flagged ambiguous.
    """
    X = _check_dim(X, spec.d)
    y = np.asarray(y, dtype=float)
    if X.shape[0] < 2 * spec.D:
        raise InsufficientSamples(f"need at least 2D = {2 * spec.D} samples, got {X.shape[0]}")
    bound = residual_scale * (1.0 + float(np.max(np.abs(y))))

    def resid(theta):
        return spec.build(theta)(X) - y

    fits: list[tuple[float, int, np.ndarray]] = []
    for i in range(restarts):
        sol = least_squares(resid, spec.random_theta(rng), method="trf", jac="3-point",
                            xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
        fits.append((float(np.max(np.abs(sol.fun))), i, sol.x))
    fits.sort(key=lambda t: (t[0], t[1]))
    best = fits[0]
    accepted = [f for f in fits if f[0] <= bound]
    if not accepted:
        return FitResult("no_solution", None, best[0], bound, 0, math.nan, restarts)
    family = spec.build(best[2])
    if spec.variant == "rank_k":
        family = family.canonical()
    P = rng.standard_normal((probes, spec.d))
    ref = spec.build(best[2])(P)
    scale = 1.0 + float(np.max(np.abs(ref)))
    disagreement = max(float(np.max(np.abs(spec.build(f[2])(P) - ref))) for f in accepted)
    status = "unique" if disagreement <= agree_tol * scale else "ambiguous"
    return FitResult(status, family, best[0], bound, len(accepted), disagreement, restarts)


def linear_lift_fit(X, y, p: int) -> np.ndarray:
    """Reference solver: least squares for a full lifted tensor Theta.

    Only for tiny sizes; the result is a (d+1)^p array and is generally not in
    any structured family.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Xt = _lift(X)
    feats = Xt
    for _ in range(p - 1):
        feats = np.einsum("ni,nj->nij", feats, Xt).reshape(X.shape[0], -1)
    theta, *_ = np.linalg.lstsq(feats, np.asarray(y, dtype=float), rcond=None)
    return theta.reshape((X.shape[1] + 1,) * p)


# ---------------------------------------------------------------------------
# planted polynomial instance


class PlantedPolyMdp(PlantedQMdp):
    """Deterministic instance with Q*_h = f_h(phi) for polynomial families f_h.

    States listed in ``flat_states`` only allow actions with a_1 = 0, so their
    action image is a hyperplane.
    """

    def __init__(self, families, offsets, candidates, G, flat_states: Sequence[int] = (),
                 initial_state: int = 0, seed: int = 0):
        self.flat_states = tuple(int(s) for s in flat_states)
        super().__init__(families, offsets, candidates, G, initial_state, seed)

    def state_action_image(self, h: int, s: int) -> PositiveMeasureSet:
        if s in self.flat_states:
            e1 = np.zeros(self.d)
            e1[0] = 1.0
            return PositiveMeasureSet.hyperplane(e1, float(self.offsets[s, 0]))
        return PositiveMeasureSet.full_space(self.d)

    def to_dict(self) -> dict:
        out = self._base_dict()
        out.update(type="planted_poly", families=[f.to_dict() for f in self.nets],
                   G=self.G.tolist(), flat_states=list(self.flat_states))
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PlantedPolyMdp":
        return cls([family_from_dict(f) for f in data["families"]], data["offsets"],
                   data["candidates"], data["G"], data.get("flat_states", ()),
                   data["initial_state"], data["seed"])


def make_planted_poly(rng: np.random.Generator, d: int = 3, H: int = 2, S: int = 3, A: int = 8,
                      p: int = 2, offset_scale: float = 0.5,
                      flat_states: Sequence[int] = ()) -> PlantedPolyMdp:
    """Rank-1 degree-p planted Q* per level with random candidates."""
    fams = [RankK(rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.5, size=1),
                  rng.standard_normal((1, d)), (p,)) for _ in range(H)]
    offsets = offset_scale * rng.standard_normal((S, d))
    return PlantedPolyMdp(fams, offsets, rng.standard_normal((A, d)),
                          rng.standard_normal((H, S, d)), flat_states)


# ---------------------------------------------------------------------------
# dynamic programming by interpolation


@dataclass
class PolyDpResult:
    policy: Policy
    fits: list[FitResult]
    q_tables: np.ndarray            # (H, S, A) fitted Q over candidates
    queries: np.ndarray             # per level: generative queries or episodes
    measure_proposals: int = 0
    reached_states: list[int] = field(default_factory=list)

    @property
    def total(self) -> int:
        return int(self.queries.sum())


def _spec_for(specs, h: int) -> FamilySpec:
    return specs[h - 1] if isinstance(specs, (list, tuple)) else specs


def _plan_level(mdp: Mdp, h: int, fit: FitResult) -> np.ndarray:
    S, A = mdp.n_states, mdp.n_actions
    ss = np.repeat(np.arange(S), A)
    aa = np.tile(mdp.candidate_actions, (S, 1))
    return fit.family(mdp.features(h, ss, aa)).reshape(S, A)


def dp_generative(mdp: Mdp, specs, rng: np.random.Generator | int,
                  restarts: int = 32) -> PolyDpResult:
    """Backward interpolation DP with 2D generative queries per level."""
    if not mdp.deterministic:
        raise ValueError("interpolation DP needs deterministic transitions")
    seed = rng if isinstance(rng, (int, np.integer)) else int(rng.integers(2 ** 63))
    H, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    access = SimulatorAccess(mdp, "generative", seed=int(seed))
    q_tables = np.zeros((H, S, A))
    fits: list[FitResult | None] = [None] * H
    v_next = np.zeros(S)
    proposals = 0
    for h in range(H, 0, -1):
        spec = _spec_for(specs, h)
        srng = stream(seed, "poly-sample", h)
        pts = sample_positive_measure(mdp.feature_region(h), 2 * spec.D, srng)
        proposals += pts.proposals
        r, nxt = access.query_feature(h, pts.points, srng)
        fit = fit_family(pts.points, r + v_next[nxt], spec, stream(seed, "poly-fit", h), restarts)
        if fit.family is None:
            raise NoSolutionAtLevel(h, fit.max_residual)
        fits[h - 1] = fit
        q_tables[h - 1] = _plan_level(mdp, h, fit)
        v_next = q_tables[h - 1].max(axis=1)
    policy = Policy(first_argmax(q_tables, axis=2), mdp.candidate_actions)
    return PolyDpResult(policy, fits, q_tables, access.queries.copy(), proposals)


def check_state_images(mdp: Mdp, rng: np.random.Generator, probe: int = 100_000,
                       min_acceptance: float = 1e-4) -> int:
    """Positive-measure check of every per-state action image; returns proposals used."""
    used = 0
    for h in range(1, mdp.horizon + 1):
        for s in range(mdp.n_states):
            region = mdp.state_action_image(h, s)
            acc = region.estimate_acceptance(rng, probe)
            used += probe
            if acc < min_acceptance:
                raise AcceptanceTooLow(f"level {h}, state {s}: action image '{region.tag}' "
                                       f"has estimated acceptance {acc:.2e}")
    return used


def dp_online(mdp: Mdp, specs, rng: np.random.Generator | int,
              restarts: int = 32) -> PolyDpResult:
    """Backward interpolation DP using 2D full episodes per level.

    Levels 1..h-1 replay a fixed prefix (the first candidate) to reach s_h;
    level h plays a random action whose feature is drawn from the image of
    s_h; the label is r_h + V_hat_{h+1}(s').
    """
    if not mdp.deterministic:
        raise ValueError("interpolation DP needs deterministic transitions")
    seed = rng if isinstance(rng, (int, np.integer)) else int(rng.integers(2 ** 63))
    H, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    proposals = check_state_images(mdp, stream(seed, "measure-check"))
    access = SimulatorAccess(mdp, "online", seed=int(seed))
    prefix_action = mdp.candidate_actions[0]
    reached = [mdp.initial_state]
    for level in range(1, H):
        reached.append(int(mdp.sample_next(level, [reached[-1]], prefix_action,
                                           stream(seed, "prefix", level))[0]))
    filler = Policy(np.zeros((H, S), dtype=int), mdp.candidate_actions)
    q_tables = np.zeros((H, S, A))
    fits: list[FitResult | None] = [None] * H
    episodes = np.zeros(H, dtype=np.int64)
    v_next = np.zeros(S)
    for h in range(H, 0, -1):
        spec = _spec_for(specs, h)
        s_h = reached[h - 1]
        srng = stream(seed, "poly-sample", h)
        pts = sample_positive_measure(mdp.state_action_image(h, s_h), 2 * spec.D, srng)
        proposals += pts.proposals
        actions = mdp.action_for_feature(h, s_h, pts.points)
        before = access.episodes
        labels = np.empty(actions.shape[0])
        for i, a in enumerate(actions):
            traj = access.rollout(h, s_h, a, filler if h < H else None, srng,
                                  prefix=[prefix_action] * (h - 1))
            nxt = traj.states[1] if h < H else 0
            labels[i] = traj.rewards[0] + v_next[nxt]
        episodes[h - 1] = access.episodes - before
        fit = fit_family(pts.points, labels, spec, stream(seed, "poly-fit", h), restarts)
        if fit.family is None:
            raise NoSolutionAtLevel(h, fit.max_residual)
        fits[h - 1] = fit
        q_tables[h - 1] = _plan_level(mdp, h, fit)
        v_next = q_tables[h - 1].max(axis=1)
    policy = Policy(first_argmax(q_tables, axis=2), mdp.candidate_actions)
    return PolyDpResult(policy, fits, q_tables, episodes, proposals, reached)


# ---------------------------------------------------------------------------
# hard instance

GOOD, BAD = 0, 1
LAMBDA_CAP = 10_000


def index_set(d: int, p: int) -> list[tuple[int, ...]]:
    """All nondecreasing p-tuples over 0..d-1."""
    return list(itertools.combinations_with_replacement(range(d), p))


def vertex(alpha: Sequence[int], d: int) -> np.ndarray:
    """x_alpha = sum_i e_{alpha_i}."""
    x = np.zeros(d)
    for i in alpha:
        x[i] += 1.0
    return x


def restrict(X: np.ndarray, p: int) -> np.ndarray:
    """Map points of the scaled simplex {x >= 0, sum x = p} to the nearest vertex
    x_alpha (largest-remainder rounding, lower index first on ties)."""
    X = np.atleast_2d(X)
    base = np.floor(X + 1e-12)
    rem = X - base
    short = np.rint(p - base.sum(axis=1)).astype(int)
    out = base.copy()
    for i in range(X.shape[0]):
        order = np.argsort(-rem[i], kind="stable")
        out[i, order[:max(short[i], 0)]] += 1.0
    return out


class HardInstanceMdp(Mdp):
    """Two-state instance: S_good sees the whole action polytope, S_bad only
    its vertices; every transition goes to S_bad.

    Actions are points of F = {x >= 0, sum x = p}; the vertex set F0 is
    {x_alpha : alpha in Lambda}. The reward at level h is
    prod_i phi[alpha_i^{(h)}].
    """

    def __init__(self, d: int, p: int, planted: Sequence[Sequence[int]], n_mixtures: int = 32,
                 seed: int = 0, mixtures: np.ndarray | None = None, validate: bool = True):
        if p > d:
            raise InvalidIndexTuple("p must not exceed d")
        self.d_, self.p = int(d), int(p)
        self.lam_set = index_set(d, p)
        if len(self.lam_set) > LAMBDA_CAP:
            raise SizeCapExceeded(f"|Lambda| = {len(self.lam_set)} exceeds {LAMBDA_CAP}")
        planted = [tuple(sorted(int(i) for i in a)) for a in planted]
        for a in planted:
            if a not in self.lam_set:
                raise InvalidIndexTuple(f"{a} is not a nondecreasing {p}-tuple over 0..{d - 1}")
            if len(set(a)) != p:
                raise InvalidIndexTuple(f"{a} repeats an index; planted tuples need distinct "
                                        "indices for the delta reward structure")
        self.planted = planted
        self.horizon = len(planted)
        self.n_states = 2
        self.initial_state = GOOD
        self.seed = seed
        self.vertices = np.array([vertex(a, d) for a in self.lam_set])
        if mixtures is None:
            w = np.random.default_rng(seed).dirichlet(np.ones(len(self.lam_set)), size=n_mixtures)
            mixtures = w @ self.vertices
        self.mixtures = np.atleast_2d(np.asarray(mixtures, dtype=float)).reshape(-1, d)
        self.candidate_actions = np.vstack([self.vertices, self.mixtures])
        self.feature_bound = float(p)
        if validate:
            self.validate()

    @property
    def d(self) -> int:
        return self.d_

    @property
    def deterministic(self) -> bool:
        return True

    def features(self, h, s, a):
        self.check_level(h)
        a = _as_actions(a)
        s = _as_states(s, a.shape[0])
        out = a.copy()
        bad = s == BAD
        if bad.any():
            out[bad] = restrict(a[bad], self.p)
        return out

    def reward_of_feature(self, h: int, X: np.ndarray) -> np.ndarray:
        return np.prod(np.atleast_2d(X)[:, list(self.planted[h - 1])], axis=1)

    def mean_reward(self, h, s, a):
        return self.reward_of_feature(h, self.features(h, s, a))

    def transition_probs(self, h, s, a):
        self.check_level(h)
        m = _as_actions(a).shape[0]
        P = np.zeros((m, 2))
        P[:, BAD] = 1.0
        return P

    def sample_next(self, h, s, a, rng):
        self.check_level(h)
        return np.full(_as_actions(a).shape[0], BAD)

    def feature_region(self, h: int) -> PositiveMeasureSet:
        return PositiveMeasureSet.scaled_simplex(self.d, self.p)

    def state_action_image(self, h: int, s: int) -> PositiveMeasureSet:
        if s == GOOD:
            return PositiveMeasureSet(self.d, lambda X: np.isclose(X.sum(axis=1), self.p)
                                      & np.all(X >= 0, axis=1), "per-state action image (polytope)")
        verts = self.vertices
        return PositiveMeasureSet(
            self.d, lambda X: np.any(np.all(np.isclose(X[:, None, :], verts[None]), axis=2), axis=1),
            "per-state action image (vertices)")

    def action_for_feature(self, h: int, s: int, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(x)

    def feature_query(self, h, x, rng):
        """Query S_good at y / c with c = sum(y) / p and scale the reward by c^p.

        This reaches every point of the homogeneous extension {x >= 0, sum x <= p}
        with one simulator call each.
        """
        self.check_level(h)
        Y = np.atleast_2d(x)
        c = Y.sum(axis=1) / self.p
        if np.any(c <= 0):
            raise ValueError("the origin has no preimage")
        A = Y / c[:, None]
        s = np.full(Y.shape[0], GOOD)
        return self.sample_reward(h, s, A, rng) * c ** self.p, self.sample_next(h, s, A, rng)

    def validate(self, tol: float = 1e-12) -> None:
        from .mdp import exact_dp_solve
        for h in range(1, self.horizon + 1):
            r0 = self.reward_of_feature(h, self.vertices)
            target = np.array([float(a == self.planted[h - 1]) for a in self.lam_set])
            if not np.array_equal(r0, target):
                raise AssertionError(f"level {h}: rewards on F0 are not a delta")
            if self.reward_of_feature(h, self.mixtures).max(initial=0.0) > 1.0 + tol:
                raise AssertionError(f"level {h}: a mixture earns more than 1")
        sol = exact_dp_solve(self)
        expect = self.horizon - np.arange(1, self.horizon + 1) + 1.0
        if not np.allclose(sol.V[:-1], expect[:, None], atol=tol):
            raise AssertionError("optimal values are not H - h + 1")

    def to_dict(self) -> dict:
        return {"schema": "momrl.mdp/1", "type": "hard_instance", "d": self.d, "p": self.p,
                "planted": [list(a) for a in self.planted], "seed": self.seed,
                "mixtures": self.mixtures.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "HardInstanceMdp":
        return cls(data["d"], data["p"], data["planted"], seed=data["seed"],
                   mixtures=np.asarray(data["mixtures"]).reshape(-1, data["d"]))


INSTANCE_TYPES = {"planted_poly": PlantedPolyMdp, "hard_instance": HardInstanceMdp}


def build_hard_instance(d: int, p: int, H: int, planted: Sequence[Sequence[int]] | None = None,
                        rng: np.random.Generator | None = None,
                        n_mixtures: int = 32) -> HardInstanceMdp:
    """Hard instance with the given planted tuples, or random ones with distinct indices."""
    if planted is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        planted = [tuple(sorted(rng.choice(d, size=p, replace=False))) for _ in range(H)]
    if len(planted) != H:
        raise ValueError("need one planted tuple per level")
    seed = int(rng.integers(2 ** 31)) if rng is not None else 0
    return HardInstanceMdp(d, p, planted, n_mixtures, seed)


# ---------------------------------------------------------------------------
# separation experiment


def probe_online(mdp: HardInstanceMdp, h: int, order: Sequence[int],
                 rng: np.random.Generator) -> int:
    """Online episodes an elimination prober spends at level h >= 2.

    Each episode replays a prefix into S_bad and plays the next vertex from
    ``order``; it stops on a unit reward or when one candidate remains.
    """
    if h < 2:
        raise ValueError("online probing is only forced from level 2 on")
    access = SimulatorAccess(mdp, "online", seed=0)
    tail = Policy(np.zeros((mdp.horizon, 2), dtype=int), mdp.candidate_actions)
    prefix = [mdp.vertices[0]] * (h - 1)
    remaining = len(order)
    for idx in order:
        if remaining == 1:
            break
        traj = access.rollout(h, BAD, mdp.vertices[idx], tail if h < mdp.horizon else None, rng,
                              prefix=prefix)
        if traj.rewards[0] == 1.0:
            break
        remaining -= 1
    return access.episodes


@dataclass
class SeparationRow:
    level: int
    online_worst: int | None
    online_mean: float | None
    online_best: int | None
    generative_queries: int
    generative_budget: int
    identified: bool


@dataclass
class SeparationReport:
    d: int
    p: int
    horizon: int
    lambda_size: int
    planted: list[tuple[int, ...]]
    rows: list[SeparationRow]
    delta_sums: list[float]
    v_star_1: float

    def table(self) -> str:
        head = "level  online_worst  online_mean  online_best  generative  budget_2D  identified"
        lines = [head]
        for r in self.rows:
            ow = "-" if r.online_worst is None else str(r.online_worst)
            om = "-" if r.online_mean is None else f"{r.online_mean:.2f}"
            ob = "-" if r.online_best is None else str(r.online_best)
            lines.append(f"{r.level:5d}  {ow:>12}  {om:>11}  {ob:>11}  {r.generative_queries:10d}"
                         f"  {r.generative_budget:9d}  {str(r.identified):>10}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"d": self.d, "p": self.p, "horizon": self.horizon,
                "lambda_size": self.lambda_size, "planted": [list(a) for a in self.planted],
                "rows": [r.__dict__ for r in self.rows], "delta_sums": self.delta_sums,
                "v_star_1": self.v_star_1}


def separation_experiment(d: int, p: int, H: int, rng: np.random.Generator | int,
                          planted: Sequence[Sequence[int]] | None = None,
                          restarts: int = 32) -> SeparationReport:
    """Online probe counts against generative interpolation on the hard instance."""
    from .mdp import exact_dp_solve
    seed = rng if isinstance(rng, (int, np.integer)) else int(rng.integers(2 ** 63))
    mdp = build_hard_instance(d, p, H, planted, stream(seed, "instance"))
    L = len(mdp.lam_set)
    spec = FamilySpec("q_of_Ux", d, k=p, p=p)
    gen = dp_generative(mdp, spec, stream(seed, "generative"), restarts)
    rows = []
    for h in range(1, H + 1):
        planted_idx = mdp.lam_set.index(mdp.planted[h - 1])
        found = gen.fits[h - 1].family(mdp.vertices)
        identified = int(np.argmax(found)) == planted_idx
        if h >= 2:
            others = [i for i in range(L) if i != planted_idx]
            counts = [probe_online(mdp, h, others[:pos] + [planted_idx] + others[pos:],
                                   stream(seed, "online", h, pos)) for pos in range(L)]
            worst, mean, best = max(counts), float(np.mean(counts)), min(counts)
        else:
            worst = mean = best = None
        rows.append(SeparationRow(h, worst, mean, best, int(gen.queries[h - 1]), 2 * spec.D,
                                  bool(identified)))
    sums = [float(mdp.reward_of_feature(h, mdp.vertices).sum()) for h in range(1, H + 1)]
    v1 = float(exact_dp_solve(mdp).V[0, GOOD])
    return SeparationReport(d, p, H, L, list(mdp.planted), rows, sums, v1)
