"""Empirical Hermite-moment estimators for planted two-layer networks.

The j-th moment of a labelled Gaussian sample is M_j = E[y He_j(x)], where
He_j is the tensor Hermite polynomial built with the outer-tilde product.
Each estimator below contracts M_j against the probe vector alpha (and the
subspace V where relevant) sample by sample, so no d^4 tensor is formed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .activations import Activation, activation_moment_coefficients

ZERO_MOMENT_TOL = 1e-8
_CHUNK = 1 << 16


# ---------------------------------------------------------------------------
# outer-tilde products


def outer_tilde_vector(v: np.ndarray) -> np.ndarray:
    """v (x~) I: the three placements of v alongside an identity pair."""
    v = np.asarray(v, dtype=float)
    eye = np.eye(v.shape[0])
    return (np.einsum("a,bc->abc", v, eye)
            + np.einsum("b,ac->abc", v, eye)
            + np.einsum("c,ab->abc", v, eye))


def _rank_one_tilde(u: np.ndarray) -> np.ndarray:
    eye = np.eye(u.shape[0])
    uu = np.outer(u, u)
    return (np.einsum("ab,cd->abcd", uu, eye)      # u u e e
            + np.einsum("ac,bd->abcd", uu, eye)    # u e u e
            + np.einsum("bc,ad->abcd", uu, eye)    # e u u e
            + np.einsum("ad,bc->abcd", uu, eye)    # u e e u
            + np.einsum("bd,ac->abcd", uu, eye)    # e u e u
            + np.einsum("cd,ab->abcd", uu, eye))   # e e u u


def outer_tilde_matrix(M: np.ndarray) -> np.ndarray:
    """M (x~) I for symmetric M, summed over an eigendecomposition of M."""
    M = np.asarray(M, dtype=float)
    asym = np.max(np.abs(M - M.T)) if M.size else 0.0
    if asym > 1e-8:
        warnings.warn(f"outer_tilde_matrix: symmetrizing input (asymmetry {asym:.2e})")
    M = 0.5 * (M + M.T)
    evals, evecs = np.linalg.eigh(M)
    d = M.shape[0]
    out = np.zeros((d, d, d, d))
    for s, u in zip(evals, evecs.T):
        if s != 0.0:
            out += s * _rank_one_tilde(u)
    return out


def hermite_tensor(x: np.ndarray, j: int) -> np.ndarray:
    """Full j-th order Hermite tensor of a single point, j in 0..4.

    The fourth-order identity term enters with weight 1/2: the six-term
    matrix definition counts each of the three index pairings twice when
    applied to I itself.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    eye = np.eye(d)
    if j == 0:
        return np.array(1.0)
    if j == 1:
        return x.copy()
    if j == 2:
        return np.outer(x, x) - eye
    if j == 3:
        return np.einsum("a,b,c->abc", x, x, x) - outer_tilde_vector(x)
    if j == 4:
        return (np.einsum("a,b,c,d->abcd", x, x, x, x)
                - outer_tilde_matrix(np.outer(x, x))
                + 0.5 * outer_tilde_matrix(eye))
    raise ValueError("moments are implemented up to order 4")


# ---------------------------------------------------------------------------
# moment index selection


@dataclass(frozen=True)
class MomentIndices:
    """Which moment orders feed P2, P3, Q1 and Q2, and their coefficients.

    ``c[j]`` is m_j at unit scale, so m_{j,i} = c[j] * ||w_i||^(p+1).
    """

    j2: int
    j3: int
    l1: int
    l2: int
    c: dict[int, float]
    p: int

    @classmethod
    def select(cls, activation: Activation, tol: float = ZERO_MOMENT_TOL) -> "MomentIndices":
        coeffs = activation_moment_coefficients(activation, 1.0)
        c = {j: coeffs.m_j(j) for j in (1, 2, 3, 4)}
        nz = {j: abs(c[j]) > tol for j in c}
        if not (nz[3] or nz[4]):
            raise ValueError("activation has M3 = M4 = 0; recovery is not identifiable")
        j2 = min(j for j in (2, 3, 4) if nz[j])
        j3 = min(j for j in (3, 4) if nz[j])
        if not nz[1] and not nz[3]:
            l1 = l2 = min(j for j in (2, 4) if nz[j])
        elif not nz[2] and not nz[4]:
            l1 = min(j for j in (1, 3) if nz[j])
            l2 = 3
        else:
            l1 = min(j for j in (1, 3) if nz[j])
            even = [j for j in (2, 4) if nz[j]]
            l2 = min(even) if even else 3
        return cls(j2=j2, j3=j3, l1=l1, l2=l2, c=c, p=activation.p)


# ---------------------------------------------------------------------------
# data containers


@dataclass
class SampleBatch:
    """Gaussian features with labels; points outside radius carry y = 0."""

    x: np.ndarray
    y: np.ndarray
    radius: float = np.inf
    noise: float = 0.0
    truncated: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("x and y lengths differ")
        if self.truncated is None:
            self.truncated = np.linalg.norm(self.x, axis=1) > self.radius
        self.truncated = np.asarray(self.truncated, dtype=bool)
        if np.any(self.y[self.truncated] != 0.0):
            raise ValueError("truncated samples must carry label 0")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "SampleBatch":
        return SampleBatch(self.x[idx], self.y[idx], self.radius, self.noise,
                           self.truncated[idx])

    def inside(self) -> "SampleBatch":
        return self.subset(~self.truncated)

    def partition(self, parts: int = 4) -> list["SampleBatch"]:
        """Contiguous equal parts in stream order; earlier parts take extras."""
        return [self.subset(ix) for ix in np.array_split(np.arange(self.n), parts)]

    def save(self, path: str | Path) -> None:
        """Plain text table with columns x_1..x_d, y."""
        header = (f"schema=momrl.samplebatch/1 radius={self.radius} noise={self.noise}\n"
                  + " ".join([f"x{i + 1}" for i in range(self.d)] + ["y"]))
        np.savetxt(path, np.column_stack([self.x, self.y]), header=header)

    @classmethod
    def load(cls, path: str | Path) -> "SampleBatch":
        with open(path) as fh:
            meta = fh.readline().lstrip("# ").split()
        opts = dict(kv.split("=", 1) for kv in meta)
        if opts.get("schema") != "momrl.samplebatch/1":
            raise ValueError("unrecognised sample batch schema")
        table = np.loadtxt(path, ndmin=2)
        return cls(table[:, :-1], table[:, -1], float(opts["radius"]), float(opts["noise"]))


@dataclass
class MomentSet:
    alpha: np.ndarray
    indices: MomentIndices
    partition: list[tuple[int, int]] = field(default_factory=list)
    P2: np.ndarray | None = None
    V: np.ndarray | None = None
    R3: np.ndarray | None = None
    Q1: np.ndarray | None = None
    Q2: np.ndarray | None = None

    def dump(self, path: str | Path) -> None:
        arrays = {k: getattr(self, k) for k in ("alpha", "P2", "V", "R3", "Q1", "Q2")
                  if getattr(self, k) is not None}
        arrays["partition"] = np.asarray(self.partition)
        arrays["indices"] = np.array([self.indices.j2, self.indices.j3,
                                      self.indices.l1, self.indices.l2])
        np.savez(path, **arrays)


# ---------------------------------------------------------------------------
# contracted estimators


def _chunks(batch: SampleBatch):
    if batch.n == 0:
        raise ValueError("empty sample batch")
    for start in range(0, batch.n, _CHUNK):
        yield batch.x[start:start + _CHUNK], batch.y[start:start + _CHUNK]


def _sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


def _check_alpha(alpha: np.ndarray) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    if abs(np.linalg.norm(alpha) - 1.0) > 1e-8:
        raise ValueError("probe vector alpha must have unit norm")
    return alpha


def _check_V(V: np.ndarray | None) -> np.ndarray:
    if V is None:
        raise ValueError("subspace V is required")
    V = np.asarray(V, dtype=float)
    dev = np.max(np.abs(V.T @ V - np.eye(V.shape[1])))
    if dev > 1e-8:
        raise ValueError(f"V columns are not orthonormal (deviation {dev:.2e})")
    return V


def _matrix_moment(Z: np.ndarray, y: np.ndarray, a: np.ndarray, b: np.ndarray,
                   order: int) -> np.ndarray:
    """Sum over samples of y * He_order(z)(., ., b, ..., b).

    Z holds the (possibly projected) points, a = <alpha, x> and b is the
    probe expressed in the same coordinates as Z.
    """
    k = Z.shape[1]
    eye = np.eye(k)
    if order == 2:
        return (Z * y[:, None]).T @ Z - y.sum() * eye
    if order == 3:
        zz = (Z * (y * a)[:, None]).T @ Z
        s = Z.T @ y
        return zz - np.outer(s, b) - np.outer(b, s) - (y @ a) * eye
    if order == 4:
        zz2 = (Z * (y * a * a)[:, None]).T @ Z
        zz0 = (Z * y[:, None]).T @ Z
        s = Z.T @ (y * a)
        return (zz2 - zz0 - 2.0 * (np.outer(s, b) + np.outer(b, s))
                - (y @ (a * a)) * eye + y.sum() * (eye + 2.0 * np.outer(b, b)))
    raise ValueError(f"unsupported matrix moment order {order}")


def estimate_P2(batch: SampleBatch, alpha: np.ndarray, indices: MomentIndices) -> np.ndarray:
    """Mean of the j2-th moment contracted with alpha in all but two slots."""
    alpha = _check_alpha(alpha)
    total = np.zeros((batch.d, batch.d))
    for X, y in _chunks(batch):
        total += _matrix_moment(X, y, X @ alpha, alpha, indices.j2)
    return _sym(total / batch.n)


def estimate_Q2(batch: SampleBatch, alpha: np.ndarray, V: np.ndarray,
                indices: MomentIndices) -> np.ndarray:
    """Mean of the l2-th moment with V in two slots and alpha elsewhere."""
    alpha = _check_alpha(alpha)
    V = _check_V(V)
    beta = V.T @ alpha
    total = np.zeros((V.shape[1], V.shape[1]))
    for X, y in _chunks(batch):
        total += _matrix_moment(X @ V, y, X @ alpha, beta, indices.l2)
    return _sym(total / batch.n)


def estimate_Q1(batch: SampleBatch, alpha: np.ndarray, indices: MomentIndices) -> np.ndarray:
    """Mean of the l1-th moment with alpha in every slot but the first."""
    alpha = _check_alpha(alpha)
    total = np.zeros(batch.d)
    for X, y in _chunks(batch):
        a = X @ alpha
        if indices.l1 == 1:
            total += X.T @ y
        elif indices.l1 == 2:
            total += X.T @ (y * a) - y.sum() * alpha
        elif indices.l1 == 3:
            total += X.T @ (y * (a * a - 1.0)) - 2.0 * (y @ a) * alpha
        elif indices.l1 == 4:
            total += X.T @ (y * (a ** 3 - 3.0 * a)) - 3.0 * (y @ (a * a - 1.0)) * alpha
        else:
            raise ValueError(f"unsupported l1 = {indices.l1}")
    return total / batch.n


def symmetrize3(T: np.ndarray) -> np.ndarray:
    perms = ("abc", "acb", "bac", "bca", "cab", "cba")
    return sum(np.einsum(f"abc->{p}", T) for p in perms) / 6.0


def estimate_R3(batch: SampleBatch, alpha: np.ndarray, V: np.ndarray,
                indices: MomentIndices) -> np.ndarray:
    """Mean of the j3-th moment projected onto V in three slots."""
    alpha = _check_alpha(alpha)
    V = _check_V(V)
    k = V.shape[1]
    beta = V.T @ alpha
    eye = np.eye(k)
    total = np.zeros((k, k, k))
    for X, y in _chunks(batch):
        U = X @ V
        if indices.j3 == 3:
            cube = np.einsum("n,na,nb,nc->abc", y, U, U, U)
            lin = U.T @ y
        elif indices.j3 == 4:
            a = X @ alpha
            cube = np.einsum("n,na,nb,nc->abc", y * a, U, U, U)
            uu = (U * y[:, None]).T @ U
            cube -= (np.einsum("ab,c->abc", uu, beta) + np.einsum("ac,b->abc", uu, beta)
                     + np.einsum("bc,a->abc", uu, beta))
            lin = U.T @ (y * a) - y.sum() * beta
        else:
            raise ValueError(f"unsupported j3 = {indices.j3}")
        total += cube - (np.einsum("a,bc->abc", lin, eye) + np.einsum("b,ac->abc", lin, eye)
                         + np.einsum("c,ab->abc", lin, eye))
    return symmetrize3(total / batch.n)


# ---------------------------------------------------------------------------
# reference implementation by full tensors


def _contract(T: np.ndarray, vectors: list[np.ndarray]) -> np.ndarray:
    """Contract the trailing len(vectors) slots of T with the given vectors."""
    for v in reversed(vectors):
        T = T @ v
    return T


def naive_moment_contractions(batch: SampleBatch, alpha: np.ndarray, indices: MomentIndices,
                              V: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """P2, R3, Q1, Q2 by forming every per-sample Hermite tensor in full.

    Only meant for small d and n; used to certify the closed forms.
    """
    d = batch.d
    out = {"P2": np.zeros((d, d)), "Q1": np.zeros(d)}
    if V is not None:
        k = V.shape[1]
        out["R3"] = np.zeros((k, k, k))
        out["Q2"] = np.zeros((k, k))
    for x, y in zip(batch.x, batch.y):
        if y == 0.0:
            continue
        He = {j: hermite_tensor(x, j) for j in {indices.j2, indices.j3, indices.l1, indices.l2}}
        out["P2"] += y * _contract(He[indices.j2], [alpha] * (indices.j2 - 2))
        out["Q1"] += y * _contract(He[indices.l1], [alpha] * (indices.l1 - 1))
        if V is not None:
            T3 = _contract(He[indices.j3], [alpha] * (indices.j3 - 3))
            out["R3"] += y * np.einsum("abc,ai,bj,ck->ijk", T3, V, V, V)
            T2 = _contract(He[indices.l2], [alpha] * (indices.l2 - 2))
            out["Q2"] += y * V.T @ T2 @ V
    return {key: val / batch.n for key, val in out.items()}
