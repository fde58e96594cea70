"""Recovery of planted two-layer networks by the method of moments.

Pipeline: probe vector -> P2 -> top-k subspace -> projected third-order
tensor -> tensor power method -> two linear systems for signs and scales.
``exact_recover`` then polishes the moment estimate by gradient descent on
the empirical squared loss.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
from scipy.optimize import linear_sum_assignment

from .activations import Activation
from .moments import (MomentIndices, MomentSet, SampleBatch, estimate_P2, estimate_Q1,
                      estimate_Q2, estimate_R3)


class RecoveryError(RuntimeError):
    pass


class AlignmentError(RecoveryError):
    def __init__(self, neuron: int, value: float):
        super().__init__(f"probe alignment {value:.2e} too small for neuron {neuron}")
        self.neuron = neuron


class RankDeficientDesign(RecoveryError):
    pass


# ---------------------------------------------------------------------------
# network container


@dataclass(frozen=True)
class TwoLayerNet:
    """f(x) = sum_i v_i sigma(w_i . x) with v_i in {-1, +1}."""

    v: np.ndarray
    W: np.ndarray
    activation: Activation = field(default_factory=Activation)

    def __post_init__(self) -> None:
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        v = np.asarray(self.v, dtype=float).reshape(-1)
        if v.shape[0] != W.shape[0]:
            raise ValueError("v and W disagree on the width k")
        if not np.all(np.isin(v, (-1.0, 1.0))):
            raise ValueError("output weights must be +1 or -1")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "v", v)

    @property
    def k(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.activation.sigma(X @ self.W.T) @ self.v

    @property
    def singular_values(self) -> np.ndarray:
        return np.linalg.svd(self.W, compute_uv=False)

    @property
    def kappa(self) -> float:
        s = self.singular_values
        return float(s[0] / s[-1]) if s[-1] > 0 else math.inf

    @property
    def lam(self) -> float:
        s = self.singular_values
        return float(np.prod(s) / s[-1] ** self.k) if s[-1] > 0 else math.inf

    @property
    def frobenius(self) -> float:
        return float(np.linalg.norm(self.W))

    def canonical(self) -> "TwoLayerNet":
        """Rows ordered by the sign of their leading entry, then lexicographically."""
        def key(i):
            row = self.W[i]
            nz = row[np.abs(row) > 0]
            lead = np.sign(nz[0]) if nz.size else 0.0
            return (-lead, *(-row).tolist())
        order = sorted(range(self.k), key=key)
        return TwoLayerNet(self.v[order], self.W[order], self.activation)

    def to_dict(self) -> dict:
        return {"v": self.v.tolist(), "W": self.W.tolist(),
                "activation": asdict(self.activation)}

    @classmethod
    def from_dict(cls, data: dict) -> "TwoLayerNet":
        return cls(np.array(data["v"]), np.array(data["W"]),
                   Activation(**data.get("activation", {})))


def default_radius(d: int) -> float:
    return max(10.0 * math.sqrt(d), float(d))


def sample_planted(net: TwoLayerNet, n: int, rng: np.random.Generator, noise: float = 0.0,
                   radius: float | None = None) -> SampleBatch:
    """Gaussian features labelled by the planted net plus N(0, noise^2) noise."""
    radius = default_radius(net.d) if radius is None else radius
    X = rng.standard_normal((n, net.d))
    y = net(X)
    if noise > 0:
        y = y + noise * rng.standard_normal(n)
    out = np.linalg.norm(X, axis=1) > radius
    y[out] = 0.0
    return SampleBatch(X, y, radius, noise, out)


@dataclass
class RowMatch:
    perm: np.ndarray
    row_errors: np.ndarray
    relative_row_error: float
    relative_frobenius: float
    signs_match: bool
    frobenius_error: float


def match_rows(net: TwoLayerNet, reference: TwoLayerNet) -> RowMatch:
    """Best simultaneous row permutation of ``net`` onto ``reference``."""
    diff = np.linalg.norm(net.W[:, None, :] - reference.W[None, :, :], axis=2)
    cost = diff / np.linalg.norm(reference.W, axis=1)[None, :]
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(reference.k, dtype=int)
    perm[cols] = rows
    W = net.W[perm]
    errs = np.linalg.norm(W - reference.W, axis=1) / np.linalg.norm(reference.W, axis=1)
    return RowMatch(perm=perm, row_errors=errs, relative_row_error=float(errs.max()),
                    relative_frobenius=float(np.linalg.norm(W - reference.W) / reference.frobenius),
                    signs_match=bool(np.all(net.v[perm] == reference.v)),
                    frobenius_error=float(np.linalg.norm(W - reference.W)))


def comparison_table(net: TwoLayerNet, reference: TwoLayerNet) -> str:
    m = match_rows(net, reference)
    lines = ["row  v_ref  v_hat  rel_err"]
    for i, j in enumerate(m.perm):
        lines.append(f"{i:>3}  {reference.v[i]:+.0f}     {net.v[j]:+.0f}     {m.row_errors[i]:.3e}")
    lines.append(f"relative Frobenius error {m.relative_frobenius:.3e}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# configuration and report


@dataclass
class RecoveryConfig:
    n: int = 400_000
    T: int = 100
    L: int | None = None
    eps: float = 0.1
    t: float = 0.05
    radius: float | None = None
    zero_tol: float = 1e-8
    gap_tol: float = 0.05
    gram_tol: float = 1e-10
    tensor_iters: int = 100
    tensor_tol: float = 1e-10
    tensor_residual_tol: float = 0.5
    alpha_tol: float = 1e-8
    alpha_prefer: float | None = 0.5
    consistency_tol: float = 0.05
    alpha_retries: int = 5
    control_variate: bool = True
    error_tol: float = 0.1
    gd_step: float = 1.0
    gd_shrink: float = 0.5
    gd_slope: float = 1e-4
    gd_max_iter: int = 10_000
    gd_tol: float = 1e-16
    gd_stall_window: int = 500
    gd_stall_ratio: float = 1e-3
    success_loss: float = 1e-12

    def __post_init__(self) -> None:
        for name in ("n", "T", "tensor_iters", "gd_max_iter"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.L is not None and self.L <= 0:
            raise ValueError("L must be positive")
        if not 0.0 < self.eps < 1.0:
            raise ValueError("eps must lie in (0, 1)")

    def restarts(self, k: int) -> int:
        if self.L is not None:
            return self.L
        return max(1, int(math.ceil(100 * k * math.log(k + 1))))


_RANK = {"success": 0, "degraded": 1, "failed": 2}


@dataclass
class RecoveryReport:
    net: TwoLayerNet | None
    status: str
    reason: str = ""
    diagnostics: dict[str, Any] = field(default_factory=dict)
    moments: MomentSet | None = None
    loss_history: list[float] = field(default_factory=list)

    def downgrade(self, status: str, reason: str) -> None:
        if _RANK[status] > _RANK[self.status]:
            self.status = status
        self.reason = f"{self.reason}; {reason}" if self.reason else reason

    def to_dict(self) -> dict:
        return {"schema": "momrl.recoveryreport/1", "status": self.status, "reason": self.reason,
                "net": None if self.net is None else self.net.to_dict(),
                "diagnostics": _jsonable(self.diagnostics),
                "iterations": max(len(self.loss_history) - 1, 0)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# ---------------------------------------------------------------------------
# stages


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    a = rng.standard_normal(d)
    return a / np.linalg.norm(a)


def spectral_norm(P: np.ndarray, rng: np.random.Generator, iters: int = 200) -> float:
    """Largest |eigenvalue| of symmetric P by power iteration on P^2."""
    x = _unit(rng, P.shape[0])
    for _ in range(iters):
        y = P @ (P @ x)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
    return float(np.linalg.norm(P @ x))


def estimate_subspace(P2: np.ndarray, k: int, T: int, rng: np.random.Generator,
                      gap_tol: float = 0.05) -> tuple[np.ndarray, dict]:
    """Top-k invariant subspace of P2 (by |eigenvalue|) via two shifted power iterations."""
    P2 = np.asarray(P2, dtype=float)
    d = P2.shape[0]
    if k > d:
        raise ValueError("k exceeds the ambient dimension")
    P2 = 0.5 * (P2 + P2.T)
    C = 3.0 * spectral_norm(P2, rng)
    eye = np.eye(d)
    V1 = np.linalg.qr(rng.standard_normal((d, k)))[0]
    V2 = np.linalg.qr(rng.standard_normal((d, k)))[0]
    for _ in range(T):
        V1 = np.linalg.qr((C * eye + P2) @ V1)[0]
        V2 = np.linalg.qr((C * eye - P2) @ V2)[0]
    s1 = np.abs(np.einsum("ij,ik,kj->j", V1, P2, V1))
    s2 = np.abs(np.einsum("ij,ik,kj->j", V2, P2, V2))
    # stable order: branch 1 first, then column index, so ties go that way
    cands = [(-s1[j], 0, j) for j in range(k)] + [(-s2[j], 1, j) for j in range(k)]
    cands.sort()
    chosen = cands[:k]
    scores = np.array([-c[0] for c in cands])
    B1 = V1[:, sorted(j for _, b, j in chosen if b == 0)]
    B2 = V2[:, sorted(j for _, b, j in chosen if b == 1)]
    if B2.shape[1]:
        B2 = np.linalg.qr((eye - B1 @ B1.T) @ B2)[0]
    V = np.hstack([B1, B2])
    kth = scores[k - 1]
    nxt = scores[k] if len(scores) > k else 0.0
    rel_gap = (kth - nxt) / scores[0] if scores[0] > 0 else 0.0
    info = {"C": C, "scores": scores, "spectral_gap": float(kth - nxt),
            "relative_gap": float(rel_gap), "gap_ok": bool(rel_gap >= gap_tol),
            "branch_counts": (B1.shape[1], V.shape[1] - B1.shape[1])}
    return V, info


@dataclass
class TensorDecomposition:
    components: np.ndarray
    weights: np.ndarray
    residual: float
    relative_residual: float
    cluster_sizes: list[int]
    stable: bool


def _t_iuu(T: np.ndarray, U: np.ndarray) -> np.ndarray:
    return np.einsum("abc,lb,lc->la", T, U, U)


def _power_iterate(T: np.ndarray, U: np.ndarray, iters: int, tol: float) -> np.ndarray:
    for _ in range(iters):
        new = _t_iuu(T, U)
        norms = np.linalg.norm(new, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        new /= norms
        step = np.minimum(np.linalg.norm(new - U, axis=1), np.linalg.norm(new + U, axis=1))
        U = new
        if np.max(step) < tol:
            break
    return U


def tensor_decompose(T: np.ndarray, k: int, L: int, rng: np.random.Generator,
                     n_iter: int = 100, tol: float = 1e-10,
                     residual_tol: float = 0.5) -> TensorDecomposition:
    """Robust tensor power method with greedy deflation, k rounds."""
    T = np.array(T, dtype=float)
    r = T.shape[0]
    norm0 = float(np.linalg.norm(T))
    comps, weights, clusters = [], [], []
    for _ in range(k):
        U = rng.standard_normal((L, r))
        U /= np.linalg.norm(U, axis=1, keepdims=True)
        U = _power_iterate(T, U, n_iter, tol)
        lam = np.einsum("abc,la,lb,lc->l", T, U, U, U)
        U *= np.where(lam < 0, -1.0, 1.0)[:, None]
        lam = np.abs(lam)
        best = int(np.argmax(lam))
        clusters.append(int(np.sum(np.abs(U @ U[best]) > 1.0 - 1e-6)))
        u = _power_iterate(T, U[best:best + 1], n_iter, tol)[0]
        w = float(np.einsum("abc,a,b,c->", T, u, u, u))
        if w < 0:
            u, w = -u, -w
        comps.append(u)
        weights.append(w)
        T = T - w * np.einsum("a,b,c->abc", u, u, u)
    residual = float(np.linalg.norm(T))
    rel = residual / norm0 if norm0 > 0 else math.inf
    return TensorDecomposition(np.array(comps), np.array(weights), residual, rel, clusters,
                               stable=bool(rel <= residual_tol))


def solve_linear_systems(U: np.ndarray, V: np.ndarray, Q1: np.ndarray, Q2: np.ndarray,
                         gram_tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray, dict]:
    """Least squares for z (first-order system) and r (second-order system)."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    gram = U @ U.T
    det = float(np.linalg.det(gram))
    if det <= gram_tol:
        raise RankDeficientDesign(f"component Gram determinant {det:.2e} below {gram_tol:.0e}")
    A1 = V @ U.T
    A2 = np.stack([np.outer(u, u).ravel() for u in U], axis=1)
    z, *_ = np.linalg.lstsq(A1, Q1, rcond=None)
    r, *_ = np.linalg.lstsq(A2, np.asarray(Q2).ravel(), rcond=None)
    info = {"gram_det": det, "cond_z": float(np.linalg.cond(A1)), "cond_r": float(np.linalg.cond(A2)),
            "residual_z": float(np.linalg.norm(A1 @ z - Q1)),
            "residual_r": float(np.linalg.norm(A2 @ r - np.asarray(Q2).ravel()))}
    return z, r, info


def assemble_network(z: np.ndarray, r: np.ndarray, U: np.ndarray, V: np.ndarray,
                     alpha: np.ndarray, indices: MomentIndices, activation: Activation,
                     alpha_tol: float = 1e-8) -> TwoLayerNet:
    """Turn the linear-system solutions into signs and weight rows."""
    c1, c2 = indices.c[indices.l1], indices.c[indices.l2]
    if abs(c1) <= 1e-12 or abs(c2) <= 1e-12:
        raise RecoveryError("selected moment coefficients vanish")
    dirs = np.atleast_2d(U) @ V.T
    align = dirs @ alpha
    for i, a in enumerate(align):
        if abs(a) <= alpha_tol:
            raise AlignmentError(i, float(a))
    v_hat = np.sign(r * c2)
    v_hat[v_hat == 0] = 1.0
    s_hat = np.sign(v_hat * z * c1)
    s_hat[s_hat == 0] = 1.0
    mags = np.abs(z / (c1 * align ** (indices.l1 - 1))) ** (1.0 / (indices.p + 1))
    W = (s_hat * mags)[:, None] * dirs
    return TwoLayerNet(v_hat, W, activation)


# ---------------------------------------------------------------------------
# drivers


@dataclass(frozen=True)
class HermiteProjection:
    """Degree <= 2 Hermite expansion c0 + c1.x + <C2, xx^T - I>/2 of the labels."""

    c0: float
    c1: np.ndarray
    C2: np.ndarray

    @classmethod
    def fit(cls, batch: SampleBatch) -> "HermiteProjection":
        X, y, n = batch.x, batch.y, batch.n
        c0 = float(y.sum() / n)
        return cls(c0, X.T @ y / n, (X * y[:, None]).T @ X / n - c0 * np.eye(batch.d))

    def __call__(self, X: np.ndarray, degree: int) -> np.ndarray:
        out = np.full(X.shape[0], self.c0)
        if degree >= 1:
            out += X @ self.c1
        if degree >= 2:
            out += 0.5 * (np.einsum("ni,ij,nj->n", X, self.C2, X) - np.trace(self.C2))
        return out


def _residualize(batch: SampleBatch, proj: HermiteProjection | None, order: int) -> SampleBatch:
    """Subtract the label components of Hermite degree below ``order``.

    Lower-degree Hermite terms are orthogonal to the order-``order`` integrand
    under the Gaussian, so the estimate keeps its mean and loses variance.
    The projection must come from a disjoint part of the sample.
    """
    if proj is None:
        return batch
    keep = ~batch.truncated
    y = batch.y.copy()
    y[keep] -= proj(batch.x[keep], min(order - 1, 2))
    return SampleBatch(batch.x, y, batch.radius, batch.noise, batch.truncated)


def noisy_recover(batch: SampleBatch, k: int, config: RecoveryConfig | None = None,
                  rng: np.random.Generator | None = None, activation: Activation | None = None,
                  reference: TwoLayerNet | None = None, center: bool = False) -> RecoveryReport:
    """Moment-based estimate of a width-k net from a labelled Gaussian batch.

    With ``center`` the in-radius labels are shifted to mean zero first, which
    removes an additive constant without touching moments of order >= 1.
    """
    config = config or RecoveryConfig()
    rng = rng if rng is not None else np.random.default_rng()
    activation = activation or Activation()
    indices = MomentIndices.select(activation, config.zero_tol)
    if batch.n < 4:
        return RecoveryReport(None, "failed", "need at least four samples")
    if center:
        inside = ~batch.truncated
        offset = float(batch.y[inside].mean()) if inside.any() else 0.0
        y = np.where(inside, batch.y - offset, 0.0)
        batch = SampleBatch(batch.x, y, batch.radius, batch.noise, batch.truncated)
    if np.max(np.abs(batch.y)) <= config.zero_tol:
        # every moment vanishes; the zero net interpolates
        zero = TwoLayerNet(np.ones(k), np.zeros((k, batch.d)), activation)
        report = RecoveryReport(zero, "success", "labels vanish; returning the zero net",
                                diagnostics={"zero_labels": True})
        if reference is not None:
            _attach_reference(report, reference, None, config.error_tol)
        return report
    parts = batch.partition(4)
    bounds = np.cumsum([0] + [p.n for p in parts])
    spans = [(int(bounds[i]), int(bounds[i + 1])) for i in range(4)]
    proj1 = proj2 = None
    if config.control_variate:
        proj1, proj2 = HermiteProjection.fit(parts[0]), HermiteProjection.fit(parts[1])
    S1 = _residualize(parts[0], proj2, indices.j2)
    S2 = _residualize(parts[1], proj1, indices.j3)
    S3 = _residualize(parts[2], proj1, indices.l1)
    S4 = _residualize(parts[3], proj1, indices.l2)
    last_error: Exception | None = None
    # soft preference: redraw alpha while some recovered direction is poorly
    # aligned with it, then keep the best-aligned draw
    prefer = 0.0 if config.alpha_prefer is None else config.alpha_prefer / math.sqrt(batch.d)
    best: tuple[tuple, RecoveryReport] | None = None
    for attempt in range(config.alpha_retries + 1):
        alpha = _unit(rng, batch.d)
        ms = MomentSet(alpha=alpha, indices=indices, partition=spans)
        ms.P2 = estimate_P2(S1, alpha, indices)
        V, sub = estimate_subspace(ms.P2, k, config.T, rng, config.gap_tol)
        ms.V = V
        ms.R3 = estimate_R3(S2, alpha, V, indices)
        td = tensor_decompose(ms.R3, k, config.restarts(k), rng, config.tensor_iters,
                              config.tensor_tol, config.tensor_residual_tol)
        ms.Q1 = estimate_Q1(S3, alpha, indices)
        ms.Q2 = estimate_Q2(S4, alpha, V, indices)
        diag: dict[str, Any] = {"attempt": attempt, "indices": [indices.j2, indices.j3,
                                                                indices.l1, indices.l2],
                                "subspace": sub, "tensor_weights": td.weights,
                                "tensor_residual": td.residual,
                                "tensor_relative_residual": td.relative_residual,
                                "tensor_clusters": td.cluster_sizes}
        report = RecoveryReport(None, "success", diagnostics=diag, moments=ms)
        if not sub["gap_ok"]:
            report.downgrade("degraded", f"spectral gap {sub['relative_gap']:.3g} below tolerance")
        if not td.stable:
            report.downgrade("degraded", "tensor decomposition left a large residual")
        try:
            z, r, lin = solve_linear_systems(td.components, V, ms.Q1, ms.Q2, config.gram_tol)
            diag["linear"] = lin
        except RankDeficientDesign as exc:
            report.downgrade("degraded", str(exc))
            z, r = [np.linalg.lstsq(A, b, rcond=None)[0] for A, b in (
                (V @ td.components.T, ms.Q1),
                (np.stack([np.outer(u, u).ravel() for u in td.components], 1), ms.Q2.ravel()))]
        try:
            net = assemble_network(z, r, td.components, V, alpha, indices, activation,
                                   config.alpha_tol)
        except AlignmentError as exc:
            last_error = exc
            continue
        min_align = float(np.min(np.abs(net.W @ alpha) / np.linalg.norm(net.W, axis=1)))
        q2_norm = float(np.linalg.norm(ms.Q2))
        consistency = diag.get("linear", {}).get("residual_r", math.inf) / q2_norm if q2_norm else math.inf
        diag["min_alignment"] = min_align
        diag["q2_relative_residual"] = consistency
        report.net = net.canonical()
        score = (min_align >= prefer, -consistency)
        if best is None or score > best[0]:
            best = (score, report)
        if min_align >= prefer and consistency <= config.consistency_tol:
            break
    if best is None:
        return RecoveryReport(None, "failed", f"probe re-draws exhausted: {last_error}")
    report = best[1]
    if reference is not None:
        _attach_reference(report, reference, report.moments.V, config.error_tol)
    return report


def _attach_reference(report: RecoveryReport, reference: TwoLayerNet, V: np.ndarray | None,
                      error_tol: float) -> None:
    m = match_rows(report.net, reference)
    report.diagnostics["reference"] = {"relative_row_error": m.relative_row_error,
                                       "relative_frobenius": m.relative_frobenius,
                                       "frobenius_error": m.frobenius_error,
                                       "signs_match": m.signs_match}
    if V is not None:
        wbar = reference.W / np.linalg.norm(reference.W, axis=1, keepdims=True)
        res = np.linalg.norm(wbar - (wbar @ V) @ V.T, axis=1)
        report.diagnostics["subspace_residual"] = float(res.max())
    if m.relative_frobenius > error_tol or not m.signs_match:
        report.downgrade("degraded", f"relative error {m.relative_frobenius:.3g} vs planted net")


def empirical_loss_and_gradient(net: TwoLayerNet, batch: SampleBatch) -> tuple[float, np.ndarray]:
    """Half mean squared residual and its gradient with respect to W."""
    if batch.n == 0:
        raise ValueError("empty batch")
    pre = batch.x @ net.W.T
    res = net.activation.sigma(pre) @ net.v - batch.y
    loss = 0.5 * float(res @ res) / batch.n
    grad = ((res[:, None] * net.activation.dsigma(pre) * net.v[None, :]).T @ batch.x) / batch.n
    return loss, grad


def _loss_only(W: np.ndarray, v: np.ndarray, act: Activation, X: np.ndarray, y: np.ndarray) -> float:
    res = act.sigma(X @ W.T) @ v - y
    return 0.5 * float(res @ res) / X.shape[0]


def refine(net: TwoLayerNet, batch: SampleBatch, config: RecoveryConfig) -> tuple[TwoLayerNet, list[float], str]:
    """Armijo gradient descent on the empirical loss from ``net``.

    Returns the final net, the loss after every accepted step (first entry is
    the starting loss) and a stop reason.
    """
    X, y = batch.x, batch.y
    W = net.W.copy()
    loss, grad = empirical_loss_and_gradient(net, batch)
    history = [loss]
    reason = "max_iter"
    for _ in range(config.gd_max_iter):
        if loss <= config.gd_tol:
            reason = "converged"
            break
        g2 = float(np.sum(grad * grad))
        if g2 == 0.0:
            reason = "stationary"
            break
        t = config.gd_step
        while True:
            trial = W - t * grad
            new = _loss_only(trial, net.v, net.activation, X, y)
            if new <= loss - config.gd_slope * t * g2:
                break
            t *= config.gd_shrink
            if t < 1e-20:
                break
        if t < 1e-20:
            reason = "plateau"
            break
        W = trial
        cur = TwoLayerNet(net.v, W, net.activation)
        loss, grad = empirical_loss_and_gradient(cur, batch)
        history.append(loss)
        w = config.gd_stall_window
        if len(history) > w and loss > config.gd_stall_ratio * history[-1 - w]:
            reason = "stalled"
            break
    else:
        if loss <= config.gd_tol:
            reason = "converged"
    return TwoLayerNet(net.v, W, net.activation), history, reason


def exact_recover(batch: SampleBatch, k: int, config: RecoveryConfig | None = None,
                  rng: np.random.Generator | None = None, activation: Activation | None = None,
                  reference: TwoLayerNet | None = None,
                  init: TwoLayerNet | None = None) -> RecoveryReport:
    """Moment initialisation followed by gradient refinement on in-radius samples."""
    config = config or RecoveryConfig()
    activation = activation or (init.activation if init is not None else Activation())
    if init is None:
        report = noisy_recover(batch, k, config, rng, activation)
        if report.net is None:
            return report
        start = report.net
    else:
        report = RecoveryReport(init, "success", diagnostics={"initialised": True})
        start = init
    inside = batch.inside()
    if inside.n == 0:
        report.downgrade("failed", "no samples inside the truncation radius")
        return report
    net, history, reason = refine(start, inside, config)
    report.net = net.canonical()
    report.loss_history = history
    report.diagnostics.update({"final_loss": history[-1], "gd_iterations": len(history) - 1,
                               "gd_stop": reason,
                               "monotone": bool(np.all(np.diff(history) <= 0.0))})
    if history[-1] > config.success_loss:
        report.downgrade("failed", f"gradient descent stopped ({reason}) at loss {history[-1]:.3e}")
    if reference is not None:
        m = match_rows(report.net, reference)
        report.diagnostics["reference"] = {"relative_row_error": m.relative_row_error,
                                           "relative_frobenius": m.relative_frobenius,
                                           "frobenius_error": m.frobenius_error,
                                           "signs_match": m.signs_match}
    return report
