"""Rejection sampling of N(0, I) restricted to sets of positive Lebesgue measure."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class AcceptanceTooLow(RuntimeError):
    pass


@dataclass(frozen=True)
class PositiveMeasureSet:
    """A region of R^d given by a vectorised membership predicate."""

    d: int
    contains: Callable[[np.ndarray], np.ndarray]
    tag: str = "custom"

    @classmethod
    def full_space(cls, d: int) -> "PositiveMeasureSet":
        return cls(d, lambda X: np.ones(X.shape[0], dtype=bool), "full space")

    @classmethod
    def ball(cls, d: int, radius: float) -> "PositiveMeasureSet":
        return cls(d, lambda X: np.linalg.norm(X, axis=1) <= radius, f"ball r={radius:g}")

    @classmethod
    def half_space(cls, normal, offset: float = 0.0) -> "PositiveMeasureSet":
        n = np.asarray(normal, dtype=float)
        return cls(n.shape[0], lambda X: X @ n > offset, "half space")

    @classmethod
    def hyperplane(cls, normal, offset: float = 0.0) -> "PositiveMeasureSet":
        n = np.asarray(normal, dtype=float)
        return cls(n.shape[0], lambda X: X @ n == offset, "hyperplane")

    @classmethod
    def scaled_simplex(cls, d: int, total: float) -> "PositiveMeasureSet":
        """{x >= 0, sum(x) <= total}: a simplex together with its cone to 0."""
        return cls(d, lambda X: np.all(X >= 0, axis=1) & (X.sum(axis=1) <= total),
                   f"convex hull with homogeneous extension (total {total:g})")

    def estimate_acceptance(self, rng: np.random.Generator, n: int = 100_000) -> float:
        return float(np.mean(self.contains(rng.standard_normal((n, self.d)))))


@dataclass
class ConditionalSample:
    points: np.ndarray
    proposals: int
    acceptance: float


def sample_positive_measure(region: PositiveMeasureSet, n: int, rng: np.random.Generator,
                            min_acceptance: float = 1e-4, probe: int = 100_000,
                            max_proposals: int = 1_000_000) -> ConditionalSample:
    """n i.i.d. draws of N(0, I_d) conditioned on membership in ``region``."""
    X = rng.standard_normal((probe, region.d))
    keep = region.contains(X)
    acc = float(keep.mean())
    if acc < min_acceptance:
        raise AcceptanceTooLow(
            f"estimated acceptance {acc:.2e} for '{region.tag}' is below {min_acceptance:g}; "
            "use a proposal concentrated on the set")
    got = [X[keep]]
    have = got[0].shape[0]
    used = probe
    while have < n:
        batch = int(min(max_proposals - used, max(1000, 1.5 * (n - have) / acc)))
        if batch <= 0:
            raise AcceptanceTooLow(f"fewer than {n} points after {used} proposals")
        X = rng.standard_normal((batch, region.d))
        inside = X[region.contains(X)]
        got.append(inside)
        have += inside.shape[0]
        used += batch
    return ConditionalSample(np.concatenate(got)[:n], used, acc)
