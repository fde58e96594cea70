"""Homogeneous activations and their Gaussian moment coefficients."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate

KINDS = ("relu", "leaky_relu", "squared_relu", "power")

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _gauss_pdf(z: float) -> float:
    return math.exp(-0.5 * z * z) / _SQRT_2PI


def _half_line_expectation(g, tol: float = 1e-13) -> float:
    """E[g(z)] for z ~ N(0,1), integrating each half line separately.

    Every supported activation is smooth away from the origin, so splitting
    there keeps the adaptive rule away from the kink.
    """
    total = 0.0
    for lo, hi in ((-np.inf, 0.0), (0.0, np.inf)):
        val, _ = integrate.quad(lambda z: g(z) * _gauss_pdf(z), lo, hi,
                                epsabs=tol, epsrel=tol, limit=200)
        total += val
    return total


@dataclass(frozen=True)
class Activation:
    """A positively homogeneous activation of degree p + 1.

    kind is one of relu, leaky_relu, squared_relu or power. ``slope`` is the
    negative-side slope of leaky_relu and ``degree`` the odd exponent of power.
    """

    kind: str = "relu"
    slope: float = 0.01
    degree: int = 3

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown activation kind {self.kind!r}")
        if self.kind == "leaky_relu" and not 0.0 <= self.slope <= 1.0:
            raise ValueError("leaky_relu slope must lie in [0, 1]")
        if self.kind == "power" and (self.degree < 1 or self.degree % 2 == 0):
            # even powers have a negative derivative on x < 0
            raise ValueError("power activation needs an odd positive degree")

    @property
    def p(self) -> int:
        """Growth exponent in the bound sigma'(x) <= L1 |x|^p."""
        if self.kind in ("relu", "leaky_relu"):
            return 0
        if self.kind == "squared_relu":
            return 1
        return self.degree - 1

    @property
    def L1(self) -> float:
        if self.kind == "relu":
            return 1.0
        if self.kind == "leaky_relu":
            return max(1.0, self.slope)
        if self.kind == "squared_relu":
            return 2.0
        return float(self.degree)

    def sigma(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "relu":
            return np.maximum(x, 0.0)
        if self.kind == "leaky_relu":
            return np.where(x > 0, x, self.slope * x)
        if self.kind == "squared_relu":
            return np.maximum(x, 0.0) ** 2
        return x ** self.degree

    def dsigma(self, x):
        """Derivative, with the value 0 chosen at the ReLU kink."""
        x = np.asarray(x, dtype=float)
        if self.kind == "relu":
            return (x > 0).astype(float)
        if self.kind == "leaky_relu":
            return np.where(x > 0, 1.0, self.slope)
        if self.kind == "squared_relu":
            return 2.0 * np.maximum(x, 0.0)
        return self.degree * x ** (self.degree - 1)

    # Gaussian moments -------------------------------------------------

    def gamma(self, j: int, s: float) -> float:
        """gamma_j(s) = E[sigma(s z) z^j] for z ~ N(0, 1)."""
        if s <= 0:
            raise ValueError("scale s must be positive")
        return _gamma_cached(self, int(j), float(s))

    def alpha_q(self, q: int, z: float) -> float:
        return _half_line_expectation(lambda x: float(self.dsigma(z * x)) * x ** q)

    def beta_q(self, q: int, z: float) -> float:
        return _half_line_expectation(lambda x: float(self.dsigma(z * x)) ** 2 * x ** q)

    def rho(self, z: float) -> float:
        a0, a1, a2 = (self.alpha_q(q, z) for q in (0, 1, 2))
        b0, b2 = self.beta_q(0, z), self.beta_q(2, z)
        return min(b0 - a0 ** 2 - a1 ** 2, b2 - a1 ** 2 - a2 ** 2, a0 * a2 - a1 ** 2)


@lru_cache(maxsize=4096)
def _gamma_cached(act: Activation, j: int, s: float) -> float:
    return _half_line_expectation(lambda z: float(act.sigma(s * z)) * z ** j)


@dataclass(frozen=True)
class MomentCoefficients:
    gammas: tuple[float, float, float, float, float]
    m: tuple[float, float, float, float]

    def m_j(self, j: int) -> float:
        return self.m[j - 1]


def activation_moment_coefficients(activation: Activation, s: float) -> MomentCoefficients:
    """gamma_0..gamma_4 at scale s and the Hermite-centred m_1..m_4."""
    if s <= 0:
        raise ValueError("scale s must be positive")
    g = tuple(activation.gamma(j, s) for j in range(5))
    m1 = g[1]
    m2 = g[2] - g[0]
    m3 = g[3] - 3.0 * g[1]
    m4 = g[4] + 3.0 * g[0] - 6.0 * g[2]
    return MomentCoefficients(gammas=g, m=(m1, m2, m3, m4))
