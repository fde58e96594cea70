from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from momrl.activations import Activation, activation_moment_coefficients
from momrl.moments import MomentIndices

ACTS = [Activation("relu"), Activation("leaky_relu", slope=0.1), Activation("squared_relu"),
        Activation("power", degree=3)]


def test_relu_moments_closed_form():
    # E[relu(z) z^j]: 1/sqrt(2 pi), 1/2, 2/sqrt(2 pi), 3/2, 8/sqrt(2 pi)
    c = activation_moment_coefficients(Activation("relu"), 1.0)
    r = 1 / math.sqrt(2 * math.pi)
    assert np.allclose(c.gammas, [r, 0.5, 2 * r, 1.5, 8 * r], atol=1e-10)
    assert c.m_j(1) == pytest.approx(0.5, abs=1e-10)
    assert c.m_j(2) == pytest.approx(r, abs=1e-10)
    assert c.m_j(3) == pytest.approx(0.0, abs=1e-10)
    assert c.m_j(4) == pytest.approx(-r, abs=1e-10)


def test_cubic_power_moments():
    # x^3: gamma = (0, 3, 0, 15, 0) so m = (3, 0, 15 - 9, 0)
    c = activation_moment_coefficients(Activation("power", degree=3), 1.0)
    assert np.allclose(c.m, [3.0, 0.0, 6.0, 0.0], atol=1e-9)


@pytest.mark.parametrize("act", ACTS, ids=lambda a: a.kind)
@pytest.mark.parametrize("s", [0.5, 1.0, 2.0])
def test_gamma_matches_monte_carlo(act, s):
    z = np.random.default_rng(0).standard_normal(1_000_000)
    for j in range(5):
        mc = np.mean(act.sigma(s * z) * z ** j)
        se = np.std(act.sigma(s * z) * z ** j) / math.sqrt(z.size)
        assert abs(act.gamma(j, s) - mc) < max(5 * se, 1e-4)


@pytest.mark.parametrize("act", ACTS, ids=lambda a: a.kind)
@given(s=st.floats(0.2, 3.0))
def test_moment_homogeneity(act, s):
    a = activation_moment_coefficients(act, s)
    b = activation_moment_coefficients(act, 2 * s)
    scale = 2.0 ** (act.p + 1)
    assert np.allclose(b.m, scale * np.array(a.m), atol=1e-7 * (1 + np.abs(b.m).max()))


@pytest.mark.parametrize("act", ACTS, ids=lambda a: a.kind)
def test_derivative_bound_and_sign(act):
    x = np.linspace(-5, 5, 2001)
    ds = act.dsigma(x)
    assert np.all(ds >= 0)
    assert np.all(ds <= act.L1 * np.abs(x) ** act.p + 1e-12)


@pytest.mark.parametrize("act", ACTS[:3], ids=lambda a: a.kind)
def test_rho_positive(act):
    for z in (0.5, 1.0, 2.0):
        assert act.rho(z) > 0


def test_index_selection():
    relu = MomentIndices.select(Activation("relu"))
    assert (relu.j2, relu.j3, relu.l1, relu.l2) == (2, 4, 1, 2)
    sq = MomentIndices.select(Activation("squared_relu"))
    assert (sq.j2, sq.j3, sq.l1, sq.l2) == (2, 3, 1, 2)
    cubic = MomentIndices.select(Activation("power", degree=3))
    assert (cubic.j2, cubic.j3, cubic.l1, cubic.l2) == (3, 3, 1, 3)


@pytest.mark.parametrize("act", ACTS, ids=lambda a: a.kind)
def test_index_invariants(act):
    ind = MomentIndices.select(act)
    assert ind.j2 in (2, 3, 4) and ind.j3 in (3, 4)
    assert abs(ind.c[ind.j2]) > 1e-8 and abs(ind.c[ind.j3]) > 1e-8
    assert abs(ind.c[ind.l1]) > 1e-8 and abs(ind.c[ind.l2]) > 1e-8


def test_invalid_inputs():
    with pytest.raises(ValueError):
        Activation("tanh")
    with pytest.raises(ValueError):
        Activation("power", degree=2)
    with pytest.raises(ValueError):
        activation_moment_coefficients(Activation(), 0.0)
