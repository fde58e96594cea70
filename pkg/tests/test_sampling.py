from __future__ import annotations

import numpy as np
import pytest

from momrl.sampling import AcceptanceTooLow, PositiveMeasureSet, sample_positive_measure


def test_ball_samples_inside():
    out = sample_positive_measure(PositiveMeasureSet.ball(3, 1.0), 2_000, np.random.default_rng(0))
    assert out.points.shape == (2_000, 3)
    assert np.all(np.linalg.norm(out.points, axis=1) <= 1.0)


def test_half_space_acceptance():
    region = PositiveMeasureSet.half_space([1.0, 0.0])
    out = sample_positive_measure(region, 1_000, np.random.default_rng(1))
    assert abs(out.acceptance - 0.5) <= 0.01
    assert np.all(out.points[:, 0] > 0)


def test_hyperplane_is_rejected():
    with pytest.raises(AcceptanceTooLow):
        sample_positive_measure(PositiveMeasureSet.hyperplane([1.0, 0.0]), 10,
                                np.random.default_rng(0))


def test_proposal_budget():
    region = PositiveMeasureSet.ball(2, 0.05)
    with pytest.raises(AcceptanceTooLow):
        sample_positive_measure(region, 10_000, np.random.default_rng(0), max_proposals=200_000)


def test_scaled_simplex_membership():
    region = PositiveMeasureSet.scaled_simplex(2, 1.0)
    X = np.array([[0.2, 0.3], [0.8, 0.3], [-0.1, 0.1]])
    assert region.contains(X).tolist() == [True, False, False]
