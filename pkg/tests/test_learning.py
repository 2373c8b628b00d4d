"""
Unit tests for p2pfl_sim.learning
"""

import numpy as np
import pytest

from p2pfl_sim import belief, learning, util

A_TOL = 1e-10


def test_kalman_update_scalar():
    b = belief.GaussianBelief(np.zeros(1), np.eye(1))
    updated = learning.kalman_update(b, learning.ObservationUpdate(np.ones(1), 1.0, 1.0))
    assert np.allclose(updated.mean, [0.5], atol=A_TOL)
    assert np.allclose(updated.covariance, [[0.5]], atol=A_TOL)


def test_kalman_update_zero_feature():
    b = belief.GaussianBelief.prior(3)
    assert learning.kalman_update(b, learning.ObservationUpdate(np.zeros(3), 4.0, 0.01)) is b


@pytest.mark.parametrize("seed", range(3))
def test_kalman_matches_information(seed):
    rng = np.random.default_rng(seed)
    b = belief.GaussianBelief.prior(3)
    info = belief.to_information_form(b)
    for _ in range(20):
        obs = learning.ObservationUpdate(rng.uniform(0, 1, 3), rng.normal(), 0.05)
        b = learning.kalman_update(b, obs)
        info = learning.information_update(info, obs)
    back = belief.to_moment_form(info)
    assert np.allclose(b.mean, back.mean, atol=1e-8)
    assert np.allclose(b.covariance, back.covariance, atol=1e-8)


def test_kalman_matches_information_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        dim = rng.integers(1, 5)
        factor = rng.normal(size=(dim, dim))
        covariance = factor @ factor.T + 0.1 * np.eye(dim)
        b = belief.GaussianBelief(rng.normal(size=dim), covariance)
        obs = learning.ObservationUpdate(rng.normal(size=dim), rng.normal(), rng.uniform(0.01, 2))
        moment = learning.kalman_update(b, obs)
        info = belief.to_moment_form(learning.information_update(belief.to_information_form(b), obs))
        assert np.allclose(moment.mean, info.mean, rtol=1e-6, atol=1e-6)
        assert np.allclose(moment.covariance, info.covariance, rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("diagonal, feature_mode", [(True, "single"), (False, "dense")])
def test_batch_order_robust(diagonal, feature_mode):
    task = belief.LinearTask(
        np.array([0.3, -1.0, 2.0]), {1: 0.01}, {1: (0, 1, 2)}, feature_mode=feature_mode
    )
    features, labels = belief.sample_batch(task, 1, 30, np.random.default_rng(5))
    prior = belief.GaussianBelief.prior(3, diagonal=diagonal)
    forward = learning.update_batch(prior, features, labels, 0.01)
    order = np.random.default_rng(6).permutation(len(labels))
    shuffled = learning.update_batch(prior, features[order], labels[order], 0.01)
    assert np.allclose(forward.mean, shuffled.mean, atol=1e-8)
    assert np.allclose(forward.covariance, shuffled.covariance, atol=1e-8)


def test_diagonal_dense_features_agree():
    # A dense row on a diagonal belief is projected the same way in both forms
    rng = np.random.default_rng(3)
    b = belief.GaussianBelief.prior(3, diagonal=True)
    info = belief.to_information_form(b)
    for _ in range(10):
        obs = learning.ObservationUpdate(rng.uniform(0.1, 1.1, 3), rng.normal(), 0.01)
        b = learning.kalman_update(b, obs)
        info = learning.information_update(info, obs)
    back = belief.to_moment_form(info)
    assert back.diagonal
    assert np.allclose(b.mean, back.mean, atol=1e-8)
    assert np.allclose(b.covariance, back.covariance, atol=1e-8)


def test_diagonal_matches_full_single_features():
    # With one active coordinate per sample nothing is lost on the diagonal
    task = belief.LinearTask(np.array([0.3, -1.0, 2.0]), {1: 0.01}, {1: (0, 1, 2)})
    features, labels = belief.sample_batch(task, 1, 40, np.random.default_rng(0))
    full = learning.update_batch(belief.GaussianBelief.prior(3), features, labels, 0.01)
    diagonal = learning.update_batch(
        belief.GaussianBelief.prior(3, diagonal=True), features, labels, 0.01
    )
    assert diagonal.diagonal
    assert np.allclose(full.mean, diagonal.mean, atol=A_TOL)
    assert np.allclose(full.covariance, diagonal.covariance, atol=A_TOL)


def test_posterior_concentrates():
    theta = np.array([-0.7179, 1.3171])
    task = belief.LinearTask(theta, {1: 0.01}, {1: (0, 1)})
    rng = np.random.default_rng(1)
    b = belief.GaussianBelief.prior(2, diagonal=True)
    traces = []
    for _ in range(200):
        features, labels = belief.sample_batch(task, 1, 5, rng)
        b = learning.update_batch(b, features, labels, 0.01)
        traces.append(b.trace())
    # Variances only ever shrink, roughly like 1/t
    assert np.all(np.diff(traces) <= 0)
    assert np.max(np.abs(b.mean - theta)) < 0.05


def test_unobserved_coordinate_untouched():
    task = belief.LinearTask(np.array([1.0, 2.0]), {1: 0.01}, {1: (0,)})
    features, labels = belief.sample_batch(task, 1, 10, np.random.default_rng(0))
    b = learning.update_batch(belief.GaussianBelief.prior(2, diagonal=True), features, labels, 0.01)
    assert b.mean[1] == 0.0
    assert b.covariance[1, 1] == belief.PRIOR_VARIANCE


def test_update_errors():
    b = belief.GaussianBelief.prior(2)
    with pytest.raises(util.ConfigurationError, match="length"):
        learning.kalman_update(b, learning.ObservationUpdate(np.ones(3), 1.0, 1.0))
    with pytest.raises(util.ConfigurationError, match="moment-form"):
        learning.kalman_update(
            belief.to_information_form(b), learning.ObservationUpdate(np.ones(2), 1.0, 1.0)
        )
    with pytest.raises(util.ConfigurationError, match="information-form"):
        learning.information_update(b, learning.ObservationUpdate(np.ones(2), 1.0, 1.0))
    with pytest.raises(util.ConfigurationError, match="noise_variance"):
        learning.ObservationUpdate(np.ones(2), 1.0, 0.0)
    with pytest.raises(util.ConfigurationError, match="labels"):
        learning.update_batch(b, np.ones((3, 2)), np.ones(2), 0.01)


@pytest.mark.parametrize(
    "history, patience, expected",
    [
        ([1.0, 0.5] + [0.6] * 20, 20, True),
        ([1.0, 0.5] + [0.6] * 19, 20, False),
        ([3.0, 2.0, 1.0, 0.5], 1, False),
        ([1.0, 1.0], 1, True),
        ([1.0, 2.0, 3.0, 0.1], 2, True),
    ],
)
def test_should_freeze_local(history, patience, expected):
    assert learning.should_freeze_local(history, patience) == expected


def test_should_freeze_local_errors():
    with pytest.raises(util.ConfigurationError):
        learning.should_freeze_local([], 5)
    with pytest.raises(util.ConfigurationError):
        learning.should_freeze_local([1.0], 0)
