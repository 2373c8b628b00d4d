"""
Unit tests for p2pfl_sim.belief
"""

import numpy as np
import pytest

from p2pfl_sim import belief, util

A_TOL = 1e-12

THETA = np.array([-0.7179, 1.3171, -0.6441])


@pytest.fixture
def task():
    return belief.LinearTask(
        THETA, {1: 0.01, 2: 0.01, 3: 0.0}, {1: (0,), 2: (0, 1), 3: (1, 2)}
    )


def test_prior():
    prior = belief.GaussianBelief.prior(3)
    assert np.array_equal(prior.mean, np.zeros(3))
    assert np.array_equal(prior.covariance, belief.PRIOR_VARIANCE * np.eye(3))
    assert prior.form == belief.MOMENT
    assert prior.trace() == 3 * belief.PRIOR_VARIANCE


def test_belief_is_frozen():
    b = belief.GaussianBelief.prior(2)
    with pytest.raises(ValueError):
        b.mean[0] = 1.0


def test_belief_diagonal_drops_off_diagonal():
    b = belief.GaussianBelief(np.zeros(2), [[2.0, 0.5], [0.5, 1.0]], diagonal=True)
    assert np.array_equal(b.covariance, np.diag([2.0, 1.0]))


@pytest.mark.parametrize(
    "mean, covariance",
    [
        (np.zeros(2), np.eye(3)),
        (np.zeros((2, 2)), np.eye(2)),
        (np.zeros(2), np.array([[1.0, 0.2], [0.0, 1.0]])),
    ],
)
def test_belief_bad_shapes(mean, covariance):
    with pytest.raises(util.ConfigurationError):
        belief.GaussianBelief(mean, covariance)


def test_belief_bad_form():
    with pytest.raises(util.ConfigurationError, match="form"):
        belief.GaussianBelief(np.zeros(1), np.eye(1), form="natural")


def test_form_accessors():
    b = belief.GaussianBelief(np.array([1.0, 2.0]), np.diag([2.0, 4.0]))
    with pytest.raises(util.ConfigurationError):
        b.precision
    info = belief.to_information_form(b)
    assert np.allclose(info.precision, np.diag([0.5, 0.25]), atol=A_TOL)
    assert np.allclose(info.weighted_mean, [0.5, 0.5], atol=A_TOL)
    with pytest.raises(util.ConfigurationError):
        info.variances()


@pytest.mark.parametrize("diagonal", [False, True])
def test_form_conversion_inverse(diagonal):
    covariance = np.array([[2.0, 0.3], [0.3, 1.0]])
    if diagonal:
        covariance = np.diag(np.diag(covariance))
    b = belief.GaussianBelief(np.array([0.4, -1.2]), covariance, diagonal=diagonal)
    back = belief.to_moment_form(belief.to_information_form(b))
    assert back.form == belief.MOMENT and back.diagonal == diagonal
    assert np.allclose(back.mean, b.mean, atol=1e-10)
    assert np.allclose(back.covariance, b.covariance, atol=1e-10)
    # Converting to the form a belief already has is the identity
    assert belief.to_moment_form(b) is b


@pytest.mark.parametrize("diagonal", [False, True])
def test_form_conversion_degenerate(diagonal):
    b = belief.GaussianBelief(np.zeros(2), np.diag([1.0, 0.0]), diagonal=diagonal)
    with pytest.raises(util.NumericDegeneracyError):
        belief.to_information_form(b)


def test_form_conversion_floor():
    b = belief.GaussianBelief(np.zeros(2), np.diag([1.0, 1e-14]), diagonal=True)
    with pytest.warns(util.DegeneracyWarning):
        info = belief.to_information_form(b)
    assert info.precision[1, 1] == 1.0 / util.EIGEN_FLOOR


def test_task_validation():
    with pytest.raises(util.ConfigurationError, match="same clients"):
        belief.LinearTask(THETA, {1: 0.01}, {1: (0,), 2: (1,)})
    with pytest.raises(util.ConfigurationError, match="empty support"):
        belief.LinearTask(THETA, {1: 0.01}, {1: ()})
    with pytest.raises(util.ConfigurationError, match="outside"):
        belief.LinearTask(THETA, {1: 0.01}, {1: (3,)})
    with pytest.raises(util.ConfigurationError, match="noise variance"):
        belief.LinearTask(THETA, {1: -1.0}, {1: (0,)})
    with pytest.raises(util.ConfigurationError, match="feature_mode"):
        belief.LinearTask(THETA, {1: 0.01}, {1: (0,)}, feature_mode="sparse")


def test_is_sufficient(task):
    assert task.is_sufficient([1, 2, 3])
    assert task.is_sufficient([2, 3])
    assert not task.is_sufficient([1, 2])
    with pytest.raises(util.ConfigurationError, match="unknown client"):
        task.is_sufficient([4])


@pytest.mark.parametrize("client", [1, 2, 3])
def test_sample_batch_support(task, client):
    features, labels = belief.sample_batch(task, client, 50, np.random.default_rng(client))
    assert features.shape == (50, 3) and labels.shape == (50,)
    outside = [k for k in range(3) if k not in task.support_sets[client]]
    assert np.all(features[:, outside] == 0)
    assert np.all(features >= 0)
    # Single feature mode activates exactly one coordinate per sample
    assert np.all(np.count_nonzero(features, axis=1) == 1)
    active = features[features > 0]
    assert np.all((active >= belief.FEATURE_LOW) & (active < belief.FEATURE_HIGH))


def test_sample_batch_noiseless(task):
    features, labels = belief.sample_batch(task, 3, 10, np.random.default_rng(0))
    assert np.allclose(labels, features @ THETA, atol=A_TOL)


def test_sample_batch_dense():
    task = belief.LinearTask(THETA, {1: 0.01}, {1: (0, 2)}, feature_mode="dense")
    features, _ = belief.sample_batch(task, 1, 20, np.random.default_rng(0))
    assert np.all(features[:, [0, 2]] > 0)
    assert np.all(features[:, 1] == 0)


def test_sample_batch_deterministic(task):
    a = belief.sample_batch(task, 2, 5, np.random.default_rng(11))
    b = belief.sample_batch(task, 2, 5, np.random.default_rng(11))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_sample_batch_errors(task):
    with pytest.raises(util.ConfigurationError, match="unknown client"):
        belief.sample_batch(task, 9, 5, np.random.default_rng(0))
    with pytest.raises(util.ConfigurationError, match="batch_size"):
        belief.sample_batch(task, 1, 0, np.random.default_rng(0))


def test_sample_test_set(task):
    features, labels = task.sample_test_set(30, np.random.default_rng(0))
    assert features.shape == (30, 3)
    assert np.all(features > 0)
    assert np.allclose(labels, features @ THETA, atol=A_TOL)


def test_client_state():
    prior = belief.GaussianBelief.prior(2)
    state = belief.ClientState(id=1, local_belief=prior, social_belief=prior)
    assert not state.is_compromised
    assert state.advance_clock() == 1
    assert state.advance_clock() == 2
    assert not state.local_model_frozen and not state.terminated
