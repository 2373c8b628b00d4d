"""
In the linear-Gaussian model, variational Bayesian learning of a client's
beliefs reduces to Kalman filtering: every labelled sample performs an exact
rank-one posterior update.  Both the local belief and the social belief (before
aggregation) are trained this way, on the same samples.

Conventions
-----------
Moment-form updates follow

.. math::

    s = x^T \\Sigma x + \\sigma^2, \\quad
    \\theta' = \\theta + \\Sigma x (y - x^T\\theta) / s, \\quad
    \\Sigma' = \\Sigma - \\Sigma x x^T \\Sigma / s

and information-form updates add ``x x^T / sigma^2`` to the precision and
``x y / sigma^2`` to the precision-weighted mean.  With at most one active
coordinate per feature (the default sampler) the rank-one correction is
diagonal itself, so diagonal mode is exact.  Otherwise a diagonal belief keeps
only the diagonal of the moment-form posterior, in both forms; this projection
depends on sample order, which is why dense tasks run on full covariances
(see :meth:`p2pfl_sim.presets.Scenario.validate`).  Trojan triggers are the
one place a diagonal belief sees such features.

Operations
----------
* :func:`p2pfl_sim.learning.kalman_update`: moment-form update
* :func:`p2pfl_sim.learning.information_update`: information-form update
* :func:`p2pfl_sim.learning.update_batch`: sequential update over a batch
* :func:`p2pfl_sim.learning.should_freeze_local`: patience-based stop rule
"""

import dataclasses

import numpy as np

from . import belief as belief_module
from . import util

# Cycles without a new best validation error before the local model freezes
FREEZE_PATIENCE = 20


@dataclasses.dataclass(frozen=True)
class ObservationUpdate:
    """One labelled sample together with its label noise variance."""

    feature: np.ndarray
    label: float
    noise_variance: float

    def __post_init__(self):
        object.__setattr__(self, "feature", util.validate_vector(self.feature, name="feature"))
        object.__setattr__(self, "label", float(self.label))
        if not self.noise_variance > 0:
            raise util.ConfigurationError(
                f"noise_variance must be > 0, got {self.noise_variance!r}"
            )


def _check_dims(belief, obs):
    if obs.feature.shape[0] != belief.dim:
        raise util.ConfigurationError(
            f"feature has length {obs.feature.shape[0]}, belief has dimension {belief.dim}"
        )


def kalman_update(belief, obs):
    """Condition a moment-form belief on one observation.

    Examples
    --------
    >>> b = belief_module.GaussianBelief(np.zeros(1), np.eye(1))
    >>> kalman_update(b, ObservationUpdate(np.ones(1), 1.0, 1.0)).mean
    array([0.5])

    Parameters
    ----------
    belief : p2pfl_sim.belief.GaussianBelief
        Belief in moment form
    obs : ObservationUpdate
        The observation

    Returns
    -------
    updated : p2pfl_sim.belief.GaussianBelief
        Posterior belief; ``belief`` itself when the feature is all zeros

    Raises
    ------
    ConfigurationError
        On a dimension mismatch or an information-form input.
    """
    _check_dims(belief, obs)
    if belief.form != belief_module.MOMENT:
        raise util.ConfigurationError("kalman_update requires a moment-form belief")
    x = obs.feature
    if not np.any(x):
        return belief
    if belief.diagonal:
        variances = np.diag(belief.covariance)
        gain_direction = variances * x
    else:
        gain_direction = belief.covariance @ x
    innovation_variance = x @ gain_direction + obs.noise_variance
    residual = obs.label - x @ belief.mean
    mean = belief.mean + gain_direction * (residual / innovation_variance)
    if belief.diagonal:
        covariance = np.diag(variances - gain_direction**2 / innovation_variance)
    else:
        covariance = belief.covariance - np.outer(gain_direction, gain_direction) / innovation_variance
        covariance = 0.5 * (covariance + covariance.T)
    return belief_module.GaussianBelief(mean, covariance, diagonal=belief.diagonal)


def information_update(belief, obs):
    """Condition an information-form belief on one observation.

    Parameters
    ----------
    belief : p2pfl_sim.belief.GaussianBelief
        Belief in information form
    obs : ObservationUpdate
        The observation

    Returns
    -------
    updated : p2pfl_sim.belief.GaussianBelief
        Posterior belief in information form

    Raises
    ------
    ConfigurationError
        On a dimension mismatch or a moment-form input.
    """
    _check_dims(belief, obs)
    if belief.form != belief_module.INFORMATION:
        raise util.ConfigurationError("information_update requires an information-form belief")
    x = obs.feature
    if belief.diagonal and np.count_nonzero(x) > 1:
        # Same projection as the moment form
        moment = kalman_update(belief_module.to_moment_form(belief), obs)
        return belief_module.to_information_form(moment)
    if belief.diagonal:
        precision = belief.precision + np.diag(x * x / obs.noise_variance)
    else:
        precision = belief.precision + np.outer(x, x) / obs.noise_variance
    weighted_mean = belief.weighted_mean + x * (obs.label / obs.noise_variance)
    return belief_module.GaussianBelief(
        weighted_mean, precision, form=belief_module.INFORMATION, diagonal=belief.diagonal
    )


def update_batch(belief, features, labels, noise_variance):
    """Apply :func:`kalman_update` (or :func:`information_update`, following
    the belief's form) to each row of a batch in order.

    Parameters
    ----------
    belief : p2pfl_sim.belief.GaussianBelief
    features : np.ndarray, shape=(n, K)
    labels : np.ndarray, shape=(n,)
    noise_variance : float > 0

    Returns
    -------
    updated : p2pfl_sim.belief.GaussianBelief
    """
    features = np.atleast_2d(np.asarray(features, dtype=float))
    labels = np.atleast_1d(np.asarray(labels, dtype=float))
    if features.shape[0] != labels.shape[0]:
        raise util.ConfigurationError(
            f"{features.shape[0]} feature rows but {labels.shape[0]} labels"
        )
    step = (
        kalman_update if belief.form == belief_module.MOMENT else information_update
    )
    for x, y in zip(features, labels):
        belief = step(belief, ObservationUpdate(x, y, noise_variance))
    return belief


def should_freeze_local(history, patience=FREEZE_PATIENCE):
    """Decide whether the local model should stop training.

    Fires once some prefix of ``history`` has gone ``patience`` entries
    without a new strict minimum.  Since the check is over prefixes, a
    later improvement does not revert the decision.

    Examples
    --------
    >>> should_freeze_local([1.0, 0.5] + [0.6] * 20, patience=20)
    True
    >>> should_freeze_local([1.0, 0.5] + [0.6] * 19, patience=20)
    False

    Parameters
    ----------
    history : sequence of float
        Local-model validation errors, oldest first
    patience : int > 0
        Window without improvement that triggers freezing

    Returns
    -------
    freeze : bool
    """
    if len(history) == 0:
        raise util.ConfigurationError("history must be nonempty")
    if patience < 1:
        raise util.ConfigurationError(f"patience must be >= 1, got {patience!r}")
    best = np.inf
    best_index = 0
    for index, error in enumerate(history):
        if error < best:
            best = error
            best_index = index
        elif index - best_index >= patience:
            return True
    return False
