"""
After its local data update, each client fuses its social belief with the
social beliefs received from its in-neighbours.  The robust rule trusts a
neighbour only when the neighbour's mean lies, on every compared coordinate,
within ``kappa`` local standard deviations of the client's *local* mean, and
then combines the trusted beliefs by precision-weighted fusion with uniform
trust.  A final safeguard copies the local mean into any social coordinate
that strays outside the same bound.

Conventions
-----------
``received`` maps sender ids to the beliefs they transmitted.  For the robust
rule and for fixed trust, the client's own social belief is included in
``received`` under its own id, so it is tested and weighted like any other
input.  Non-finite received coordinates never pass the confidence test.

Fusion sums trust-weighted precisions and precision-weighted means:

.. math::

    (\\Sigma')^{-1} = \\sum_j T_j \\Sigma_j^{-1}, \\qquad
    \\theta' = \\Sigma' \\sum_j T_j \\Sigma_j^{-1} \\theta_j

Metrics
-------
* :func:`p2pfl_sim.aggregation.confidence_set`: bounded-confidence membership
* :func:`p2pfl_sim.aggregation.sabre_aggregate`: precision-weighted fusion
* :func:`p2pfl_sim.aggregation.overwrite_rule`: local-mean safeguard
* :func:`p2pfl_sim.aggregation.baseline_aggregate`: fixed trust, trimmed
  mean, norm clipping and Zeno-style scoring

References
----------
  .. [#] D. Yin, Y. Chen, K. Ramchandran and P. Bartlett. "Byzantine-Robust
      Distributed Learning: Towards Optimal Statistical Rates", ICML 2018.
  .. [#] C. Xie, O. Koyejo and I. Gupta. "Zeno: Distributed Stochastic
      Gradient Descent with Suspicion-based Fault-tolerance", ICML 2019.
"""

import dataclasses

import numpy as np

from . import belief as belief_module
from . import util

KAPPA = 2.0

# Zeno's step-size penalty
ZENO_RHO = 1e-3

BASELINE_RULES = ("fixed-trust", "trimmed-mean", "clipping", "zeno")


@dataclasses.dataclass(frozen=True)
class ConfidenceParams:
    """Bounded-confidence parameters.

    Parameters
    ----------
    kappa : float > 0
        Width of the acceptance band, in local standard deviations
    coordinates : tuple of int or None
        Coordinates compared; ``None`` compares all of them
    """

    kappa: float = KAPPA
    coordinates: tuple = None

    def __post_init__(self):
        kappa = float(self.kappa)
        if not (np.isfinite(kappa) and kappa > 0):
            raise util.ConfigurationError(f"kappa must be > 0, got {self.kappa!r}")
        object.__setattr__(self, "kappa", kappa)
        if self.coordinates is not None:
            object.__setattr__(
                self, "coordinates", tuple(sorted(set(int(k) for k in self.coordinates)))
            )

    def index(self, dim):
        """Coordinates to compare for a ``dim``-dimensional model."""
        if self.coordinates is None:
            return np.arange(dim)
        coordinates = np.asarray(self.coordinates, dtype=int)
        if coordinates.size and (coordinates.min() < 0 or coordinates.max() >= dim):
            raise util.ConfigurationError(
                f"comparison coordinates {self.coordinates} outside 0..{dim - 1}"
            )
        return coordinates


@dataclasses.dataclass(frozen=True)
class TrustWeights:
    """Per-neighbour trust weights and the accepted set they came from."""

    weights: dict
    accepted: frozenset

    @classmethod
    def uniform(cls, accepted, candidates=()):
        """Weight ``1/|accepted|`` on accepted ids, 0 on other candidates."""
        accepted = frozenset(accepted)
        weights = {j: 0.0 for j in candidates}
        for j in accepted:
            weights[j] = 1.0 / len(accepted)
        return cls(weights, accepted)


def _as_moment(belief):
    return belief_module.to_moment_form(belief)


def _bound(local, params):
    local = _as_moment(local)
    variances = np.diag(local.covariance)
    if np.any(~(variances > 0)):
        raise util.ConfigurationError("local covariance diagonal entries must be > 0")
    return local.mean, params.kappa * np.sqrt(variances)


def confidence_set(local, received, params=ConfidenceParams()):
    """Neighbours whose social means pass the bounded-confidence test.

    ``j`` is accepted iff ``|local.mean[k] - received[j].mean[k]| <=
    kappa * sqrt(local.covariance[k, k])`` for every compared ``k``.

    Examples
    --------
    >>> local = belief_module.GaussianBelief(np.zeros(1), np.eye(1))
    >>> near = belief_module.GaussianBelief(np.array([1.5]), np.eye(1))
    >>> far = belief_module.GaussianBelief(np.array([2.5]), np.eye(1))
    >>> confidence_set(local, {2: near, 3: far})
    {2}

    Parameters
    ----------
    local : p2pfl_sim.belief.GaussianBelief
        The client's local belief
    received : dict
        ``sender id -> GaussianBelief``
    params : ConfidenceParams

    Returns
    -------
    accepted : set of int

    Raises
    ------
    ConfigurationError
        If dimensions disagree.
    """
    if not received:
        return set()
    center, bound = _bound(local, params)
    index = params.index(center.shape[0])
    senders = sorted(received)
    means = []
    for j in senders:
        neighbour = _as_moment(received[j])
        if neighbour.dim != center.shape[0]:
            raise util.ConfigurationError(
                f"belief from {j} has dimension {neighbour.dim}, expected {center.shape[0]}"
            )
        means.append(neighbour.mean)
    means = np.vstack(means)[:, index]
    with np.errstate(invalid="ignore", over="ignore"):
        inside = np.abs(means - center[index]) <= bound[index]
    passed = np.all(inside, axis=1)
    return {j for j, ok in zip(senders, passed) if ok}


def trust_weights(accepted, candidates):
    """Uniform trust over ``accepted`` (see :class:`TrustWeights`)."""
    return TrustWeights.uniform(accepted, candidates)


def sabre_aggregate(own_social, received, trust):
    """Precision-weighted fusion of the trusted beliefs.

    Examples
    --------
    >>> a = belief_module.GaussianBelief(np.zeros(1), np.eye(1))
    >>> b = belief_module.GaussianBelief(np.ones(1), 0.1 * np.eye(1))
    >>> fused = sabre_aggregate(a, {1: a, 2: b}, TrustWeights.uniform({1, 2}))
    >>> round(float(fused.mean[0]), 4)
    0.9091

    Parameters
    ----------
    own_social : p2pfl_sim.belief.GaussianBelief
        The client's social belief, returned unchanged when nothing is trusted
    received : dict
        ``sender id -> GaussianBelief``, including the client itself
    trust : TrustWeights
        Weights summing to one over ``trust.accepted``

    Returns
    -------
    fused : p2pfl_sim.belief.GaussianBelief
        Moment-form belief
    """
    accepted = [j for j in sorted(trust.accepted) if trust.weights.get(j, 0.0) > 0]
    if not accepted:
        return own_social
    beliefs = [_as_moment(received[j]) for j in accepted]
    first = beliefs[0]
    if all(first.same_as(other) for other in beliefs[1:]):
        return first
    weights = np.array([trust.weights[j] for j in accepted])

    if all(b.diagonal for b in beliefs):
        variances = np.vstack([np.diag(b.covariance) for b in beliefs])
        variances, _ = util.floor_variances(variances)
        precisions = 1.0 / variances
        means = np.vstack([b.mean for b in beliefs])
        precision = weights @ precisions
        weighted_mean = weights @ (precisions * means)
        return belief_module.GaussianBelief(
            weighted_mean / precision, np.diag(1.0 / precision), diagonal=True
        )

    informations = [belief_module.to_information_form(b) for b in beliefs]
    precision = sum(w * b.precision for w, b in zip(weights, informations))
    weighted_mean = sum(w * b.weighted_mean for w, b in zip(weights, informations))
    fused = belief_module.GaussianBelief(
        weighted_mean, 0.5 * (precision + precision.T), form=belief_module.INFORMATION
    )
    return belief_module.to_moment_form(fused)


def violated_coordinates(local, social, params=ConfidenceParams()):
    """Compared coordinates where the social mean leaves the local band.

    Returns
    -------
    coordinates : np.ndarray of int
    """
    center, bound = _bound(local, params)
    social = _as_moment(social)
    index = params.index(center.shape[0])
    with np.errstate(invalid="ignore", over="ignore"):
        inside = np.abs(social.mean[index] - center[index]) <= bound[index]
    return index[~inside]


def overwrite_rule(local, social, params=ConfidenceParams()):
    """Copy the local mean into every social coordinate outside the band.

    The covariance is left untouched.

    Examples
    --------
    >>> local = belief_module.GaussianBelief(np.array([0.0, 5.0]), np.eye(2))
    >>> social = belief_module.GaussianBelief(np.array([3.0, 5.0]), np.eye(2))
    >>> overwrite_rule(local, social).mean
    array([0., 5.])

    Parameters
    ----------
    local : p2pfl_sim.belief.GaussianBelief
    social : p2pfl_sim.belief.GaussianBelief
    params : ConfidenceParams

    Returns
    -------
    corrected : p2pfl_sim.belief.GaussianBelief
        ``social`` itself when no coordinate is violated
    """
    violated = violated_coordinates(local, social, params)
    if violated.size == 0:
        return social
    social = _as_moment(social)
    mean = social.mean.copy()
    mean[violated] = _as_moment(local).mean[violated]
    return social.replace(mean=mean)


def trimmed_mean(values, trim):
    """Coordinate-wise mean after dropping the ``trim`` largest and smallest.

    Examples
    --------
    >>> trimmed_mean(np.array([[1.0], [2.0], [3.0], [4.0], [100.0]]), 1)
    array([3.])

    Parameters
    ----------
    values : np.ndarray, shape=(n, K)
    trim : int >= 0

    Returns
    -------
    mean : np.ndarray, shape=(K,)

    Raises
    ------
    ConfigurationError
        If ``trim`` would discard half or more of the updates.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    n = values.shape[0]
    trim = int(trim)
    if trim < 0 or 2 * trim >= n:
        raise util.ConfigurationError(
            f"trim count {trim} must be >= 0 and less than half of {n} updates"
        )
    ordered = np.sort(values, axis=0)
    return ordered[trim : n - trim].mean(axis=0)


def clipped_mean(own, values, tau=None):
    """Mean of the updates after clipping each deviation from ``own``.

    Each row's deviation ``values[j] - own`` is scaled to norm at most
    ``tau``; the mean clipped deviation is added back to ``own``.

    Parameters
    ----------
    own : np.ndarray, shape=(K,)
    values : np.ndarray, shape=(n, K)
        Updates, the client's own included
    tau : float or None
        Clip threshold; ``None`` uses the median norm of the nonzero
        deviations

    Returns
    -------
    mean : np.ndarray, shape=(K,)
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    deviations = values - own
    norms = np.linalg.norm(deviations, axis=1)
    if tau is None:
        tau = default_clip_threshold(norms)
    if not tau > 0:
        raise util.ConfigurationError(f"clip threshold must be > 0, got {tau!r}")
    if np.isinf(tau):
        return values.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > tau, tau / norms, 1.0)
    return own + (scale[:, None] * deviations).mean(axis=0)


def default_clip_threshold(norms):
    """Median of the finite, nonzero deviation norms (``inf`` if none)."""
    norms = np.asarray(norms, dtype=float)
    norms = norms[np.isfinite(norms) & (norms > 0)]
    if norms.size == 0:
        return np.inf
    return float(np.median(norms))


def validation_loss(theta, validation):
    """Mean squared error of ``theta`` on ``validation = (features, labels)``."""
    features, labels = validation
    with np.errstate(over="ignore", invalid="ignore"):
        loss = float(np.mean((features @ theta - labels) ** 2))
    return loss if np.isfinite(loss) else np.inf


def zeno_scores(own, candidates, validation, rho=ZENO_RHO):
    """Zeno-style suspicion scores.

    ``score_j = (loss(own) - loss(candidate_j)) - rho * ||candidate_j - own||^2``;
    non-finite scores become ``-inf``.

    Parameters
    ----------
    own : np.ndarray, shape=(K,)
    candidates : dict
        ``id -> np.ndarray``
    validation : tuple of np.ndarray
        Clean ``(features, labels)``
    rho : float >= 0

    Returns
    -------
    scores : dict
    """
    own_loss = validation_loss(own, validation)
    scores = {}
    for j in sorted(candidates):
        candidate = np.asarray(candidates[j], dtype=float)
        with np.errstate(over="ignore", invalid="ignore"):
            score = (own_loss - validation_loss(candidate, validation)) - rho * float(
                np.sum((candidate - own) ** 2)
            )
        scores[j] = score if np.isfinite(score) else -np.inf
    return scores


def zeno_mean(own, candidates, validation, drop, rho=ZENO_RHO):
    """Mean of ``own`` and the candidates left after dropping the ``drop``
    lowest-scoring ones (ties broken by id)."""
    scores = zeno_scores(own, candidates, validation, rho=rho)
    ranked = sorted(scores, key=lambda j: (-scores[j], j))
    kept = ranked[: max(len(ranked) - int(drop), 0)]
    rows = [own] + [np.asarray(candidates[j], dtype=float) for j in sorted(kept)]
    return np.mean(rows, axis=0)


def _fixed_trust(own, received, own_id):
    everyone = dict(received)
    everyone[own_id] = own
    return sabre_aggregate(own, everyone, trust_weights(everyone, everyone))


def _trimmed(own, received, trim):
    values = np.vstack([own] + [received[j] for j in sorted(received)])
    return trimmed_mean(values, trim)


def _clipping(own, received, tau=None):
    values = np.vstack([own] + [received[j] for j in sorted(received)])
    return clipped_mean(own, values, tau=tau)


def _zeno(own, received, validation, drop, rho=ZENO_RHO):
    return zeno_mean(own, received, validation, drop, rho=rho)


_MEAN_RULES = {"trimmed-mean": _trimmed, "clipping": _clipping, "zeno": _zeno}


def baseline_aggregate(rule, own, received, own_id=0, **rule_params):
    """Aggregate with one of the non-robust or classical robust baselines.

    Parameters
    ----------
    rule : str
        ``'fixed-trust'``, ``'trimmed-mean'``, ``'clipping'`` or ``'zeno'``
    own : p2pfl_sim.belief.GaussianBelief or np.ndarray
        The client's own social belief or parameter vector
    received : dict
        ``neighbour id -> belief or vector``, excluding the client itself
    own_id : int
        The client's id (fixed trust)
    **rule_params
        ``trim`` (trimmed-mean); ``tau`` (clipping); ``validation``,
        ``drop`` and ``rho`` (zeno).  Parameters a rule does not take are
        ignored.

    Returns
    -------
    aggregated : same type as ``own``
        For beliefs, the mean-based rules replace the mean and keep the
        client's own covariance; fixed trust returns the fused belief.

    Raises
    ------
    ConfigurationError
        For an unknown rule or an illegal trim count.
    """
    if rule not in BASELINE_RULES:
        raise util.ConfigurationError(
            f"unknown baseline rule {rule!r}; expected one of {BASELINE_RULES}"
        )
    if not received:
        return own
    is_belief = isinstance(own, belief_module.GaussianBelief)

    if rule == "fixed-trust":
        if is_belief:
            return _fixed_trust(own, received, own_id)
        return np.vstack([own] + [received[j] for j in sorted(received)]).mean(axis=0)

    own_mean = _as_moment(own).mean if is_belief else np.asarray(own, dtype=float)
    vectors = {
        j: (_as_moment(v).mean if is_belief else np.asarray(v, dtype=float))
        for j, v in received.items()
    }
    mean = util.filter_kwargs(_MEAN_RULES[rule], own_mean, vectors, **rule_params)
    if is_belief:
        return _as_moment(own).replace(mean=mean)
    return mean
