"""
Every client in the network keeps Gaussian beliefs over a shared linear model
parameter and learns it from a private, non-IID stream of labelled samples.
This module holds the value types for those beliefs, the linear data model,
and the synthetic dataset generators.

Conventions
-----------
Model parameters are real vectors of length ``K``.  Coordinates are indexed
from 0; the support set of a client lists the coordinates its features can
activate.  Client identifiers are positive integers.

A :class:`GaussianBelief` is stored in one of two forms:

* moment form: ``mean`` is the parameter estimate and ``covariance`` its
  covariance matrix;
* information form: ``mean`` holds the precision-weighted mean
  (precision @ estimate) and ``covariance`` holds the precision matrix.
  The :attr:`GaussianBelief.precision` and
  :attr:`GaussianBelief.weighted_mean` accessors name these roles.

When ``diagonal`` is set, every off-diagonal entry is exactly zero.

Features are nonnegative and vanish outside the client's support.  In the
default ``"single"`` feature mode each sample activates one support
coordinate chosen uniformly at random, drawn from U(0.1, 1.1); in
``"dense"`` mode every support coordinate is active.  Labels follow
``y = <theta_star, x> + eta`` with ``eta ~ N(0, noise_variance[client])``.

Operations
----------
* :func:`p2pfl_sim.belief.sample_batch`: draw a client's next batch
* :func:`p2pfl_sim.belief.to_information_form`: moment -> information form
* :func:`p2pfl_sim.belief.to_moment_form`: information -> moment form
"""

import dataclasses

import numpy as np

from . import util

MOMENT = "moment"
INFORMATION = "information"

# Initial beliefs are N(0, PRIOR_VARIANCE * I)
PRIOR_VARIANCE = 10.0

NOISE_VARIANCE = 0.01

FEATURE_LOW = 0.1
FEATURE_HIGH = 1.1

FEATURE_MODES = ("single", "dense")


def _frozen(array):
    array = np.array(array, dtype=float)
    array.flags.writeable = False
    return array


@dataclasses.dataclass(frozen=True, eq=False)
class GaussianBelief:
    """A Gaussian belief over the model parameter.

    Parameters
    ----------
    mean : np.ndarray, shape=(K,)
        Estimate (moment form) or precision-weighted mean (information form)
    covariance : np.ndarray, shape=(K, K)
        Covariance (moment form) or precision (information form)
    form : str
        ``'moment'`` or ``'information'``
    diagonal : bool
        Whether the matrix is constrained to be diagonal
    """

    mean: np.ndarray
    covariance: np.ndarray
    form: str = MOMENT
    diagonal: bool = False

    def __post_init__(self):
        if self.form not in (MOMENT, INFORMATION):
            raise util.ConfigurationError(
                f"form must be {MOMENT!r} or {INFORMATION!r}, got {self.form!r}"
            )
        mean = util.validate_vector(self.mean, name="mean")
        covariance = util.validate_square(
            self.covariance, dim=mean.shape[0], name="covariance"
        )
        if self.diagonal:
            covariance = np.diag(np.diag(covariance))
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "covariance", _frozen(covariance))

    @classmethod
    def prior(cls, dim, variance=PRIOR_VARIANCE, diagonal=False):
        """Zero-mean isotropic belief ``N(0, variance * I)``."""
        return cls(np.zeros(dim), variance * np.eye(dim), diagonal=diagonal)

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def precision(self):
        """Precision matrix (information form only)."""
        self._require(INFORMATION)
        return self.covariance

    @property
    def weighted_mean(self):
        """Precision-weighted mean (information form only)."""
        self._require(INFORMATION)
        return self.mean

    def variances(self):
        """Marginal variances ``diag(covariance)`` (moment form only)."""
        self._require(MOMENT)
        return np.diag(self.covariance).copy()

    def trace(self):
        """Trace of the stored matrix (covariance or precision)."""
        return float(np.trace(self.covariance))

    def is_finite(self):
        return bool(np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.covariance)))

    def same_as(self, other):
        """Bitwise equality of form, flag, mean and matrix."""
        return (
            self.form == other.form
            and self.diagonal == other.diagonal
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.covariance, other.covariance)
        )

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def _require(self, form):
        if self.form != form:
            raise util.ConfigurationError(
                f"operation requires a belief in {form} form, got {self.form}"
            )


def to_information_form(belief, floor=util.EIGEN_FLOOR):
    """Convert a moment-form belief to information form.

    Eigenvalues (variances, in diagonal mode) that are positive but smaller
    than ``floor`` are raised to ``floor`` before inversion and reported
    with a :class:`p2pfl_sim.util.DegeneracyWarning`.

    Examples
    --------
    >>> b = GaussianBelief(np.array([1.0, 2.0]), np.diag([2.0, 4.0]))
    >>> to_information_form(b).precision
    array([[0.5 , 0.  ],
           [0.  , 0.25]])

    Parameters
    ----------
    belief : GaussianBelief
        Belief in moment or information form
    floor : float
        Eigenvalue floor

    Returns
    -------
    belief : GaussianBelief
        The same belief in information form

    Raises
    ------
    NumericDegeneracyError
        If the covariance has a non-positive or non-finite eigenvalue.
    """
    if belief.form == INFORMATION:
        return belief
    precision = _invert_spd(belief.covariance, belief.diagonal, floor, "covariance")
    return GaussianBelief(
        precision @ belief.mean, precision, form=INFORMATION, diagonal=belief.diagonal
    )


def to_moment_form(belief, floor=util.EIGEN_FLOOR):
    """Convert an information-form belief back to moment form.

    Parameters
    ----------
    belief : GaussianBelief
        Belief in information or moment form
    floor : float
        Eigenvalue floor applied to the precision before inversion

    Returns
    -------
    belief : GaussianBelief
        The same belief in moment form

    Raises
    ------
    NumericDegeneracyError
        If the precision has a non-positive or non-finite eigenvalue.
    """
    if belief.form == MOMENT:
        return belief
    covariance = _invert_spd(belief.covariance, belief.diagonal, floor, "precision")
    return GaussianBelief(
        covariance @ belief.mean, covariance, form=MOMENT, diagonal=belief.diagonal
    )


def _invert_spd(matrix, diagonal, floor, name):
    if diagonal:
        values = np.diag(matrix)
        if not np.all(np.isfinite(values)):
            raise util.NumericDegeneracyError(f"{name} contains non-finite entries")
        if np.any(values <= 0):
            raise util.NumericDegeneracyError(
                f"{name} is not positive definite: eigenvalue {values.min()!r}"
            )
        values, _ = util.floor_variances(values, floor)
        return np.diag(1.0 / values)
    util.check_positive_definite(matrix, name=name)
    eigenvalues, eigenvectors = np.linalg.eigh(matrix)
    eigenvalues, _ = util.floor_variances(eigenvalues, floor)
    inverse = (eigenvectors / eigenvalues) @ eigenvectors.T
    return 0.5 * (inverse + inverse.T)


@dataclasses.dataclass(frozen=True, eq=False)
class LinearTask:
    """The decentralized linear regression problem.

    Parameters
    ----------
    theta_star : np.ndarray, shape=(K,)
        True model parameter
    noise_variance : dict
        ``client -> label noise variance`` (>= 0)
    support_sets : dict
        ``client -> tuple`` of coordinates the client's features can activate
    feature_mode : str
        ``'single'`` or ``'dense'``
    """

    theta_star: np.ndarray
    noise_variance: dict
    support_sets: dict
    feature_mode: str = "single"

    def __post_init__(self):
        theta = _frozen(util.validate_vector(self.theta_star, name="theta_star"))
        object.__setattr__(self, "theta_star", theta)
        if self.feature_mode not in FEATURE_MODES:
            raise util.ConfigurationError(
                f"feature_mode must be one of {FEATURE_MODES}, got {self.feature_mode!r}"
            )
        if set(self.noise_variance) != set(self.support_sets):
            raise util.ConfigurationError(
                "noise_variance and support_sets must name the same clients"
            )
        supports = {}
        for client, support in sorted(self.support_sets.items()):
            support = tuple(sorted(set(int(k) for k in support)))
            if not support:
                raise util.ConfigurationError(f"client {client} has an empty support set")
            if support[0] < 0 or support[-1] >= theta.shape[0]:
                raise util.ConfigurationError(
                    f"client {client} support {support} outside 0..{theta.shape[0] - 1}"
                )
            supports[int(client)] = support
        noise = {}
        for client, variance in sorted(self.noise_variance.items()):
            variance = float(variance)
            if not np.isfinite(variance) or variance < 0:
                raise util.ConfigurationError(
                    f"client {client} noise variance must be >= 0, got {variance!r}"
                )
            noise[int(client)] = variance
        object.__setattr__(self, "support_sets", supports)
        object.__setattr__(self, "noise_variance", noise)

    @property
    def dim(self):
        return self.theta_star.shape[0]

    @property
    def clients(self):
        return tuple(sorted(self.support_sets))

    def check_client(self, client):
        if client not in self.support_sets:
            raise util.ConfigurationError(
                f"unknown client id {client!r}; known ids: {list(self.clients)}"
            )

    def sample_features(self, client, n, rng):
        """Draw ``n`` feature vectors for ``client``.

        Returns
        -------
        features : np.ndarray, shape=(n, K)
        """
        self.check_client(client)
        support = np.asarray(self.support_sets[client])
        features = np.zeros((n, self.dim))
        if self.feature_mode == "single":
            picks = support[rng.integers(len(support), size=n)]
            features[np.arange(n), picks] = rng.uniform(FEATURE_LOW, FEATURE_HIGH, size=n)
        else:
            features[:, support] = rng.uniform(
                FEATURE_LOW, FEATURE_HIGH, size=(n, len(support))
            )
        return features

    def label(self, client, features, rng):
        """Noisy labels ``<theta_star, x> + eta`` for the rows of ``features``."""
        self.check_client(client)
        features = np.atleast_2d(features)
        noise = rng.normal(0.0, np.sqrt(self.noise_variance[client]), size=features.shape[0])
        return features @ self.theta_star + noise

    def is_sufficient(self, benign):
        """Whether the benign clients' supports jointly cover every coordinate.

        Parameters
        ----------
        benign : iterable of int
            Benign client ids

        Returns
        -------
        bool
        """
        covered = set()
        for client in benign:
            self.check_client(client)
            covered.update(self.support_sets[client])
        return covered == set(range(self.dim))

    def sample_test_set(self, n, rng):
        """Noiseless dense test inputs covering every coordinate.

        Returns
        -------
        features : np.ndarray, shape=(n, K)
        labels : np.ndarray, shape=(n,)
        """
        features = rng.uniform(FEATURE_LOW, FEATURE_HIGH, size=(n, self.dim))
        return features, features @ self.theta_star


def sample_batch(task, client, batch_size, rng):
    """Draw a batch of labelled samples from a client's data stream.

    Examples
    --------
    >>> task = LinearTask(np.array([-0.7179, 1.3171, -0.6441]),
    ...                   {1: 0.01}, {1: (0,)})
    >>> features, labels = sample_batch(task, 1, 5, np.random.default_rng(0))
    >>> bool(np.all(features[:, 1:] == 0))
    True

    Parameters
    ----------
    task : LinearTask
        The regression problem
    client : int
        Client whose stream is sampled
    batch_size : int > 0
        Number of samples
    rng : np.random.Generator
        The client's private stream

    Returns
    -------
    features : np.ndarray, shape=(batch_size, K)
        Nonnegative features supported on the client's support set
    labels : np.ndarray, shape=(batch_size,)

    Raises
    ------
    ConfigurationError
        For an unknown client or a non-positive batch size.
    """
    task.check_client(client)
    if int(batch_size) < 1:
        raise util.ConfigurationError(f"batch_size must be >= 1, got {batch_size!r}")
    features = task.sample_features(client, int(batch_size), rng)
    return features, task.label(client, features, rng)


@dataclasses.dataclass
class ClientState:
    """Mutable per-client simulation state, owned by one worker per tick.

    The local belief is only ever written by data observations; aggregation
    touches the social belief alone.
    """

    id: int
    local_belief: GaussianBelief
    social_belief: GaussianBelief
    cycle_length: int = 1
    compromise: object = None
    rng: np.random.Generator = None
    attack_rng: np.random.Generator = None
    local_clock: int = 0
    local_model_frozen: bool = False
    terminated: bool = False
    validation_history: list = dataclasses.field(default_factory=list)

    def advance_clock(self):
        self.local_clock += 1
        return self.local_clock

    @property
    def is_compromised(self):
        return self.compromise is not None
