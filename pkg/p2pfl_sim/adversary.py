"""
Compromised clients run exactly the same learning and aggregation code as
benign ones; the compromise enters only through two hooks.  Data-poisoning
attacks transform each freshly sampled batch before the client learns from it
(:func:`poison_data`), and model-poisoning attacks transform the outgoing
message after it has been built (:func:`poison_model`), leaving the
attacker's own beliefs untouched.

Conventions
-----------
Five attack kinds are supported:

* ``'label-flip-bias'``: every label is shifted by a common bias ``b``;
* ``'trojan'``: a fraction of the samples get a trigger added to their
  features and their label replaced by a target value;
* ``'bit-flip'``: selected bits of the IEEE-754 binary64 representation of a
  fraction of the transmitted mean coordinates are flipped;
* ``'general-random'``: ``ceil(C * K)`` uniformly chosen mean coordinates are
  multiplied by ``M``;
* ``'a-little-is-enough'``: every mean coordinate is set to
  ``mu_k - z * sigma_k`` where ``mu`` and ``sigma`` are the coordinate-wise
  mean and sample standard deviation of the benign messages sent in the same
  tick.

Model-poisoning transforms alter the transmitted mean only, unless
``tamper_covariance`` is set.

Metrics
-------
* :func:`p2pfl_sim.adversary.poison_data`: data-poisoning hook
* :func:`p2pfl_sim.adversary.poison_model`: model-poisoning hook
* :func:`p2pfl_sim.adversary.detection_probability`: chance that a client's
  support intersects the tampered coordinates
* :func:`p2pfl_sim.adversary.alie_supremum_z`: default ALIE deviation for a
  population

References
----------
  .. [#] G. Baruch, M. Baruch and Y. Goldberg. "A Little Is Not Enough:
      Circumventing Defenses For Distributed Learning", NeurIPS 2019.
  .. [#] T. Gu, B. Dolan-Gavitt and S. Garg. "BadNets: Identifying
      Vulnerabilities in the Machine Learning Model Supply Chain", 2017.
"""

import dataclasses
import math
import warnings

import numpy as np
from scipy import stats
from scipy.special import gammaln

from . import util

DATA_ATTACKS = ("label-flip-bias", "trojan")
MODEL_ATTACKS = ("bit-flip", "general-random", "a-little-is-enough")
VALID_ATTACKS = DATA_ATTACKS + MODEL_ATTACKS

BIAS = 1.0
# Highest exponent bit of a binary64 value
FLIP_BITS = (62,)
FLIP_FRACTION = 0.1
TAMPERED_FRACTION = 0.3
MULTIPLIER = 100.0
ALIE_Z = 1.5
TRIGGER_FRACTION = 0.5
TROJAN_TARGET = 10.0


@dataclasses.dataclass(frozen=True, eq=False)
class AttackSpec:
    """One poisoning behaviour and its parameters.

    Parameters
    ----------
    kind : str
        One of :data:`VALID_ATTACKS`
    bias : float
        Label shift ``b`` (label-flip-bias)
    trigger : np.ndarray or None
        Nonnegative vector added to triggered features (trojan)
    target : float
        Label given to triggered samples (trojan)
    trigger_fraction : float in (0, 1]
        Fraction of each batch that is triggered (trojan)
    bits : tuple of int
        Bit positions flipped, 0 = least significant mantissa bit (bit-flip)
    flip_fraction : float in (0, 1]
        Fraction of mean coordinates flipped (bit-flip)
    tampered_fraction : float in (0, 1]
        Fraction ``C`` of mean coordinates multiplied (general-random)
    multiplier : float > 1
        Factor ``M`` (general-random)
    z : float
        Deviation multiplier (a-little-is-enough)
    tamper_covariance : bool
        Also tamper the transmitted covariance diagonal (bit-flip,
        general-random)
    """

    kind: str
    bias: float = BIAS
    trigger: np.ndarray = None
    target: float = TROJAN_TARGET
    trigger_fraction: float = TRIGGER_FRACTION
    bits: tuple = FLIP_BITS
    flip_fraction: float = FLIP_FRACTION
    tampered_fraction: float = TAMPERED_FRACTION
    multiplier: float = MULTIPLIER
    z: float = ALIE_Z
    tamper_covariance: bool = False

    def __post_init__(self):
        if self.kind not in VALID_ATTACKS:
            raise util.ConfigurationError(
                f"unknown attack kind {self.kind!r}; expected one of {VALID_ATTACKS}"
            )
        util.validate_fraction(self.trigger_fraction, "trigger_fraction")
        util.validate_fraction(self.flip_fraction, "flip_fraction")
        util.validate_fraction(self.tampered_fraction, "tampered_fraction")
        if not float(self.multiplier) > 1:
            raise util.ConfigurationError(f"multiplier must be > 1, got {self.multiplier!r}")
        bits = tuple(int(bit) for bit in np.atleast_1d(self.bits))
        if not bits or any(bit < 0 or bit > 63 for bit in bits):
            raise util.ConfigurationError(f"bits must lie in 0..63, got {self.bits!r}")
        object.__setattr__(self, "bits", bits)
        if self.trigger is not None:
            trigger = util.validate_vector(self.trigger, name="trigger")
            if np.any(trigger < 0):
                raise util.ConfigurationError("trigger must be nonnegative")
            trigger = trigger.copy()
            trigger.flags.writeable = False
            object.__setattr__(self, "trigger", trigger)
        elif self.kind == "trojan":
            raise util.ConfigurationError("a trojan attack needs a trigger vector")

    @property
    def poisons_data(self):
        return self.kind in DATA_ATTACKS

    @property
    def poisons_model(self):
        return self.kind in MODEL_ATTACKS

    def check_dimension(self, dim):
        """Raise unless the trigger (if any) has length ``dim``."""
        if self.trigger is not None and self.trigger.shape[0] != dim:
            raise util.ConfigurationError(
                f"trigger has length {self.trigger.shape[0]}, model has dimension {dim}"
            )

    def to_dict(self):
        """Plain-data form with every field materialized."""
        data = dataclasses.asdict(self)
        data["trigger"] = None if self.trigger is None else self.trigger.tolist()
        data["bits"] = list(self.bits)
        return data

    @classmethod
    def from_dict(cls, data):
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - fields)
        if unknown:
            raise util.ConfigurationError(f"unknown attack field(s): {', '.join(unknown)}")
        return cls(**data)


def triggered_count(n, fraction):
    """Number of triggered samples in a batch of ``n``."""
    return int(round(fraction * n))


def coordinate_count(dim, fraction):
    """Coordinates covered by ``fraction`` of ``dim``: ``ceil(fraction * dim)``,
    at least 1, ignoring float noise in the product."""
    return max(1, math.ceil(round(fraction * dim, 9)))


def poison_data(batch, spec, rng):
    """Apply a data-poisoning attack to a batch.

    Examples
    --------
    >>> spec = AttackSpec("label-flip-bias", bias=1.0)
    >>> features, labels = poison_data((np.zeros((2, 1)), np.array([0.2, -0.5])),
    ...                                spec, np.random.default_rng(0))
    >>> labels
    array([1.2, 0.5])

    Parameters
    ----------
    batch : tuple
        ``(features, labels)`` as returned by
        :func:`p2pfl_sim.belief.sample_batch`
    spec : AttackSpec
        A label-flip-bias or trojan attack
    rng : np.random.Generator
        The attacker's attack stream

    Returns
    -------
    features : np.ndarray, shape=(n, K)
    labels : np.ndarray, shape=(n,)

    Raises
    ------
    ConfigurationError
        If ``spec`` is not a data-poisoning attack.
    """
    if not spec.poisons_data:
        raise util.ConfigurationError(f"{spec.kind!r} is not a data-poisoning attack")
    features, labels = batch
    features = np.array(features, dtype=float)
    labels = np.array(labels, dtype=float)
    if spec.kind == "label-flip-bias":
        return features, labels + spec.bias

    spec.check_dimension(features.shape[1])
    n = labels.shape[0]
    chosen = rng.choice(n, size=triggered_count(n, spec.trigger_fraction), replace=False)
    features[chosen] = np.maximum(features[chosen] + spec.trigger, 0.0)
    labels[chosen] = spec.target
    return features, labels


def flip_bits(values, bits):
    """Flip bit positions ``bits`` of each binary64 entry of ``values``.

    Examples
    --------
    >>> flip_bits(np.array([1.0]), (63,))
    array([-1.])
    """
    words = np.array(values, dtype=np.float64).view(np.uint64)
    mask = np.uint64(0)
    for bit in bits:
        mask |= np.uint64(1) << np.uint64(bit)
    return (words ^ mask).view(np.float64)


def _tamper_diagonal(covariance, index, transform):
    covariance = np.array(covariance, dtype=float)
    diagonal = np.diag(covariance).copy()
    diagonal[index] = transform(diagonal[index])
    covariance[index, index] = diagonal[index]
    return covariance


def _bit_flip(outgoing, spec, rng):
    index = np.sort(
        rng.choice(outgoing.dim, size=coordinate_count(outgoing.dim, spec.flip_fraction), replace=False)
    )
    mean = outgoing.mean.copy()
    mean[index] = flip_bits(mean[index], spec.bits)
    covariance = outgoing.covariance
    if spec.tamper_covariance:
        covariance = _tamper_diagonal(covariance, index, lambda d: flip_bits(d, spec.bits))
    return outgoing.replace(mean=mean, covariance=covariance)


def _general_random(outgoing, spec, rng):
    index = np.sort(
        rng.choice(
            outgoing.dim, size=coordinate_count(outgoing.dim, spec.tampered_fraction), replace=False
        )
    )
    mean = outgoing.mean.copy()
    with np.errstate(over="ignore"):
        mean[index] = mean[index] * spec.multiplier
    covariance = outgoing.covariance
    if spec.tamper_covariance:
        with np.errstate(over="ignore"):
            covariance = _tamper_diagonal(covariance, index, lambda d: d * spec.multiplier)
    return outgoing.replace(mean=mean, covariance=covariance)


def alie_vector(context, z):
    """``mean - z * std`` over the rows of ``context`` (sample std, 0 for one row)."""
    context = np.atleast_2d(np.asarray(context, dtype=float))
    center = context.mean(axis=0)
    if context.shape[0] < 2:
        return center
    return center - z * context.std(axis=0, ddof=1)


def alie_supremum_z(n, m):
    """Largest ALIE deviation that still hides among the benign updates.

    With ``n`` clients of which ``m`` are compromised, the attackers need
    ``s = floor(n / 2 + 1) - m`` benign supporters and may move as far as the
    standard normal quantile at ``(n - s) / n``.

    Examples
    --------
    >>> round(alie_supremum_z(50, 10), 4)
    0.4677

    Parameters
    ----------
    n : int
        Number of clients
    m : int
        Number of compromised clients, ``1 <= m < n``

    Returns
    -------
    z : float

    Raises
    ------
    ConfigurationError
        If ``m`` is out of range or the supremum is not finite and positive.
    """
    if int(m) != m or not 1 <= m < n:
        raise util.ConfigurationError(f"compromised count must lie in [1, {n - 1}], got {m!r}")
    supporters = n // 2 + 1 - m
    z = float(stats.norm.ppf((n - supporters) / n))
    if not (math.isfinite(z) and z > 0):
        raise util.ConfigurationError(f"no positive ALIE deviation for {m} of {n} clients")
    return z


def _a_little_is_enough(outgoing, context, spec):
    if context is None or len(context) == 0:
        warnings.warn(
            "a-little-is-enough attack saw no benign messages; transmitting the unmodified belief",
            util.DegradedAttackWarning,
            stacklevel=3,
        )
        return outgoing
    return outgoing.replace(mean=alie_vector(context, spec.z))


def poison_model(outgoing, context, spec, rng):
    """Apply a model-poisoning attack to an outbound message.

    Examples
    --------
    >>> b = p2pfl_sim.belief.GaussianBelief(np.array([1.0, 2.0]), np.eye(2))
    >>> spec = AttackSpec("a-little-is-enough", z=1.0)
    >>> poison_model(b, np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]), spec, None).mean
    array([0., 0.])

    Parameters
    ----------
    outgoing : p2pfl_sim.belief.GaussianBelief
        The message the attacker would otherwise send
    context : np.ndarray, shape=(n, K), or None
        Means of the benign messages sent in the same tick (ALIE only)
    spec : AttackSpec
        A bit-flip, general-random or a-little-is-enough attack
    rng : np.random.Generator
        The attacker's attack stream

    Returns
    -------
    poisoned : p2pfl_sim.belief.GaussianBelief
        A new belief; ``outgoing`` is never modified.  Non-finite values
        produced by bit flips are kept.

    Raises
    ------
    ConfigurationError
        If ``spec`` is not a model-poisoning attack.
    """
    if not spec.poisons_model:
        raise util.ConfigurationError(f"{spec.kind!r} is not a model-poisoning attack")
    if spec.kind == "bit-flip":
        return _bit_flip(outgoing, spec, rng)
    if spec.kind == "general-random":
        return _general_random(outgoing, spec, rng)
    return _a_little_is_enough(outgoing, context, spec)


def _log_binomial(n, k):
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def detection_probability(K, L, C):
    """Probability that a client's support meets the tampered coordinates.

    With ``L * K`` coordinates learned by the client and ``C * K`` uniformly
    chosen tampered coordinates (both counted by :func:`coordinate_count`, as
    in :func:`poison_model`),

    .. math::

        P = 1 - \\binom{(1 - L) K}{C K} / \\binom{K}{C K}

    evaluated in log-gamma arithmetic.

    Examples
    --------
    >>> round(detection_probability(3, 1 / 3, 1 / 3), 12)
    0.333333333333

    Parameters
    ----------
    K : int >= 1
        Model size
    L : float in (0, 1]
        Fraction of coordinates in the client's support
    C : float in (0, 1]
        Fraction of tampered coordinates

    Returns
    -------
    probability : float in [0, 1]

    Raises
    ------
    ConfigurationError
        For out-of-range arguments.
    """
    if int(K) != K or K < 1:
        raise util.ConfigurationError(f"K must be a positive integer, got {K!r}")
    util.validate_fraction(L, "L")
    util.validate_fraction(C, "C")
    K = int(K)
    learned = coordinate_count(K, L)
    tampered = coordinate_count(K, C)
    free = K - learned
    if free < tampered:
        return 1.0
    ratio = np.exp(_log_binomial(free, tampered) - _log_binomial(K, tampered))
    return float(np.clip(1.0 - ratio, 0.0, 1.0))
