"""
Useful functionality required across the simulator submodules,
such as the error taxonomy, input validation, and seeded random streams.
"""

import inspect
import warnings

import numpy as np

# Covariance eigenvalues below this are floored before any inversion
EIGEN_FLOOR = 1e-12

# Symmetry tolerance for covariance and precision matrices
SYMMETRY_ATOL = 1e-10

# Purpose tags of the independent random streams derived from a master seed
DATA_STREAM = 0
ATTACK_STREAM = 1
VALIDATION_STREAM = 2
TOPOLOGY_STREAM = 3
TEST_STREAM = 4
PLACEMENT_STREAM = 5


class ConfigurationError(ValueError):
    """Invalid argument, unknown identifier or malformed configuration field."""


class NumericDegeneracyError(ValueError):
    """A covariance or precision matrix is not positive definite."""


class AnalysisError(ValueError):
    """A metric cannot be computed from the supplied record."""


class InvariantBreach(RuntimeError):
    """Non-finite values appeared in a benign client's own beliefs.

    Parameters
    ----------
    client : int
        Identifier of the breaching client
    tick : int
        Joint tick during which the breach was detected
    """

    def __init__(self, client, tick, detail=""):
        self.client = client
        self.tick = tick
        message = f"Invariant breach: client {client} at joint tick {tick}"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class DegradedAttackWarning(UserWarning):
    """A model-poisoning attack could not be applied as configured."""


class DegeneracyWarning(UserWarning):
    """A covariance eigenvalue was floored before inversion."""


def validate_vector(vector, dim=None, name="vector"):
    """Check that ``vector`` is a 1-d real array, optionally of length ``dim``.

    Parameters
    ----------
    vector : array_like
        The values to check
    dim : int or None
        Required length
    name : str
        Name used in error messages

    Returns
    -------
    vector : np.ndarray, shape=(dim,)
        ``vector`` as a float array

    Raises
    ------
    ConfigurationError
        If the shape is wrong.
    """
    vector = np.asarray(vector, dtype=float)
    if vector.ndim != 1:
        raise ConfigurationError(
            f"{name} should be a 1-d array, but shape={vector.shape}"
        )
    if dim is not None and vector.shape[0] != dim:
        raise ConfigurationError(
            f"{name} has length {vector.shape[0]}, expected {dim}"
        )
    return vector


def validate_square(matrix, dim=None, name="matrix"):
    """Check that ``matrix`` is a symmetric (``dim``, ``dim``) array.

    Parameters
    ----------
    matrix : array_like
        The matrix to check
    dim : int or None
        Required size
    name : str
        Name used in error messages

    Returns
    -------
    matrix : np.ndarray, shape=(dim, dim)

    Raises
    ------
    ConfigurationError
        If the matrix is not square, has the wrong size, or is asymmetric.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ConfigurationError(
            f"{name} should be a square matrix, but shape={matrix.shape}"
        )
    if dim is not None and matrix.shape[0] != dim:
        raise ConfigurationError(
            f"{name} has shape {matrix.shape}, expected ({dim}, {dim})"
        )
    if np.all(np.isfinite(matrix)):
        asymmetry = np.max(np.abs(matrix - matrix.T)) if matrix.size else 0.0
        if asymmetry > SYMMETRY_ATOL:
            raise ConfigurationError(
                f"{name} is not symmetric (max asymmetry {asymmetry:.3g})"
            )
    return matrix


def check_positive_definite(matrix, name="covariance"):
    """Raise if ``matrix`` has a non-positive or non-finite eigenvalue.

    Parameters
    ----------
    matrix : np.ndarray, shape=(K, K)
        Symmetric matrix
    name : str
        Name used in error messages

    Returns
    -------
    eigenvalues : np.ndarray, shape=(K,)
        Eigenvalues of ``matrix`` in ascending order

    Raises
    ------
    NumericDegeneracyError
        Naming the smallest offending eigenvalue.
    """
    if not np.all(np.isfinite(matrix)):
        raise NumericDegeneracyError(f"{name} contains non-finite entries")
    eigenvalues = np.linalg.eigvalsh(matrix)
    if eigenvalues.size and eigenvalues[0] <= 0:
        raise NumericDegeneracyError(
            f"{name} is not positive definite: eigenvalue {eigenvalues[0]!r}"
        )
    return eigenvalues


def floor_variances(variances, floor=EIGEN_FLOOR):
    """Floor a vector of variances (or eigenvalues) at ``floor``.

    Parameters
    ----------
    variances : np.ndarray
        Positive values about to be inverted
    floor : float
        Smallest value allowed through

    Returns
    -------
    floored : np.ndarray
    n_floored : int
        How many entries were raised to ``floor``
    """
    low = variances < floor
    n_floored = int(np.count_nonzero(low))
    if n_floored:
        warnings.warn(
            f"{n_floored} variance(s) below {floor:g} floored before inversion",
            DegeneracyWarning,
            stacklevel=3,
        )
        variances = np.where(low, floor, variances)
    return variances, n_floored


def validate_fraction(value, name, allow_zero=False):
    """Check that ``value`` lies in (0, 1] (or [0, 1] with ``allow_zero``)."""
    value = float(value)
    lower_ok = value >= 0 if allow_zero else value > 0
    if not (lower_ok and value <= 1):
        interval = "[0, 1]" if allow_zero else "(0, 1]"
        raise ConfigurationError(f"{name}={value!r} must lie in {interval}")
    return value


def derive_seed(seed, *path):
    """Derive a child seed sequence from ``seed`` and an integer path.

    Each purpose (data, attacks, topology, test sets) and each client gets
    its own path, so no stream depends on how much another one consumed.
    """
    return np.random.SeedSequence(seed, spawn_key=tuple(int(p) for p in path))


def spawn_streams(seed, keys, purpose=0):
    """Create one independent random generator per integer key.

    Parameters
    ----------
    seed : int
        Master seed
    keys : iterable of int
        Stream identifiers (e.g. client ids)
    purpose : int
        Purpose tag mixed into the derivation path

    Returns
    -------
    streams : dict
        ``key -> np.random.Generator``; a key's stream depends only on
        ``(seed, purpose, key)``.
    """
    return {
        key: np.random.default_rng(derive_seed(seed, purpose, key))
        for key in sorted(keys)
    }


def has_kwargs(function):
    r"""Determine whether a function has \*\*kwargs.

    Parameters
    ----------
    function : callable
        The function to test

    Returns
    -------
    True if function accepts arbitrary keyword arguments.
    False otherwise.
    """
    sig = inspect.signature(function)

    for param in list(sig.parameters.values()):
        if param.kind == param.VAR_KEYWORD:
            return True

    return False


def filter_kwargs(_function, *args, **kwargs):
    r"""Call ``_function`` with only the keyword arguments it accepts.

    Lets :func:`p2pfl_sim.analysis.evaluate` and the baseline aggregators
    share one parameter bag.  If the target function already accepts
    \*\*kwargs, no filtering is performed.

    Parameters
    ----------
    _function : callable
        Function to call.  Can take in any number of args or kwargs
    *args
    **kwargs
        Arguments and keyword arguments to _function.
    """
    if has_kwargs(_function):
        return _function(*args, **kwargs)

    accepted = inspect.signature(_function).parameters
    filtered_kwargs = {
        kwarg: value for kwarg, value in kwargs.items() if kwarg in accepted
    }
    return _function(*args, **filtered_kwargs)
