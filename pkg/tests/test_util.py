"""Unit tests for utils"""

import warnings

import pytest
import numpy as np
import p2pfl_sim
from p2pfl_sim import util


def test_error_taxonomy():
    # Every configuration-type error is also a ValueError
    for error in (util.ConfigurationError, util.NumericDegeneracyError, util.AnalysisError):
        assert issubclass(error, ValueError)
    breach = util.InvariantBreach(3, 17, "non-finite mean")
    assert isinstance(breach, RuntimeError)
    assert breach.client == 3 and breach.tick == 17
    assert "client 3" in str(breach) and "tick 17" in str(breach)


@pytest.mark.parametrize("vector", [np.zeros((2, 2)), 1.0])
def test_validate_vector_shape(vector):
    with pytest.raises(util.ConfigurationError):
        util.validate_vector(vector)


def test_validate_vector_length():
    assert np.array_equal(util.validate_vector([1, 2], 2), [1.0, 2.0])
    with pytest.raises(util.ConfigurationError, match="expected 3"):
        util.validate_vector([1, 2], 3)


@pytest.mark.parametrize(
    "matrix",
    [np.zeros(3), np.zeros((2, 3)), np.array([[1.0, 0.5], [0.0, 1.0]])],
)
def test_validate_square_bad(matrix):
    with pytest.raises(util.ConfigurationError):
        util.validate_square(matrix)


def test_validate_square_nonfinite():
    # Asymmetry is not checked once infinities appear
    matrix = np.array([[np.inf, 0.0], [1.0, 1.0]])
    assert util.validate_square(matrix).shape == (2, 2)


def test_check_positive_definite():
    eigenvalues = util.check_positive_definite(np.diag([2.0, 1.0]))
    assert np.allclose(eigenvalues, [1.0, 2.0])
    with pytest.raises(util.NumericDegeneracyError, match="eigenvalue"):
        util.check_positive_definite(np.diag([1.0, 0.0]))
    with pytest.raises(util.NumericDegeneracyError, match="non-finite"):
        util.check_positive_definite(np.diag([1.0, np.nan]))


def test_floor_variances():
    with pytest.warns(util.DegeneracyWarning, match="1 variance"):
        floored, n = util.floor_variances(np.array([1.0, 1e-15]))
    assert n == 1
    assert np.array_equal(floored, [1.0, util.EIGEN_FLOOR])

    with warnings.catch_warnings():
        warnings.simplefilter("error")
        floored, n = util.floor_variances(np.array([1.0, 2.0]))
    assert n == 0


@pytest.mark.parametrize("value", [0.0, -0.1, 1.5, np.nan])
def test_validate_fraction_bad(value):
    with pytest.raises(util.ConfigurationError):
        util.validate_fraction(value, "fraction")


def test_validate_fraction_zero():
    assert util.validate_fraction(0, "fraction", allow_zero=True) == 0.0
    assert util.validate_fraction(1, "fraction") == 1.0


def test_spawn_streams_independent():
    # A stream depends only on (seed, purpose, key)
    few = util.spawn_streams(7, [1, 2])
    many = util.spawn_streams(7, [1, 2, 3, 4])
    few[1].random(1000)
    assert few[2].random() == many[2].random()
    assert many[1].random() != many[2].random()

    other = util.spawn_streams(7, [1], purpose=util.ATTACK_STREAM)
    assert other[1].random() != util.spawn_streams(7, [1])[1].random()


def test_derive_seed_reproducible():
    a = np.random.default_rng(util.derive_seed(3, util.DATA_STREAM, 5)).random(4)
    b = np.random.default_rng(util.derive_seed(3, util.DATA_STREAM, 5)).random(4)
    c = np.random.default_rng(util.derive_seed(4, util.DATA_STREAM, 5)).random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_has_kwargs():
    def f1(_):
        return None

    def f2(_=5):
        return None

    def f3(*_):
        return None

    def f4(_, **kw):
        return None

    def f5(_=5, **kw):
        return None

    assert not p2pfl_sim.util.has_kwargs(f1)
    assert not p2pfl_sim.util.has_kwargs(f2)
    assert not p2pfl_sim.util.has_kwargs(f3)
    assert p2pfl_sim.util.has_kwargs(f4)
    assert p2pfl_sim.util.has_kwargs(f5)


def test_filter_kwargs():
    def trim_only(values, trim=0):
        return values, trim

    def anything(values, **kwargs):
        return values, kwargs

    assert util.filter_kwargs(trim_only, 1, trim=2, tau=3.0) == (1, 2)
    assert util.filter_kwargs(anything, 1, trim=2, tau=3.0) == (1, {"trim": 2, "tau": 3.0})
