import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from aptnet.errors import MetricError
from aptnet.metrics import max_buildup, plume_error, r_squared, rel_l2, rel_pressure_error


def test_r_squared_examples():
    z = np.array([0.0, 1.0, 2.0])
    assert r_squared(z, z) == 1.0
    assert r_squared(z, np.full(3, z.mean())) == 0.0
    assert r_squared(z, [0.0, 1.0, 1.0]) == pytest.approx(0.5)
    assert np.isnan(r_squared([2.0, 2.0], [1.0, 3.0]))
    with pytest.raises(MetricError):
        r_squared([1.0], [1.0])
    with pytest.raises(ValueError):
        r_squared([1.0, 2.0], [1.0, 2.0, 3.0])


def test_rel_l2_examples():
    z = np.array([3.0, 4.0])
    assert rel_l2(z, z) == 0.0
    assert rel_l2(z, 2 * z) == pytest.approx(1.0)
    assert rel_l2(z, [3.0, 0.0]) == pytest.approx(0.8)
    assert np.isnan(rel_l2(np.zeros(3), np.ones(3)))


def test_plume_error_examples():
    z = np.random.default_rng(0).uniform(size=10)
    assert plume_error(z, z) == 0.0
    value, empty = plume_error(np.zeros(5), np.full(5, 0.005), return_empty=True)
    assert value == 0.0 and empty
    truth, pred = np.zeros(6), np.zeros(6)
    truth[2], pred[2] = 0.5, 0.3
    assert plume_error(truth, pred) == pytest.approx(0.2, abs=1e-15)


def test_pressure_error_examples():
    z = np.arange(4.0)
    assert rel_pressure_error(z, z, 2.0) == 0.0
    assert rel_pressure_error(z, z + 0.3, 3.0) == pytest.approx(0.1)
    assert rel_pressure_error([0.0, 0.0], [1.0, 3.0], 10.0) == pytest.approx(0.2)
    with pytest.raises(MetricError):
        rel_pressure_error(z, z, 0.0)


def test_max_buildup():
    assert max_buildup([[1.0, 5.0]], [[0.0, 1.0]]) == 4.0


fields = arrays(np.float64, st.integers(2, 64), elements=st.floats(-1e3, 1e3, allow_nan=False))


@settings(max_examples=100)
@given(fields)
def test_identities(z):
    if np.ptp(z) > 0:
        assert r_squared(z, z) == 1.0
    if np.any(z != 0):
        assert rel_l2(z, z) == 0.0
    assert plume_error(z, z) == 0.0
    assert rel_pressure_error(z, z, 1.0) == 0.0


@settings(max_examples=50)
@given(fields, st.floats(0.5, 2.0))
def test_rel_l2_scaling(z, a):
    if np.linalg.norm(z) > 1e-6:
        assert rel_l2(z, a * z) == pytest.approx(abs(a - 1), abs=1e-9)
