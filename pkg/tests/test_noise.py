import numpy as np
import pytest
from scipy import stats

from lqmfc.model import InitialLaw, ModelError
from lqmfc.noise import NoisePlan


def test_streams_are_reproducible_and_labelled():
    a, b = NoisePlan(42, 100, 1.0), NoisePlan(42, 100, 1.0)
    np.testing.assert_array_equal(a.common(3), b.common(3))
    np.testing.assert_array_equal(a.idio(3, 7), b.idio(3, 7))
    assert not np.array_equal(a.common(3), a.common(4))
    assert not np.array_equal(a.idio(3, 7), a.idio(7, 3))
    assert not np.array_equal(a.common(0), NoisePlan(43, 100, 1.0).common(0))


def test_nesting_and_order_independence():
    plan = NoisePlan(9, 50, 1.0)
    big = plan.idio_block([5, 1, 2], 16)
    small = plan.idio_block([2, 5], 8)
    np.testing.assert_array_equal(big[0, :8], small[1])
    np.testing.assert_array_equal(big[2, :8], small[0])
    law = InitialLaw("gaussian", 0.0, 1.0)
    np.testing.assert_array_equal(plan.init_block(law, [1], 16)[0, :8], plan.init_block(law, [1], 8)[0])


def test_increments_are_gaussian_with_variance_dt():
    plan = NoisePlan(1, 1000, 2.0)
    inc = plan.idio_block(range(20), 10).ravel() / np.sqrt(plan.dt)
    assert abs(inc.mean()) < 4 / np.sqrt(inc.size)
    assert abs(inc.var() - 1.0) < 4 * np.sqrt(2.0 / inc.size)
    assert stats.kstest(inc[:20000], "norm").pvalue > 1e-3


def test_plan_validation():
    with pytest.raises(ModelError):
        NoisePlan(-1, 10, 1.0)
    with pytest.raises(ModelError):
        NoisePlan(1, 0, 1.0)
    with pytest.raises(ModelError):
        NoisePlan(1, 10, 1.0).generator("bogus", 0)
