import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shiftbound.rng import Moments, chunk_sizes, derive_seed, make_rng, monte_carlo


def test_same_seed_same_stream():
    a = make_rng(5, "x", 2).random(8)
    b = make_rng(5, "x", 2).random(8)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, make_rng(5, "x", 3).random(8))
    assert not np.array_equal(a, make_rng(6, "x", 2).random(8))


def test_derive_seed_is_stable():
    assert derive_seed(1, "a") == derive_seed(1, "a")
    assert derive_seed(1, "a") != derive_seed(1, "b")


def test_chunk_sizes():
    assert chunk_sizes(10, 4) == [4, 4, 2]
    assert chunk_sizes(8, 4) == [4, 4]
    with pytest.raises(ValueError):
        chunk_sizes(0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=60), st.integers(1, 59))
def test_merge_matches_direct_moments(values, cut):
    x = np.array(values)
    cut = min(cut, x.size - 1)
    acc = Moments.from_block(x[:cut]).merge(Moments.from_block(x[cut:]))
    assert acc.count == x.size
    np.testing.assert_allclose(acc.mean, x.mean(), rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(acc.variance, x.var(ddof=1), rtol=1e-7, atol=1e-6)


def test_vector_moments_covariance():
    x = make_rng(0).standard_normal((500, 3))
    acc = Moments(3)
    for block in np.array_split(x, 7):
        acc.update(block)
    np.testing.assert_allclose(acc.mean, x.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(acc.variance, np.cov(x.T), atol=1e-12)


def test_worker_count_does_not_change_result():
    draw = lambda rng, n: rng.standard_normal(n) ** 2
    one = monte_carlo(draw, 50_000, 3, "w", chunk=4096, workers=1).estimate()
    four = monte_carlo(draw, 50_000, 3, "w", chunk=4096, workers=4).estimate()
    assert one == four


def test_standard_error_scale():
    est = monte_carlo(lambda rng, n: rng.standard_normal(n), 40_000, 1, "se").estimate()
    np.testing.assert_allclose(est.std_error, 1 / np.sqrt(40_000), rtol=0.05)
    assert abs(est.estimate) < 3 * est.std_error + 1e-3
