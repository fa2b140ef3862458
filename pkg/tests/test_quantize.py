import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cqvae import autodiff as ad
from cqvae import quantize as q
from cqvae.autodiff import Tensor


def random_prob_matrix(rng, m, n):
    x = rng.exponential(size=(m, n))
    return x / x.sum(axis=1, keepdims=True)


def test_coordinates_are_evenly_spaced():
    c = q.coordinates(11)
    assert c[0] == -2.0 and c[-1] == 2.0
    assert np.allclose(np.diff(c), 0.4)


def test_coordinates_must_increase():
    with pytest.raises(ValueError):
        q.check_coordinates([0.0, 0.0, 1.0])


def test_coordinate_map_selects_columns():
    c = np.array([-1.5, -0.5, 0.5, 1.5])
    z = np.eye(4)[:3]
    assert np.array_equal(q.coordinate_map(z, c), c[:3])


def test_coordinate_map_uniform_row_gives_mean():
    c = q.coordinates(7, -1.0, 3.0)
    z = np.full((5, 7), 1 / 7)
    assert np.allclose(q.coordinate_map(z, c), c.mean())


def test_coordinate_map_small_example():
    z = np.array([[0, 1, 0], [0, 0, 1]], dtype=float)
    assert np.array_equal(q.coordinate_map(z, np.array([-1.0, 0.0, 1.0])), [0.0, 1.0])


def test_coordinate_map_dimension_mismatch():
    with pytest.raises(ad.ShapeError):
        q.coordinate_map(np.ones((2, 3)) / 3, np.arange(4.0))


def test_coordinate_map_tensor_gradient():
    c = np.array([-1.0, 0.0, 2.0])
    z = Tensor(np.full((2, 3), 1 / 3), requires_grad=True)
    ad.backward(ad.sum_(q.coordinate_map(z, c)))
    assert np.allclose(z.grad, np.tile(c, (2, 1)))


@pytest.mark.parametrize("m,n,expected", [(8, 10, 10 ** 8), (64, 11, 11 ** 64), (1, 1, 1)])
def test_count_codes_exact(m, n, expected):
    got = q.count_codes(m, n)
    assert isinstance(got, int) and got == expected


def test_entropy_examples():
    assert q.entropy(np.eye(5)[[0, 3, 1]]) == 0.0
    assert math.isclose(q.entropy(np.full((8, 10), 0.1)), 8 * math.log(10), abs_tol=1e-9)
    assert math.isclose(q.entropy([[0.5, 0.5]]), math.log(2), abs_tol=1e-12)


def test_entropy_rejects_negative():
    with pytest.raises(ValueError):
        q.entropy([[1.5, -0.5]])


def test_kl_identity_on_random_matrices():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        m, n = rng.integers(1, 9), rng.integers(2, 12)
        z = random_prob_matrix(rng, m, n)
        rows = np.sum(z * np.log(z * n), axis=1)  # elementwise oracle
        assert np.allclose(rows, math.log(n) - q.row_entropy(z), atol=1e-9)
        assert math.isclose(q.kl_to_uniform(z), rows.sum(), abs_tol=1e-9)


def test_entropy_tensor_matches_numpy():
    rng = np.random.default_rng(1)
    z = random_prob_matrix(rng, 4, 6)
    assert math.isclose(q.entropy_tensor(Tensor(np.log(z))).item(), q.entropy(z), rel_tol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(2, 9), st.integers(0, 2 ** 32 - 1))
def test_entropy_bounds(m, n, seed):
    z = random_prob_matrix(np.random.default_rng(seed), m, n)
    h = q.entropy(z)
    assert -1e-12 <= h <= m * math.log(n) + 1e-9
    assert q.kl_to_uniform(z) >= -1e-9


def test_check_probability_matrix():
    q.check_probability_matrix(np.full((2, 4), 0.25))
    with pytest.raises(ValueError):
        q.check_probability_matrix([[0.5, 0.6]])


def test_gumbel_nonpositive_temperature():
    with pytest.raises(ValueError):
        q.gumbel_softmax_sample(np.full((1, 3), 1 / 3), 0.0, rng=np.random.default_rng(0))


def test_degenerate_row_always_sampled():
    rng = np.random.default_rng(2)
    for _ in range(100):
        assert np.array_equal(q.gumbel_max_sample(np.array([[1.0, 0.0, 0.0]]), rng), [[1.0, 0.0, 0.0]])


def test_low_temperature_limit_is_gumbel_max():
    rng = np.random.default_rng(3)
    pi = random_prob_matrix(rng, 6, 5)
    g = q.gumbel_noise(pi.shape, rng)
    soft = q.gumbel_softmax_sample(pi, 1e-3, noise=g)
    assert np.array_equal(q.harden(soft), q.gumbel_max_sample(pi, noise=g))
    assert np.allclose(soft, q.gumbel_max_sample(pi, noise=g), atol=1e-6)


def test_gumbel_max_frequencies():
    pi = np.array([0.2, 0.3, 0.5])
    rng = np.random.default_rng(4)
    draws = q.gumbel_max_sample(np.tile(pi, (100_000, 1)), rng)
    freq = draws.mean(axis=0)
    assert 0.5 * np.abs(freq - pi).sum() < 0.01


def test_straight_through_forward_is_hard_gradient_is_soft():
    rng = np.random.default_rng(5)
    logits = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    noise = q.gumbel_noise((3, 4), rng)
    w = rng.normal(size=(3, 4))
    y = q.gumbel_softmax_sample(None, 0.7, noise=noise, straight_through=True, log_pi=ad.log_softmax(logits))
    assert set(np.unique(y.data)) <= {0.0, 1.0}
    ad.backward(ad.sum_(y * w))
    st_grad = logits.grad.copy()
    logits.grad = None
    y = q.gumbel_softmax_sample(None, 0.7, noise=noise, log_pi=ad.log_softmax(logits))
    ad.backward(ad.sum_(y * w))
    assert np.allclose(st_grad, logits.grad)


def test_harden_examples():
    assert np.array_equal(q.harden([[0.1, 0.9]]), [[0.0, 1.0]])
    assert np.array_equal(q.harden([[0.5, 0.5]]), [[1.0, 0.0]])


def test_random_codes_are_one_hot():
    codes = q.random_codes(10, 4, 6, np.random.default_rng(6))
    assert codes.shape == (10, 4, 6)
    assert np.array_equal(codes.sum(axis=-1), np.ones((10, 4)))


def test_temperature_schedule():
    sched = q.TemperatureSchedule(1.0, 0.3, 100)
    assert sched(0) == 1.0
    assert math.isclose(sched(100), 0.3)
    assert math.isclose(sched(50), math.sqrt(0.3))
    assert sched(1000) == sched(100)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.integers(0, 2 ** 32 - 1))
def test_coordinate_map_is_linear(a, seed):
    rng = np.random.default_rng(seed)
    c = q.coordinates(7)
    z1, z2 = random_prob_matrix(rng, 3, 7), random_prob_matrix(rng, 3, 7)
    lhs = q.coordinate_map(a * z1 + (1 - a) * z2, c)
    rhs = a * q.coordinate_map(z1, c) + (1 - a) * q.coordinate_map(z2, c)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_distinct_codes_map_to_distinct_vectors():
    c = q.coordinates(4)
    codes = np.array(list(itertools.product(range(4), repeat=3)))
    vecs = {q.coordinate_map(np.eye(4)[idx], c).tobytes() for idx in codes}
    assert len(vecs) == 4 ** 3


def test_relaxed_sample_gradient_wrt_pi():
    rng = np.random.default_rng(7)
    pi = Tensor(random_prob_matrix(rng, 3, 4), requires_grad=True)
    noise = q.gumbel_noise((3, 4), rng)
    w = rng.normal(size=(3, 4))

    def f():
        return ad.sum_(q.gumbel_softmax_sample(pi, 0.6, noise=noise) * w)

    ad.backward(f())
    numeric = ad.numerical_gradient(lambda: f().item(), [pi])[0]
    assert ad.relative_error(pi.grad, numeric) < 1e-4
