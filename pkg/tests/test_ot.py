import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cilforge.learners.ot import ConvergenceError, coil_transfer, sinkhorn, transport_cost


def closed_form_2x2(eps):
    # symmetric cost [[0,1],[1,0]], uniform marginals: plan = [[a, b], [b, a]],
    # a + b = 1/2 and a / b = exp(1/eps)
    ratio = np.exp(1.0 / eps)
    a = 0.5 * ratio / (1 + ratio)
    return np.array([[a, 0.5 - a], [0.5 - a, a]])


def test_zero_cost_is_independent_coupling():
    r, c = np.array([0.2, 0.3, 0.5]), np.array([0.6, 0.4])
    np.testing.assert_allclose(sinkhorn(np.zeros((3, 2)), r, c), np.outer(r, c), atol=1e-10)


def test_one_by_one():
    np.testing.assert_allclose(sinkhorn([[3.0]], [1.0], [1.0]), [[1.0]])


def test_two_by_two_closed_form():
    plan = sinkhorn([[0.0, 1.0], [1.0, 0.0]], [0.5, 0.5], [0.5, 0.5], eps=0.1)
    np.testing.assert_allclose(plan, closed_form_2x2(0.1), atol=1e-9)


def test_non_convergence_carries_residual():
    rng = np.random.default_rng(0)
    with pytest.raises(ConvergenceError) as e:
        sinkhorn(rng.uniform(size=(6, 6)), np.full(6, 1 / 6), np.full(6, 1 / 6), eps=0.01,
                 max_iter=1, tol=1e-15)
    assert e.value.residual > 0


@pytest.mark.parametrize("bad", [
    dict(cost=[[np.nan]], r=[1.0], c=[1.0]),
    dict(cost=[[0.0, 1.0]], r=[1.0], c=[0.7, 0.7]),
    dict(cost=[[0.0, 1.0]], r=[1.0, 0.0], c=[0.5, 0.5]),
])
def test_invalid_inputs(bad):
    with pytest.raises(ValueError):
        sinkhorn(**bad)


def _simplex(draw, n):
    w = draw(st.lists(st.floats(0.05, 1.0), min_size=n, max_size=n))
    w = np.asarray(w)
    return w / w.sum()


@given(st.data(), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_marginals_on_random_costs(data, m, n, seed):
    r, c = _simplex(data.draw, m), _simplex(data.draw, n)
    cost = np.random.default_rng(seed).uniform(0, 2, size=(m, n))
    plan = sinkhorn(cost, r, c, eps=0.1)
    assert np.abs(plan.sum(1) - r).max() <= 1e-6
    assert np.abs(plan.sum(0) - c).max() <= 1e-6


def test_cost_is_one_minus_cosine():
    a = np.array([[1.0, 0.0], [0.0, 2.0]])
    np.testing.assert_allclose(transport_cost(a, a), [[0, 1], [1, 0]], atol=1e-15)


def test_transfer_single_old_class(rng):
    w = rng.normal(size=(1, 4))
    new, _ = coil_transfer(w, rng.normal(size=(1, 4)), rng.normal(size=(3, 4)))
    np.testing.assert_allclose(new, np.repeat(w / np.linalg.norm(w), 3, axis=0), atol=1e-12)


def test_transfer_identity_at_small_eps(rng):
    protos = np.eye(4) + 0.05 * rng.normal(size=(4, 4))
    w = rng.normal(size=(4, 6))
    new, plan = coil_transfer(w, protos, protos, eps=0.01)
    np.testing.assert_allclose(plan, np.eye(4) / 4, atol=1e-6)
    np.testing.assert_allclose(new, w / np.linalg.norm(w, axis=1, keepdims=True), atol=1e-5)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_transferred_weights_unit_norm(ko, kn, seed):
    r = np.random.default_rng(seed)
    new, _ = coil_transfer(r.normal(size=(ko, 3)), r.normal(size=(ko, 3)), r.normal(size=(kn, 3)))
    np.testing.assert_allclose(np.linalg.norm(new, axis=1), 1.0, atol=1e-12)
