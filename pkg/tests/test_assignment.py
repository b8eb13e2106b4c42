import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pdlab.assignment import build_cost_matrix, hungarian, pair_cost
from pdlab.geometry import optimal_payoff


def brute_force(c):
    n = c.shape[0]
    best, arg = np.inf, None
    for perm in itertools.permutations(range(n)):
        total = sum(c[i, perm[i]] for i in range(n))
        if total < best - 1e-12:
            best, arg = total, perm
    return arg, best


def test_two_by_two_example():
    assign, total = hungarian([[4, 1], [2, 3]])
    assert list(assign) == [1, 0]
    assert total == 3.0


def test_identity_costs_pick_off_diagonal_zero():
    c = 1.0 - np.eye(4)
    assign, total = hungarian(c)
    assert total == 0.0
    assert list(assign) == [0, 1, 2, 3]


@pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
def test_matches_brute_force(n, rng):
    for _ in range(20):
        c = rng.uniform(-5, 5, (n, n))
        assign, total = hungarian(c)
        _, best = brute_force(c)
        assert total == pytest.approx(best, abs=1e-9)
        assert sorted(assign) == list(range(n))


def test_tie_break_is_lexicographic():
    assign, _ = hungarian(np.ones((3, 3)))
    assert list(assign) == [0, 1, 2]
    c = np.array([[1.0, 1.0, 2.0], [1.0, 1.0, 2.0], [2.0, 2.0, 1.0]])
    assert list(hungarian(c)[0]) == [0, 1, 2]


def test_integer_costs_exact():
    rng = np.random.default_rng(0)
    c = rng.integers(0, 3, (6, 6)).astype(float)
    assign, total = hungarian(c)
    assert total == brute_force(c)[1]


@pytest.mark.parametrize("bad", [np.ones((2, 3)), np.array([[1.0, np.nan], [0.0, 1.0]]), np.ones(3)])
def test_rejects_bad_input(bad):
    with pytest.raises(ValueError):
        hungarian(bad)


def test_empty_matrix():
    assign, total = hungarian(np.zeros((0, 0)))
    assert assign.size == 0 and total == 0.0


def test_pair_cost_is_payoff_in_time_units():
    D, A = np.array([0.2, 0.1, 0.0]), np.array([1.5, 0.3, 0.5])
    assert pair_cost(D, 1.0, A, 0.8) == pytest.approx(optimal_payoff(D, A, 0.8))
    assert pair_cost(D, 2.0, A, 1.6) == pytest.approx(optimal_payoff(D, A, 0.8) / 2.0)


def test_cost_matrix_shape_and_assignment_prefers_defendable_pairs():
    defs = [(np.array([0.5, 0.0, 0.1]), 1.0), (np.array([-0.5, 0.0, 0.1]), 1.0)]
    atts = [(np.array([-1.6, 0.0, 0.3]), 0.8), (np.array([1.6, 0.0, 0.3]), 0.8)]
    c = build_cost_matrix(defs, atts)
    assert c.shape == (2, 2)
    assert list(hungarian(c)[0]) == [1, 0]


def test_cost_matrix_requires_equal_counts():
    with pytest.raises(ValueError):
        build_cost_matrix([(np.zeros(3), 1.0)], [])


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: arrays(float, (n, n), elements=st.integers(-5, 5).map(float))))
def test_property_optimal_and_lexicographic(c):
    assign, total = hungarian(c)
    n = len(c)
    perms = [p for p in itertools.permutations(range(n))]
    best = min(sum(c[i, p[i]] for i in range(n)) for p in perms)
    assert total == best
    assert tuple(assign) == min(p for p in perms if sum(c[i, p[i]] for i in range(n)) == best)
