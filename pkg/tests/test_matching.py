import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtnm.distance import DistanceMatrix
from rtnm.errors import CostOverflow, Infeasible
from rtnm.matching import (
    FullMatchProblem,
    MatchBounds,
    check_feasible,
    match_objective,
    scale_costs,
    solve_full_match,
    solve_transport,
)

from oracles import brute_force_exact, brute_force_surplus


def problem(values, allow_surplus=False, **bounds):
    values = np.asarray(values, dtype=float)
    dm = DistanceMatrix(
        tuple(f"t{i}" for i in range(values.shape[0])),
        tuple(f"c{j}" for j in range(values.shape[1])),
        values,
    )
    return FullMatchProblem(dm, MatchBounds(**bounds), allow_surplus)


def oracle_caps(n_t, n_c, min_ratio=1, max_ratio=math.inf, max_stratum_size=None):
    size = math.inf if max_stratum_size is None else max_stratum_size - 1
    a = int(min(max_ratio, size, n_c))
    b = 1 if min_ratio > 1 else int(min(max_ratio, size, n_t))
    return min_ratio, a, b


def assert_valid(sol, n_t, n_c, bounds, surplus=False):
    rows = [r for s in sol.strata for r in s.treated]
    cols = [c for s in sol.strata for c in s.comparisons]
    assert sorted(rows) == list(range(n_t))
    assert len(cols) == len(set(cols))
    if not surplus:
        assert sorted(cols) == list(range(n_c))
        assert sol.unmatched == ()
    assert set(cols).isdisjoint(sol.unmatched)
    assert set(cols) | set(sol.unmatched) == set(range(n_c))
    m, a, b = oracle_caps(n_t, n_c, bounds.min_ratio, bounds.max_ratio, bounds.max_stratum_size)
    for s in sol.strata:
        assert len(s.treated) == 1 or len(s.comparisons) == 1
        if len(s.treated) == 1:
            assert m <= len(s.comparisons) <= a
        else:
            assert len(s.treated) <= b


def test_pairs_on_diagonal():
    sol = solve_full_match(problem([[1, 10], [10, 1]], max_stratum_size=2))
    assert [(s.treated, s.comparisons) for s in sol.strata] == [((0,), (0,)), ((1,), (1,))]
    assert sol.objective == 2.0


def test_single_treated_takes_all_comparisons():
    sol = solve_full_match(problem([[0.5, 1.25, 2.0]], max_ratio=3))
    assert len(sol.strata) == 1
    assert sol.strata[0].comparisons == (0, 1, 2)
    assert sol.objective == pytest.approx(3.75)


def test_one_comparison_many_treated():
    sol = solve_full_match(problem([[1.0], [2.0], [3.0]]))
    assert len(sol.strata) == 1
    assert sol.strata[0].treated == (0, 1, 2)
    assert sol.objective == 6.0


def test_scale_costs_rounds_to_micro_units():
    assert scale_costs(np.array([1.0, 0.0000004, 0.0000006])).tolist() == [1_000_000, 0, 1]


def test_cost_overflow_is_detected():
    with pytest.raises(CostOverflow):
        solve_full_match(problem([[1e13, 1.0], [1.0, 1e13]]))


def test_counting_check():
    assert check_feasible(3, 2, MatchBounds()) == "exact"
    with pytest.raises(Infeasible):
        check_feasible(5, 1, MatchBounds(max_stratum_size=3))
    with pytest.raises(Infeasible):
        check_feasible(1, 5, MatchBounds(max_stratum_size=3))
    assert check_feasible(1, 5, MatchBounds(max_stratum_size=3), allow_surplus=True) == "surplus"
    with pytest.raises(Infeasible):
        check_feasible(3, 5, MatchBounds(min_ratio=2))


def test_bounds_validation():
    with pytest.raises(ValueError):
        MatchBounds(min_ratio=0)
    with pytest.raises(ValueError):
        MatchBounds(min_ratio=3, max_ratio=2)
    with pytest.raises(ValueError):
        MatchBounds(max_stratum_size=1)
    with pytest.raises(ValueError):
        MatchBounds(min_ratio=3, max_stratum_size=3)
    assert MatchBounds.from_dict(MatchBounds(2, 4, 6).to_dict()) == MatchBounds(2, 4, 6)
    assert MatchBounds.from_dict(MatchBounds().to_dict()) == MatchBounds()


def test_surplus_leaves_farthest_comparisons():
    # one treated unit, at most two comparisons: the two nearest are kept
    sol = solve_full_match(problem([[3.0, 1.0, 2.0, 9.0]], allow_surplus=True, max_stratum_size=3))
    assert sol.strata[0].comparisons == (1, 2)
    assert sol.unmatched == (0, 3)


def test_min_ratio_gives_one_treated_per_stratum():
    d = np.array([[1, 2, 3, 4], [4, 3, 2, 1.0]])
    sol = solve_full_match(problem(d, min_ratio=2))
    assert [(s.treated, s.comparisons) for s in sol.strata] == [((0,), (0, 1)), ((1,), (2, 3))]


def test_frozen_optimum_of_fixed_instance():
    # frozen from the exhaustive enumerator in tests/oracles.py
    d = np.array([
        [0.31, 0.92, 0.15, 0.58],
        [0.77, 0.05, 0.66, 0.42],
        [0.24, 0.88, 0.71, 0.09],
    ])
    sol = solve_full_match(problem(d, max_stratum_size=3))
    assert sol.scaled_objective == 530000
    assert sol.objective == pytest.approx(0.53)


def test_seed_only_breaks_ties():
    d = np.ones((3, 4))
    objectives = {solve_full_match(problem(d), seed=s).scaled_objective for s in range(5)}
    assert objectives == {4_000_000}
    a = solve_full_match(problem(d), seed=3)
    b = solve_full_match(problem(d), seed=3)
    assert a.strata == b.strata


def test_match_objective_counts_every_pair():
    d = np.array([[1.0, 2.0], [3.0, 4.0]])
    sol = solve_full_match(problem(d, max_stratum_size=2))
    assert match_objective(sol.strata, d) == pytest.approx(sol.objective)


def test_transport_maximizes_coverage_then_cost():
    cost = np.array([[1.0, 5.0, 2.0], [4.0, 1.0, 9.0]])
    pairs = solve_transport(cost, [1, 1])
    assert pairs == [(0, 0), (1, 1)]
    pairs = solve_transport(cost, [2, 1])
    assert sorted(pairs) == [(0, 0), (0, 2), (1, 1)]
    assert solve_transport(cost, [0, 0]) == []


@st.composite
def instances(draw):
    n_t = draw(st.integers(1, 4))
    n_c = draw(st.integers(1, 9 - n_t))
    ties = draw(st.booleans())
    if ties:
        vals = draw(st.lists(st.integers(0, 3), min_size=n_t * n_c, max_size=n_t * n_c))
    else:
        vals = draw(st.lists(st.floats(0, 5, allow_nan=False), min_size=n_t * n_c, max_size=n_t * n_c))
    size = draw(st.sampled_from([None, 2, 3, 4]))
    min_ratio = draw(st.sampled_from([1, 1, 2]))
    if size is not None and min_ratio + 1 > size:
        min_ratio = 1
    max_ratio = draw(st.sampled_from([math.inf, 2, 3]))
    if max_ratio < min_ratio:
        max_ratio = math.inf
    return np.array(vals, float).reshape(n_t, n_c), dict(min_ratio=min_ratio, max_ratio=max_ratio, max_stratum_size=size)


@settings(max_examples=150, deadline=None)
@given(instances(), st.integers(0, 3))
def test_matches_exhaustive_enumeration(inst, seed):
    d, bounds = inst
    n_t, n_c = d.shape
    m, a, b = oracle_caps(n_t, n_c, **bounds)
    scaled = np.rint(d * 1e6).astype(np.int64)
    expected = brute_force_exact(scaled, m, a, b, bounds["min_ratio"])
    if expected is None:
        with pytest.raises(Infeasible):
            solve_full_match(problem(d, **bounds), seed=seed)
        return
    sol = solve_full_match(problem(d, **bounds), seed=seed)
    assert sol.scaled_objective == expected
    assert_valid(sol, n_t, n_c, MatchBounds(**bounds))


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 3), st.integers(2, 3), st.integers(0, 3),
    st.lists(st.floats(0, 5, allow_nan=False), min_size=9 * 3, max_size=9 * 3),
)
def test_surplus_matches_enumeration(n_t, a, extra, vals):
    n_c = min(n_t * a + 1 + extra, 9 - n_t)
    if n_c <= n_t * a:
        return
    d = np.array(vals[: n_t * n_c]).reshape(n_t, n_c)
    sol = solve_full_match(problem(d, allow_surplus=True, max_stratum_size=a + 1))
    scaled = np.rint(d * 1e6).astype(np.int64)
    assert sol.scaled_objective == brute_force_surplus(scaled, a)
    assert_valid(sol, n_t, n_c, MatchBounds(max_stratum_size=a + 1), surplus=True)
    assert all(len(s.comparisons) == a for s in sol.strata)


@settings(max_examples=40, deadline=None)
@given(instances())
def test_relaxing_max_ratio_never_hurts(inst):
    d, bounds = inst
    bounds = dict(bounds, min_ratio=1)
    try:
        tight = solve_full_match(problem(d, **bounds))
    except Infeasible:
        return
    loose = solve_full_match(problem(d, **dict(bounds, max_ratio=math.inf)))
    assert loose.scaled_objective <= tight.scaled_objective


@settings(max_examples=40, deadline=None)
@given(instances())
def test_column_permutation_permutes_solution(inst):
    d, bounds = inst
    try:
        base = solve_full_match(problem(d, **bounds))
    except Infeasible:
        return
    perm = np.random.default_rng(0).permutation(d.shape[1])
    permuted = solve_full_match(problem(d[:, perm], **bounds))
    assert permuted.scaled_objective == base.scaled_objective
