import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from teeagg.aggregation import (
    AGGREGATOR,
    AggregationIncomplete,
    build_tree_plan,
    ceil_log,
    flat_aggregate,
    run_tree_aggregation,
)
from teeagg.tensors import Domain, GradVector, from_floats


def _vectors(n, seed):
    rng = np.random.default_rng(seed)
    return [GradVector(Domain.FIXED64, rng.integers(0, 2**64, 5, dtype=np.uint64), (5,), 24) for _ in range(n)]


@given(st.integers(1, 200), st.integers(2, 9), st.integers(0, 1000))
def test_tree_sum_equals_flat_sum(n, c, seed):
    vs = _vectors(n, seed)
    plan = build_tree_plan(n, c)
    assert run_tree_aggregation(plan, vs) == flat_aggregate(vs)


@given(st.integers(1, 300), st.integers(2, 9))
def test_every_node_sends_once_and_leaders_are_aligned(n, c):
    plan = build_tree_plan(n, c)
    sent = [s for rnd in plan.rounds for s, _ in rnd]
    assert sorted(sent) == list(range(n))
    assert plan.rounds[-1] == ((0, AGGREGATOR),)
    for level, rnd in enumerate(plan.rounds[:-1], start=1):
        for s, d in rnd:
            assert d % c**level == 0 and d < s < d + c**level
            assert s in plan.active_at(level)
    assert plan.n_rounds == ceil_log(n, c) + 1


def test_ceil_log_by_powers():
    assert [ceil_log(n, 2) for n in (1, 2, 3, 4, 5, 8, 9)] == [0, 1, 2, 2, 3, 3, 4]
    assert ceil_log(27, 3) == 3 and ceil_log(28, 3) == 4
    with pytest.raises(ValueError):
        ceil_log(4, 1)


def test_role_in_round_for_seven_nodes_binary():
    plan = build_tree_plan(7, 2)
    assert plan.role_in_round(1, 0) == ("send", 0)
    assert plan.role_in_round(0, 0) == ("recv", [1])
    assert plan.role_in_round(4, 1) == ("recv", [6])
    assert plan.role_in_round(6, 1) == ("send", 4)
    assert plan.role_in_round(4, 2) == ("send", 0)
    assert plan.role_in_round(3, 2) == ("idle", None)
    assert plan.role_in_round(0, 3) == ("send", AGGREGATOR)


def test_invalid_plans():
    with pytest.raises(ValueError):
        build_tree_plan(4, 1)
    with pytest.raises(ValueError):
        build_tree_plan(0, 2)
    with pytest.raises(AggregationIncomplete):
        run_tree_aggregation(build_tree_plan(3, 2), _vectors(2, 0))
    with pytest.raises(ValueError):
        flat_aggregate([])


def test_float_tree_order_is_fixed():
    vs = [from_floats([x]) for x in (1e8, 1.0, -1e8, 1.0)]
    plan = build_tree_plan(4, 2)
    assert run_tree_aggregation(plan, vs) == run_tree_aggregation(plan, vs)
