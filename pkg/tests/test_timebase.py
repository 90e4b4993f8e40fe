from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from suplab.scenario_tree import ScenarioTree
from suplab.timebase import (
    INFINITY,
    DoubleIndex,
    GridError,
    GridStoppingTime,
    RefinementRequired,
    Side,
    TimeGrid,
    compare,
    dyadic_approximation,
    grid_from_config,
    validate_stopping_time,
)


# --------------------------------------------------------------------------
# grids


def test_dyadic_grid_basics():
    g = TimeGrid.dyadic(3)
    assert g.K == 8 and g.level == 3
    assert g.nodes[0] == 0.0 and g.nodes[-1] == 1.0
    assert g.index_of(0.375) == 3
    assert not g.contains(0.3)
    with pytest.raises(GridError):
        g.index_of(0.3)


@pytest.mark.parametrize("nodes", [[0.0, 0.5], [0.1, 1.0], [0.0, 0.6, 0.4, 1.0], [0.0, 0.5, 0.5, 1.0], [0.0]])
def test_invalid_grids_rejected(nodes):
    with pytest.raises(GridError):
        TimeGrid(nodes)


def test_first_after_and_at_or_after():
    g = TimeGrid.uniform(4)
    assert g.first_after(0.5) == 3
    assert g.first_after(0.6) == 3
    assert g.first_at_or_after(0.5) == 2
    assert g.first_at_or_after(0.6) == 3
    assert g.first_after(1.0) == g.K


@given(st.lists(st.floats(0.0, 1.0, allow_nan=False), max_size=12))
def test_refinement_keeps_original_nodes(extra):
    g = TimeGrid.uniform(5)
    r = g.refine(extra)
    assert all(r.contains(t) for t in g.nodes)
    assert np.all(np.diff(r.nodes) > 0)
    assert r.nodes[0] == 0.0 and r.nodes[-1] == 1.0


def test_geometric_refinement_accumulates_at_anchor():
    g = TimeGrid.uniform(4).refine_geometric(0.5, depth=5)
    gaps = 0.5 - g.nodes[(g.nodes > 0.25) & (g.nodes < 0.5)]
    assert np.allclose(np.sort(gaps)[::-1], 0.25 * 0.5 ** np.arange(1, 6))
    assert 0.5 in g.hints


def test_dyadic_nodes_on_irregular_grid():
    g = TimeGrid([0.0, 0.1, 0.25, 0.5, 0.7, 1.0])
    assert list(g.dyadic_nodes()) == [0, 2, 3, 5]
    assert list(g.dyadic_nodes(1)) == [0, 3, 5]
    assert g.contains_dyadics(1) and not g.contains_dyadics(2)


def test_grid_config_round_trip():
    assert grid_from_config({"dyadic_level": 4}) == TimeGrid.dyadic(4)
    g = grid_from_config([0.0, 0.3, 1.0])
    assert grid_from_config(g.to_config()) == g
    with pytest.raises(GridError):
        grid_from_config([0.0, 0.7, 0.3, 1.0])
    with pytest.raises(GridError):
        grid_from_config({"dyadic_level": 2, "extra": 1})


# --------------------------------------------------------------------------
# double index


@pytest.mark.parametrize("a,b,want", [
    ((3, Side.LEFT), (3, Side.RIGHT), -1),
    ((3, Side.RIGHT), (4, Side.LEFT), -1),
    ((3, Side.LEFT), (3, Side.LEFT), 0),
    ((4, Side.LEFT), (3, Side.RIGHT), 1),
])
def test_compare_cases(a, b, want):
    assert compare(DoubleIndex(*a), DoubleIndex(*b)) == want


@given(st.tuples(st.integers(0, 20), st.sampled_from(list(Side))),
       st.tuples(st.integers(0, 20), st.sampled_from(list(Side))))
def test_compare_matches_chain_order(a, b):
    da, db = DoubleIndex(*a), DoubleIndex(*b)
    pa, pb = da.chain_position(), db.chain_position()
    assert compare(da, db) == (pa > pb) - (pa < pb)
    assert compare(da, db) == -compare(db, da)


def test_compare_rejects_mixed_grids():
    with pytest.raises(Exception):
        compare(DoubleIndex(1, Side.LEFT, TimeGrid.uniform(2)), DoubleIndex(1, Side.LEFT, TimeGrid.uniform(3)))


# --------------------------------------------------------------------------
# dyadic approximation


def _brute_dyadic(t, m):
    """Smallest j / 2**m strictly above t, capped at 1, by enumeration."""
    cands = [Fraction(j, 2 ** m) for j in range(2 ** m + 1) if Fraction(j, 2 ** m) > t]
    return min(cands) if cands else Fraction(1)


def test_dyadic_approximation_examples():
    g = TimeGrid.uniform(20)
    tau = GridStoppingTime.at_time(g, 0.3, 4)
    assert np.all(dyadic_approximation(tau, 2).times() == 0.5)
    d = TimeGrid.dyadic(3)
    one = GridStoppingTime.at_time(d, 1.0, 3)
    for m in range(4):
        assert np.all(dyadic_approximation(one, m).times() == 1.0)
    half = GridStoppingTime.at_time(d, 0.5, 3)
    assert np.all(dyadic_approximation(half, 1).times() == 1.0)
    never = GridStoppingTime(d, [INFINITY, 2])
    assert list(dyadic_approximation(never, 2).times()) == [1.0, 0.5]


@settings(max_examples=60)
@given(st.integers(0, 5), st.lists(st.integers(0, 32), min_size=1, max_size=10))
def test_dyadic_approximation_matches_enumeration(m, ks):
    g = TimeGrid.dyadic(5)
    tau = GridStoppingTime(g, ks)
    got = dyadic_approximation(tau, m).times()
    want = [float(_brute_dyadic(Fraction(k, 32), m)) for k in ks]
    assert list(got) == want


def test_dyadic_approximation_on_irregular_grid():
    g = TimeGrid([0.0, 0.25, 0.3, 0.5, 0.75, 1.0])
    tau = GridStoppingTime(g, [0, 1, 2, 3, 4, 5])
    assert list(dyadic_approximation(tau, 2).times()) == [0.25, 0.5, 0.5, 0.75, 1.0, 1.0]
    with pytest.raises(RefinementRequired):
        dyadic_approximation(tau, 3)


# --------------------------------------------------------------------------
# stopping times against a tree


def _coin_tree():
    """Two fair coins revealed at nodes 1 and 2 of a 2-interval grid."""
    return ScenarioTree.product(TimeGrid.uniform(2), [[0.5, 0.5], [0.5, 0.5]], [1, 2])


def _brute_is_stopping_time(values, tree):
    for k in range(tree.grid.K + 1):
        for atom in tree.atoms(k):
            inside = {(values[s] != INFINITY and values[s] <= k) for s in atom}
            if len(inside) > 1:
                return False
    return True


def test_constant_times_are_stopping_times():
    tree = _coin_tree()
    for k in range(3):
        rep = validate_stopping_time(GridStoppingTime.constant(tree.grid, k, 4), tree)
        assert rep.ok


def test_hitting_time_of_adapted_path_is_stopping_time():
    tree = _coin_tree()
    bits = np.indices((2, 2)).reshape(2, -1).T
    V = np.zeros((4, 3))
    V[:, 1] = 1 - 2 * bits[:, 0]
    V[:, 2] = V[:, 1] + 1 - 2 * bits[:, 1]
    tau = GridStoppingTime.first_hit(tree.grid, V, lambda v: v < 0)
    assert validate_stopping_time(tau, tree).ok
    assert _brute_is_stopping_time(tau.values, tree)


def test_look_ahead_time_is_rejected_at_its_level():
    tree = _coin_tree()
    bits = np.indices((2, 2)).reshape(2, -1).T
    # stop at node 1 when the second coin (seen at node 2) is heads
    tau = GridStoppingTime(tree.grid, np.where(bits[:, 1] == 1, 1, 2))
    rep = validate_stopping_time(tau, tree)
    assert not rep.ok and rep.violation_level == 1
    assert not _brute_is_stopping_time(tau.values, tree)


@settings(max_examples=50)
@given(st.lists(st.sampled_from([INFINITY, 0, 1, 2]), min_size=4, max_size=4))
def test_validation_agrees_with_brute_force(vals):
    tree = _coin_tree()
    tau = GridStoppingTime(tree.grid, vals)
    assert validate_stopping_time(tau, tree).ok == _brute_is_stopping_time(np.array(vals), tree)


def test_stopping_time_helpers():
    g = TimeGrid.uniform(4)
    tau = GridStoppingTime(g, [INFINITY, 2])
    assert list(tau.finite) == [False, True]
    assert list(tau.capped().values) == [4, 2]
    assert tau.times()[0] == np.inf and tau.times()[1] == 0.5
    with pytest.raises(ValueError):
        GridStoppingTime(g, [5])
