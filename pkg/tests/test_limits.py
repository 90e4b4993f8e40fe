import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from suplab.constructions import HazardSpec, compensator_limit_tree, ex0_sequence, ex0_tree
from suplab.ladlag_path import PathBundle
from suplab.limits import (
    ConvergenceReport,
    ConvexScheme,
    ExtractionError,
    NotStabilized,
    apply_scheme,
    cesaro_means,
    convergence_in_probability,
    double_limit,
    dyadic_gap,
    exceedance,
    fatou_limit,
    komlos_extract,
    left_limit_convergence_check,
    one_sided_gap,
    stabilized_limit,
)
from suplab.scenario_tree import AdaptedProcess, ScenarioTree, check_martingale
from suplab.timebase import GridStoppingTime, TimeGrid


def coin_tree(K):
    return ScenarioTree.product(TimeGrid.uniform(K), [[0.5, 0.5]] * K, list(range(1, K + 1)))


def walk(K):
    """Simple random walk on ``coin_tree(K)``, one row per scenario."""
    bits = np.indices((2,) * K).reshape(K, -1).T
    steps = 1.0 - 2.0 * bits
    return np.concatenate([np.zeros((steps.shape[0], 1)), steps.cumsum(axis=1)], axis=1)


# --------------------------------------------------------------------------
# convex schemes


def test_scheme_validation():
    with pytest.raises(ValueError):
        ConvexScheme(np.array([[0.5, 0.5], [0.5, 0.5]]))       # output 1 looks back
    with pytest.raises(ValueError):
        ConvexScheme(np.array([[0.5, 0.4]]))
    with pytest.raises(ValueError):
        ConvexScheme(np.array([[1.5, -0.5]]))
    with pytest.raises(ValueError):
        ConvexScheme.from_windows(3, [[0], []])


def test_block_and_sliding_averages():
    b = ConvexScheme.block_average(7, 2)
    assert b.n_out == 3 and b.n_in == 7
    assert list(b.support(1)) == [2, 3]
    s = ConvexScheme.sliding_average(5, 3)
    assert s.n_out == 3
    assert np.allclose(s.apply(np.arange(5.0)), [1.0, 2.0, 3.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2 ** 32 - 1))
def test_composition_stays_forward_and_convex(n, b1, w2, seed):
    if n < b1:
        return
    inner = ConvexScheme.block_average(n, b1)
    if inner.n_out < w2:
        return
    outer = ConvexScheme.sliding_average(inner.n_out, w2)
    both = inner.then(outer)
    for m in range(both.n_out):
        assert both.support(m).min() >= m
    assert np.allclose(both.weights.sum(axis=1), 1.0)
    x = np.random.default_rng(seed).normal(size=(3, n))
    assert np.allclose(both.apply(x), outer.apply(inner.apply(x)))


def test_identity_scheme():
    x = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(ConvexScheme.identity(4).apply(x), x)


# --------------------------------------------------------------------------
# Cesàro means and extraction


def test_cesaro_means_examples():
    assert np.allclose(cesaro_means(np.full((2, 6), 4.0), [0, 2, 5]), 4.0)
    alt = np.tile([0.0, 2.0], 50)
    means = cesaro_means(alt, np.arange(100))
    assert np.isclose(means[0, -1], 1.0)
    assert means[0, 0] == 0.0 and means[0, 1] == 1.0
    with pytest.raises(ValueError):
        cesaro_means(alt, [3, 1])
    with pytest.raises(IndexError):
        cesaro_means(alt, [0, 100])


def test_cesaro_means_law_of_large_numbers():
    rng = np.random.default_rng(0)
    x = rng.exponential(2.0, size=(400, 2000))
    m = cesaro_means(x, np.arange(0, 2000, 2))[:, -1]
    # mean of 1000 exponentials: sd 2 / sqrt(1000)
    assert np.all(np.abs(m - 2.0) < 5 * 2.0 / np.sqrt(1000))


def test_extraction_concentrates_iid_samples():
    rng = np.random.default_rng(1)
    x = rng.normal(2.0, 1.0, size=(500, 4000))
    scheme = komlos_extract(x, eps=0.2)
    sub = scheme.info["subsequence"]
    assert all(b >= 2 * a + 1 for a, b in zip(sub, sub[1:]))
    for n in range(scheme.n_out):
        assert scheme.support(n).min() >= n
    out = scheme.apply(x)[:, -1]
    width = scheme.support(scheme.n_out - 1).size
    assert np.all(np.abs(out - 2.0) < 5.0 / np.sqrt(width))


def test_extraction_of_convergent_sequence():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(200, 1))
    x = 3.0 + z / np.arange(1, 1025)[None, :]
    out = komlos_extract(x).apply(x)
    assert np.max(np.abs(out[:, -1] - 3.0)) < np.max(np.abs(z)) / 4


def test_extraction_of_example_terminal_values():
    g = TimeGrid.dyadic(3)
    n_list = [2 ** j for j in range(1, 12)]
    seq = ex0_sequence(n_list, g, 20000, seed=3)
    x = np.stack([b.V[:, -1] for b in seq], axis=1)
    scheme = komlos_extract(x)
    out = scheme.apply(x)[:, -1]
    # disjoint cells: the last output is non-zero exactly on the cells of its window
    window = scheme.support(scheme.n_out - 1)
    p = sum(1.0 / n_list[i] for i in window)
    hit = np.mean(np.abs(out) > 0.1)
    assert abs(hit - p) < 3 * np.sqrt(p * (1 - p) / x.shape[0])


def test_extraction_errors():
    with pytest.raises(ExtractionError):
        komlos_extract(np.ones((5, 3)))
    with pytest.raises(ExtractionError):
        komlos_extract(np.array([[1.0, np.nan, 1.0, 1.0]]))
    growing = np.random.default_rng(4).normal(size=(100, 64)) * np.arange(1, 65) ** 2
    with pytest.raises(ExtractionError):
        komlos_extract(growing)


def test_apply_scheme_identity_and_average():
    g = TimeGrid.uniform(3)
    seq = [PathBundle(g, np.full((2, 4), float(j)), np.full((2, 3), -float(j))) for j in range(4)]
    same = apply_scheme(seq, ConvexScheme.identity(4))
    assert all(np.array_equal(a.V, b.V) and np.array_equal(a.I, b.I) for a, b in zip(same, seq))
    pair = apply_scheme(seq, ConvexScheme.block_average(4, 2))
    assert np.allclose(pair[0].V, 0.5) and np.allclose(pair[1].I, -2.5)
    with pytest.raises(ValueError):
        apply_scheme(seq[:3], ConvexScheme.identity(4))


def test_combinations_of_martingales_are_martingales():
    K = 5
    tree = coin_tree(K)
    W = walk(K)
    rng = np.random.default_rng(5)
    seq = []
    for j in range(6):
        V = rng.normal() * W + rng.normal()
        seq.append(PathBundle(tree.grid, V, V[:, :-1], tree.weights))
    for scheme in (ConvexScheme.block_average(6, 3), ConvexScheme.sliding_average(6, 4)):
        for b in apply_scheme(seq, scheme):
            assert check_martingale(AdaptedProcess(tree, b)).ok


# --------------------------------------------------------------------------
# limits


def test_stabilized_limit_hand_cases():
    stack = np.array([[1.0, 5.0, 0.0],
                      [1.0, 7.0, 2.0],
                      [1.0, 9.0, 2.0]])
    lim, bad = stabilized_limit(stack, None)
    assert list(lim) == [1.0, 9.0, 2.0]
    assert list(bad) == [False, True, False]
    with pytest.raises(ValueError):
        stabilized_limit(stack[:1], None)


def test_fatou_limit_of_constant_sequence():
    g = TimeGrid.dyadic(3)
    seq = [PathBundle(g, np.full((2, 9), 2.0)) for _ in range(3)]
    f = fatou_limit(seq)
    assert np.all(f.V == 2.0) and np.all(f.I == 2.0)


def test_fatou_limit_of_example_sequence():
    g = TimeGrid.dyadic(5)
    seq = ex0_sequence([2, 10, 100, 1000, 10000, 100000], g, 5000, seed=6)
    f = fatou_limit(seq)
    assert np.array_equal(f.V, np.broadcast_to((g.nodes < 0.5).astype(float), f.V.shape))


def test_fatou_limit_raises_when_nothing_settles():
    g = TimeGrid.dyadic(2)
    seq = [PathBundle(g, np.full((3, 5), float(j))) for j in range(6)]
    with pytest.raises(NotStabilized):
        fatou_limit(seq)


def test_fatou_limit_of_first_sequence_is_shifted_compensator():
    g = TimeGrid.dyadic(4)
    ex = compensator_limit_tree(HazardSpec.constant_rate(g, 1.0), [4, 8, 16, 1000, 10000, 100000], g)
    f = fatou_limit(ex.M1)
    nxt = np.minimum(np.arange(g.K + 1) + 1, g.K)
    assert np.allclose(f.V, ex.X1.V[:, nxt], atol=0)


def test_double_limit_of_constant_sequence():
    g = TimeGrid.uniform(3)
    rng = np.random.default_rng(7)
    V, I = rng.normal(size=(2, 4)), rng.normal(size=(2, 3))
    X1, X0 = double_limit([PathBundle(g, V, I)] * 3)
    assert np.array_equal(X1.V, V) and np.array_equal(X1.I, I)
    assert np.array_equal(X0.V[:, 1:], I) and np.all(X0.V[:, 0] == 0.0)


def test_double_limit_of_second_sequence():
    g = TimeGrid.dyadic(4)
    ex = compensator_limit_tree(HazardSpec.constant_rate(g, 1.0), [4, 8, 16, 1000, 10000, 100000], g)
    X1, X0 = double_limit(ex.M2)
    assert np.allclose(X1.V, ex.X2.V, atol=0)
    assert np.allclose(X1.I, ex.X2.V[:, :-1], atol=0)
    s = np.where(ex.sigma.finite, ex.sigma.values, g.K + 1)
    ks = np.arange(1, g.K + 1)
    want = 1.0 - ex.A.V[:, :-1] + (s[:, None] == ks[None, :] - 1)
    assert np.allclose(X0.V[:, 1:], want, atol=0)


# --------------------------------------------------------------------------
# convergence in probability and one-sided gaps


def test_exceedance_values():
    p, se, m = exceedance([0.0, 1.0, 2.0, 3.0], 0.0, 1.5, np.full(4, 0.25))
    assert p == 0.5 and m == 4 and np.isclose(se, np.sqrt(0.25 / 4))
    assert exceedance([0.0, 2.0], 0.0, 1.0, [0.5, 0.5], exact=True)[1] == 0.0


def test_convergence_against_itself_is_zero():
    g = TimeGrid.uniform(4)
    b = PathBundle(g, np.random.default_rng(8).normal(size=(50, 5)))
    taus = [GridStoppingTime.constant(g, k, 50) for k in range(5)]
    rep = convergence_in_probability([b, b], b, taus, [0.01, 0.1])
    assert all(r["estimate"] == 0.0 for r in rep.rows)
    assert len(rep.rows) == 2 * 5 * 2


def test_convergence_of_example_at_three_quarters_is_one_over_n():
    g = TimeGrid.dyadic(4)
    n_list = [3, 10, 100, 1000]
    tree, bundles, _ = ex0_tree(n_list, g)
    target = PathBundle.deterministic(g, (g.nodes < 0.5).astype(float), n_scenarios=tree.n_scenarios,
                                      weights=tree.weights)
    tau = GridStoppingTime.at_time(g, 0.75, tree.n_scenarios)
    rep = convergence_in_probability(bundles, target, [tau], [0.5], ns=n_list, exact=True)
    for r in rep.rows:
        assert np.isclose(r["estimate"], 1.0 / r["n"], atol=1e-12)
        assert r["stderr"] == 0.0


def test_convergence_of_example_by_sampling():
    g = TimeGrid.dyadic(4)
    n_list = [3, 10, 100]
    S = 20000
    seq = ex0_sequence(n_list, g, S, seed=9)
    target = PathBundle.deterministic(g, (g.nodes < 0.5).astype(float), n_scenarios=S)
    tau = GridStoppingTime.at_time(g, 0.75, S)
    rep = convergence_in_probability(seq, target, [tau], [0.5], ns=n_list)
    for r in rep.rows:
        p = 1.0 / r["n"]
        assert abs(r["estimate"] - p) < 3 * np.sqrt(p * (1 - p) / S)


def test_first_sequence_at_sigma_exact():
    g = TimeGrid.dyadic(3)
    n_list = [4, 8, 1000]
    ex = compensator_limit_tree(HazardSpec.constant_rate(g, 1.0), n_list, g)
    sig = ex.sigma.capped()
    rep = convergence_in_probability(ex.M1, ex.X1, [sig], [0.5], "at", ns=n_list, exact=True)
    p_fin = float(ex.tree.weights @ ex.sigma.finite)
    for r in rep.rows:
        assert np.isclose(r["estimate"], p_fin / r["n"], atol=1e-12)
    left = convergence_in_probability(ex.M1, ex.X1, [sig], [0.5], "left", ns=n_list, exact=True)
    assert all(r["estimate"] == 0.0 for r in left.rows)


def test_one_sided_gaps():
    g = TimeGrid.dyadic(4)
    tree, bundles, _ = ex0_tree([2, 10, 100], g)
    target = PathBundle(g, np.broadcast_to((g.nodes < 0.5).astype(float), bundles[0].V.shape).copy(),
                        weights=tree.weights)
    tau = GridStoppingTime.at_time(g, 0.75, tree.n_scenarios)
    assert np.all(one_sided_gap(bundles, target, tau) == 0.0)
    ex = compensator_limit_tree(HazardSpec.constant_rate(g, 1.0), [4, 1000], g)
    one = GridStoppingTime.at_time(g, 1.0, ex.tree.n_scenarios)
    assert np.allclose(one_sided_gap(ex.M1, ex.X1, one), 0.0, atol=0)
    # the first sequence sits above its limit, never below
    sig = ex.sigma.capped()
    assert np.all(one_sided_gap(ex.M1, ex.X1, sig) == 0.0)


# --------------------------------------------------------------------------
# left limits


def test_dyadic_gap_of_a_line():
    g = TimeGrid.dyadic(6)
    line = PathBundle.deterministic(g, g.nodes, g.nodes[1:], n_scenarios=1)
    one = GridStoppingTime.at_time(g, 1.0, 1)
    gaps = dyadic_gap(line, one, range(1, 7), 0.1, exact=True)
    # the last level-m dyadic before 1 lags by 2^-m
    assert [r["estimate"] for r in gaps] == [1.0 if 2.0 ** -m > 0.1 else 0.0 for m in range(1, 7)]


def test_left_limit_check_passes_for_second_sequence():
    g = TimeGrid.dyadic(4)
    n_list = [4, 8, 16, 1000, 10000]
    ex = compensator_limit_tree(HazardSpec.constant_rate(g, 1.0), n_list, g)
    X1, _ = double_limit(ex.M2)
    rep = left_limit_convergence_check(ex.M2, X1, ex.sigma.capped(), 0.1, ns=n_list, exact=True)
    assert rep
    assert all(r["estimate"] == 0.0 for r in rep.convergence.rows)


def test_left_limit_check_fails_for_jump_at_fixed_time():
    g = TimeGrid.dyadic(5)
    half = g.index_of(0.5)
    seq = []
    for d in (8, 4, 2, 1):
        V = (np.arange(g.K + 1) >= half - d).astype(float)
        seq.append(PathBundle.deterministic(g, V, V[:-1], n_scenarios=3))
    V = (np.arange(g.K + 1) >= half).astype(float)
    target = PathBundle.deterministic(g, V, V[:-1], n_scenarios=3)
    tau = GridStoppingTime.constant(g, half, 3)
    rep = left_limit_convergence_check(seq, target, tau, 0.5, exact=True)
    assert not rep
    assert all(r["estimate"] == 1.0 for r in rep.convergence.rows)


def test_left_limit_check_gap_envelope():
    g = TimeGrid.dyadic(6)
    line = PathBundle.deterministic(g, g.nodes, g.nodes[1:], n_scenarios=2)
    one = GridStoppingTime.at_time(g, 1.0, 2)
    rep = left_limit_convergence_check([line, line], line, one, 0.1, zoo={"line": (line, one)}, exact=True)
    assert rep.passed and rep.gap_decreasing
    assert [e["estimate"] for e in rep.gap_envelope] == [1.0, 1.0, 1.0, 0.0, 0.0, 0.0]


# --------------------------------------------------------------------------
# reports


def test_report_queries_and_files(tmp_path):
    rep = ConvergenceReport(seed=3)
    for n, p in zip([1, 2, 3, 4], [0.5, 0.04, 0.2, 0.01]):
        rep.add(n, "t", "at", 0.1, p, 0.0, 100)
    rep.add(1, "u", "left", 0.1, 0.0, 0.0, 100)
    assert rep.first_below(0.05) == {("t", "at", 0.1): 4, ("u", "left", 0.1): 1}
    assert rep.eventually_below(0.05)
    assert not rep.eventually_below(0.05, from_n=2, tau_id="t")
    with pytest.raises(ValueError):
        rep.add(1, "t", "at", 0.1, 1.5, 0.0, 1)
    path = rep.write_csv(tmp_path / "r.csv")
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 5 and float(rows[1]["estimate"]) == 0.04
    js = json.loads(rep.write_json(tmp_path / "r.json", {"small": 0.05}).read_text())
    assert js["seed"] == 3 and js["verdicts"] == {"small": True}
    assert js["final"]["t|at|0.1"]["estimate"] == 0.01
