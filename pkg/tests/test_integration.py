import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from suplab.constructions import HazardSpec, compensator_limit_tree, ex0_bundle
from suplab.integration import (
    FVIntegrand,
    integrate_X_dphi,
    integrate_phi_dX,
    integration_by_parts_residual,
    limit_integral_formula,
    reference_integrals,
    split_integrand,
)
from suplab.ladlag_path import LadlagPath, PathBundle
from suplab.limits import double_limit
from suplab.timebase import GridMismatch, GridStoppingTime, TimeGrid


def indicator_closed(grid, s):
    """``1_[t_s, 1]`` as a path: jumps from the left at ``t_s``."""
    ks = np.arange(grid.K + 1)
    return LadlagPath(grid, (ks >= s).astype(float), (ks[:-1] >= s).astype(float))


def dyadic_path(grid, rng):
    return LadlagPath(grid, rng.integers(-8, 9, grid.K + 1) / 4.0, rng.integers(-8, 9, grid.K) / 4.0)


# --------------------------------------------------------------------------
# decomposition of integrands


def test_split_constant():
    g = TimeGrid.uniform(4)
    phi = split_integrand(LadlagPath.constant(g, 3.0))
    assert np.all(phi.continuous == 3.0)
    assert not phi.left_jumps.any() and not phi.right_jumps.any()


def test_split_closed_indicator():
    g = TimeGrid.uniform(4)
    phi = split_integrand(indicator_closed(g, 2))
    assert np.all(phi.continuous == 0.0)
    assert list(phi.left_jumps) == [0, 0, 1, 0, 0]
    assert not phi.right_jumps.any()


def test_split_line_plus_open_indicator():
    g = TimeGrid.uniform(4)
    s = 1
    ks = np.arange(g.K + 1)
    V = g.nodes + (ks > s)
    I = g.nodes[:-1] + (ks[:-1] >= s)               # right limits t_k + 1_(s,1]
    L = g.nodes + (ks > s)                          # left limits
    phi = split_integrand(LadlagPath(g, V, I), left_limits=L)
    assert np.allclose(phi.continuous, g.nodes)
    assert list(phi.right_jumps) == [0, 1, 0, 0, 0]
    assert not phi.left_jumps.any()
    assert np.allclose(phi.node_values(), V)
    assert np.allclose(phi.right_limits()[:-1], I)
    assert np.allclose(phi.left_limits()[1:], L[1:])
    assert np.isclose(phi.variation(), 1.0 + 1.0)


def test_integrand_validation_and_config():
    g = TimeGrid.uniform(2)
    with pytest.raises(ValueError):
        FVIntegrand(g, np.zeros(3), np.array([1.0, 0, 0]), np.zeros(3))
    with pytest.raises(ValueError):
        FVIntegrand(g, np.zeros(2), np.zeros(3), np.zeros(3))
    phi = FVIntegrand.from_config(g, {"continuous": [0, 0.5, 1], "jumps": [[0.5, 1.0, -2.0]]})
    assert list(phi.node_values()) == [0.0, 1.5, 0.0]
    assert phi.value_at(0.25) == 0.25
    assert phi.value_at(0.75) == 0.75 + 1.0 - 2.0
    with pytest.raises(ValueError):
        FVIntegrand.from_config(g, {"slope": 1})


# --------------------------------------------------------------------------
# integral of X against phi


def test_X_dphi_with_unit_integrator_telescopes():
    rng = np.random.default_rng(0)
    g = TimeGrid.uniform(8)
    phi = FVIntegrand(g, rng.normal(size=9).cumsum(), np.r_[0, rng.normal(size=8)], np.r_[rng.normal(size=8), 0])
    X = LadlagPath.constant(g, 1.0)
    pv = phi.node_values()
    for k in range(g.K + 1):
        assert np.isclose(integrate_X_dphi(X, phi, k), pv[k] - pv[0], atol=1e-12)


def test_X_dphi_against_closed_indicator_picks_left_value():
    rng = np.random.default_rng(1)
    g = TimeGrid.uniform(6)
    s = 3
    phi = split_integrand(indicator_closed(g, s))
    X = dyadic_path(g, rng)
    for k in range(g.K + 1):
        want = X.interval_values[s - 1] if k >= s else 0.0
        assert integrate_X_dphi(X, phi, k) == want


def test_X_dphi_example_path_against_time():
    g = TimeGrid.dyadic(4)
    b = ex0_bundle(2, g, 20, seed=9)
    phi = FVIntegrand(g, g.nodes, np.zeros(g.K + 1), np.zeros(g.K + 1))
    for s in range(b.n_scenarios):
        X = b.path(s)
        want = float(np.sum(X.interval_values * g.dt()))
        assert np.isclose(integrate_X_dphi(X, phi, g.K), want, atol=1e-15)


# --------------------------------------------------------------------------
# integral of phi against X


def test_phi_dX_with_unit_integrand():
    rng = np.random.default_rng(2)
    g = TimeGrid.uniform(8)
    X = LadlagPath(g, rng.normal(size=9), rng.normal(size=8))
    phi = split_integrand(LadlagPath.constant(g, 1.0))
    for k in range(g.K + 1):
        assert np.isclose(integrate_phi_dX(phi, X, k), X.node_values[k] - X.node_values[0], atol=1e-12)


def test_phi_dX_with_closed_indicator():
    rng = np.random.default_rng(3)
    g = TimeGrid.uniform(6)
    s = 2
    phi = split_integrand(indicator_closed(g, s))
    X = dyadic_path(g, rng)
    for k in range(g.K + 1):
        want = X.node_values[k] - X.interval_values[s - 1] if k >= s else 0.0
        assert integrate_phi_dX(phi, X, k) == want


def test_phi_dX_matches_discrete_stochastic_integral():
    rng = np.random.default_rng(4)
    g = TimeGrid.uniform(16)
    steps = rng.choice([-1.0, 1.0], size=(50, g.K))
    V = np.concatenate([np.zeros((50, 1)), steps.cumsum(axis=1)], axis=1)
    X = PathBundle(g, V, V[:, :-1])                 # càdlàg walk
    h = rng.integers(-4, 5, g.K) / 2.0              # holding on (t_k, t_{k+1}]
    # left-continuous step integrand: value h_k at t_{k+1}, switching just after each node
    node = np.r_[h[0], h]
    phi = FVIntegrand(g, np.full(g.K + 1, node[0]), np.zeros(g.K + 1), np.r_[np.diff(node), 0.0])
    assert np.allclose(phi.node_values(), node)
    got = integrate_phi_dX(phi, X, g.K)
    want = (h[None, :] * np.diff(V, axis=1)).sum(axis=1)
    assert np.array_equal(got, want)


# --------------------------------------------------------------------------
# integration by parts


def random_integrand(g, rng, dyadic=False):
    n = g.K + 1
    draw = (lambda m: rng.integers(-8, 9, m) / 4.0) if dyadic else (lambda m: rng.normal(size=m))
    a = np.where(rng.random(n) < 0.5, draw(n), 0.0)
    b = np.where(rng.random(n) < 0.5, draw(n), 0.0)
    a[0] = b[-1] = 0.0
    return FVIntegrand(g, draw(n).cumsum(), a, b)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2 ** 32 - 1), st.floats(-5, 5))
def test_ibp_with_constant_integrand(K, seed, c):
    g = TimeGrid.uniform(K)
    rng = np.random.default_rng(seed)
    X = LadlagPath(g, rng.normal(size=K + 1), rng.normal(size=K))
    phi = split_integrand(LadlagPath.constant(g, c))
    for k in range(K + 1):
        r = integration_by_parts_residual(phi, X, k)
        assert abs(r) <= 1e-12 * (1 + abs(c * X.node_values[k]))


def test_ibp_with_constant_dyadic_integrand_is_zero():
    rng = np.random.default_rng(5)
    g = TimeGrid.uniform(8)
    for _ in range(50):
        X = dyadic_path(g, rng)
        phi = split_integrand(LadlagPath.constant(g, float(rng.integers(-4, 5)) / 2))
        for k in range(g.K + 1):
            assert integration_by_parts_residual(phi, X, k) == 0.0


def test_ibp_symmetric_product_rule():
    rng = np.random.default_rng(6)
    g = TimeGrid.uniform(10)
    for _ in range(50):
        X = dyadic_path(g, rng)
        phi = split_integrand(X)
        assert np.array_equal(phi.node_values(), X.node_values)
        for k in range(g.K + 1):
            assert integration_by_parts_residual(phi, X, k) == 0.0
            # the two integrals add up to the change in X squared
            a = integrate_phi_dX(phi, X, k)
            b = integrate_X_dphi(X, phi, k)
            assert np.isclose(a + b, X.node_values[k] ** 2 - X.node_values[0] ** 2, atol=0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2 ** 32 - 1))
def test_ibp_random_pairs(K, seed):
    g = TimeGrid.uniform(K)
    rng = np.random.default_rng(seed)
    phi = random_integrand(g, rng)
    X = LadlagPath(g, rng.normal(size=K + 1), rng.normal(size=K))
    for k in range(K + 1):
        r = integration_by_parts_residual(phi, X, k)
        assert abs(r) < 1e-10 * (1 + abs(phi.node_values()[k] * X.node_values[k]))


def test_vectorized_integrals_match_reference_loop():
    rng = np.random.default_rng(7)
    for K in (1, 2, 5, 9, 15):
        g = TimeGrid.uniform(K)
        for _ in range(30):
            phi = random_integrand(g, rng, dyadic=True)
            X = dyadic_path(g, rng)
            for k in range(K + 1):
                dx, dphi = reference_integrals(phi, X, k)
                assert integrate_phi_dX(phi, X, k) == dx
                assert integrate_X_dphi(X, phi, k) == dphi


def test_reference_loop_hand_case():
    g = TimeGrid.uniform(1)
    # phi: 0 at 0, right limit 1, left limit at 1 is 2, value 3 at 1
    phi = FVIntegrand(g, np.array([0.0, 1.0]), np.array([0.0, 1.0]), np.array([1.0, 0.0]))
    assert list(phi.node_values()) == [0.0, 3.0]
    X = LadlagPath(g, [10.0, 30.0], [20.0])
    dx, dphi = reference_integrals(phi, X, 1)
    # steps: (0,10) -> (1,20) -> (2,20) -> (3,30)
    assert dx == 1 * 10 + 2 * 0 + 3 * 10
    assert dphi == 10 * 1 + 20 * 1 + 20 * 1


def test_bundle_integrals_and_stopping_times():
    rng = np.random.default_rng(8)
    g = TimeGrid.uniform(6)
    V = rng.normal(size=(5, 7))
    b = PathBundle(g, V, rng.normal(size=(5, 6)))
    phi = random_integrand(g, rng)
    tau = GridStoppingTime(g, [0, 1, 3, 6, 2])
    got = integrate_phi_dX(phi, b, tau)
    for s in range(5):
        assert np.isclose(got[s], integrate_phi_dX(phi, b.path(s), int(tau.values[s])), atol=1e-13)
    with pytest.raises(GridMismatch):
        integrate_phi_dX(random_integrand(TimeGrid.uniform(3), rng), b, 1)


# --------------------------------------------------------------------------
# limit formula


def test_limit_formula_reduces_to_integral_when_left_values_match():
    rng = np.random.default_rng(9)
    g = TimeGrid.uniform(6)
    X1 = PathBundle(g, rng.normal(size=(4, 7)), rng.normal(size=(4, 6)))
    L = X1.left_values()
    X0 = X1.with_values(L, L[:, 1:])
    phi = random_integrand(g, rng)
    for k in range(g.K + 1):
        tau = GridStoppingTime.constant(g, k, 4)
        assert np.allclose(limit_integral_formula(phi, X1, X0, tau), integrate_phi_dX(phi, X1, tau), atol=1e-12)


def test_limit_formula_unit_integrand_and_closed_indicator():
    g = TimeGrid.uniform(8)
    hz = HazardSpec.constant_rate(g, 1.0)
    ex = compensator_limit_tree(hz, [4, 8, 16, 1000, 10000, 100000], g)
    X1, X0 = double_limit(ex.M2)
    S = ex.tree.n_scenarios
    tau = GridStoppingTime.at_time(g, 1.0, S)
    one = split_integrand(LadlagPath.constant(g, 1.0))
    assert np.allclose(limit_integral_formula(one, X1, X0, tau), X1.V[:, -1] - X1.V[:, 0], atol=1e-12)
    s = 3
    phi = split_integrand(indicator_closed(g, s))
    sig = np.where(ex.sigma.finite, ex.sigma.values, g.K + 1)
    later = sig > s
    got = limit_integral_formula(phi, X1, X0, tau)
    assert np.allclose(got[later], (X1.V[:, -1] - X0.V[:, s])[later], atol=1e-12)
