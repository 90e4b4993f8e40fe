"""Concrete processes: jump-time examples, Brownian blocks, counterexample engine.

Monte Carlo constructions return ``PathBundle`` objects with equal weights.
Tree constructions return exact finite filtrations (``ScenarioTree``) whose
scenarios carry their probabilities as weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from .ladlag_path import PathBundle, eps_move_counts
from .limits import ConvexScheme
from .scenario_tree import (AdaptedProcess, ScenarioTree, TOL, check_optional_strong_supermartingale,
                            compensator_of_jump_time, mertens_decomposition, NotSupermartingale)
from .timebase import (INFINITY, GridStoppingTime, RefinementRequired, TimeGrid)

__all__ = [
    "HazardSpec",
    "sample_sigma",
    "sigma_tree",
    "brownian_bundle",
    "ex0_jump_node",
    "ex0_bundle",
    "ex0_sequence",
    "ex0_tree",
    "CompensatorExample",
    "compensator_example",
    "compensator_example_tree",
    "compensator_limit_tree",
    "compensator_sequence",
    "indicator_block_martingales",
    "staircase_martingales",
    "StaircaseSource",
    "Ex2Report",
    "ex2_adaptive_tau",
    "ex2_gamma_bound",
    "ex2_sup_probability",
    "ApproximationPlan",
    "TREE_CARRIER",
    "approximate_supermartingale",
    "eps_move_count_bound",
    "supermartingale_zoo",
    "DELTA_HIT",
]

DELTA_HIT = 1e-3


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# --------------------------------------------------------------------------
# jump times with a hazard


@dataclass(frozen=True)
class HazardSpec:
    """``h_k = P(sigma = t_k | sigma >= t_k)`` per node, drawn independently of everything else."""

    hazards: np.ndarray
    independent: bool = True

    def __post_init__(self):
        h = np.array(self.hazards, dtype=float)
        if h.ndim != 1 or h.size < 2:
            raise ValueError("one hazard per node required")
        if np.any(h < 0) or np.any(h[:-1] >= 1) or h[-1] > 1:
            raise ValueError("hazards must lie in [0, 1), the last one in [0, 1]")
        h.setflags(write=False)
        object.__setattr__(self, "hazards", h)

    @classmethod
    def constant_rate(cls, grid: TimeGrid, rate: float) -> "HazardSpec":
        """``h_k = rate * (t_k - t_{k-1})``, no jump at 0."""
        h = np.concatenate([[0.0], rate * grid.dt()])
        if np.any(h >= 1):
            raise ValueError("rate too large for this grid")
        return cls(h)

    @property
    def K(self) -> int:
        return self.hazards.size - 1

    def survival(self) -> np.ndarray:
        """``P(sigma > t_k)`` for ``k = 0..K``."""
        return np.cumprod(1.0 - self.hazards)

    def pmf(self) -> np.ndarray:
        """``P(sigma = t_k)`` for ``k = 0..K`` followed by ``P(sigma = inf)``."""
        surv = self.survival()
        before = np.concatenate([[1.0], surv[:-1]])
        return np.concatenate([self.hazards * before, surv[-1:]])


def sample_sigma(hazard: HazardSpec, grid: TimeGrid, n_scenarios: int, seed=None) -> GridStoppingTime:
    """One uniform per scenario inverted against the law of ``sigma``."""
    if hazard.K != grid.K:
        raise ValueError("hazard and grid sizes differ")
    cdf = np.cumsum(hazard.pmf()[:-1])
    u = _rng(seed).random(n_scenarios)
    k = np.searchsorted(cdf, u, side="right")
    return GridStoppingTime(grid, np.where(k > grid.K, INFINITY, k), name="sigma")


def sigma_tree(grid: TimeGrid, hazard: HazardSpec):
    """Exact tree of ``sigma`` alone: one scenario per possible value.

    Returns ``(tree, sigma)``; values of zero probability are dropped.
    """
    pmf = hazard.pmf()
    vals = np.arange(grid.K + 2)
    keep = pmf > 0
    vals, w = vals[keep], pmf[keep]
    levels = np.array([np.minimum(vals, k + 1) for k in range(grid.K + 1)])
    tree = ScenarioTree(grid, levels, w / w.sum())
    sigma = GridStoppingTime(grid, np.where(vals > grid.K, INFINITY, vals), name="sigma")
    return tree, sigma


# --------------------------------------------------------------------------
# Brownian carrier


def brownian_bundle(grid: TimeGrid, n_scenarios: int, seed=None) -> PathBundle:
    """Brownian node values; interval values repeat the preceding node."""
    if n_scenarios < 1:
        raise ValueError("need at least one scenario")
    rng = _rng(seed)
    dW = rng.standard_normal((n_scenarios, grid.K)) * np.sqrt(grid.dt())
    V = np.zeros((n_scenarios, grid.K + 1))
    np.cumsum(dW, axis=1, out=V[:, 1:])
    return PathBundle(grid, V, V[:, :-1], seed=seed if isinstance(seed, int) else None, tag="brownian")


# --------------------------------------------------------------------------
# a martingale sequence whose Fatou limit drops at 1/2


def ex0_jump_node(grid: TimeGrid, n: int) -> int:
    """First node strictly after ``(1 + 1/n) / 2``; the jump is placed there."""
    j = grid.first_after(0.5 * (1 + 1.0 / n))
    if j > grid.K:
        raise RefinementRequired(f"no node after {(1 + 1 / n) / 2}")
    return j


def _ex0_values(grid: TimeGrid, n: int, Y: np.ndarray):
    j = ex0_jump_node(grid, n)
    V = np.ones((Y.size, grid.K + 1))
    V[:, j:] = Y[:, None]
    return V, V[:, :-1].copy()


def ex0_bundle(n: int, grid: TimeGrid, n_scenarios: int, seed=None) -> PathBundle:
    """``M^n = 1`` up to the jump node, then ``Y_n`` with ``P(Y_n = n) = 1/n``, else 0."""
    Y = np.where(_rng(seed).random(n_scenarios) < 1.0 / n, float(n), 0.0)
    V, I = _ex0_values(grid, n, Y)
    return PathBundle(grid, V, I, seed=seed if isinstance(seed, int) else None, tag=f"ex0[{n}]")


def _disjoint_cells(n_list):
    p = 1.0 / np.asarray(n_list, dtype=float)
    if p.sum() > 1 + 1e-12:
        raise ValueError("sum of 1/n over the index list exceeds 1")
    return np.concatenate([[0.0], np.cumsum(p)])


def _cell_probabilities(n_list) -> np.ndarray:
    """``1/n`` per index and the remainder, each computed directly (no differencing)."""
    p = 1.0 / np.asarray(n_list, dtype=float)
    if p.sum() > 1 + 1e-12:
        raise ValueError("sum of 1/n over the index list exceeds 1")
    return np.concatenate([p, [max(1.0 - p.sum(), 0.0)]])


def ex0_sequence(n_list: Sequence[int], grid: TimeGrid, n_scenarios: int, seed=None) -> list[PathBundle]:
    """``M^n`` for every ``n`` on one scenario space, with ``{Y_n = n}`` pairwise disjoint.

    One uniform ``U`` per scenario; ``Y_n = n`` on the cell
    ``[sum_{m<n} 1/m, sum_{m<=n} 1/m)`` of the list.  Each scenario then has
    at most one non-zero ``Y_n``, so the pointwise limits exist everywhere.
    """
    edges = _disjoint_cells(n_list)
    u = _rng(seed).random(n_scenarios)
    out = []
    for i, n in enumerate(n_list):
        Y = np.where((u >= edges[i]) & (u < edges[i + 1]), float(n), 0.0)
        V, I = _ex0_values(grid, n, Y)
        out.append(PathBundle(grid, V, I, seed=seed if isinstance(seed, int) else None, tag=f"ex0[{n}]"))
    return out


def ex0_tree(n_list: Sequence[int], grid: TimeGrid):
    """Exact version of ``ex0_sequence``: one scenario per cell plus the rest.

    Returns ``(tree, bundles, per_n)`` where ``tree`` is generated by the
    whole sequence and ``per_n[i]`` is the two-atom tree of ``M^{n_i}`` alone
    with its process.
    """
    m = len(n_list)
    w = _cell_probabilities(n_list)
    keep = w > 0
    jumps = [ex0_jump_node(grid, n) for n in n_list]
    levels = np.empty((grid.K + 1, m + 1), dtype=np.int64)
    for k in range(grid.K + 1):
        known = [i for i in range(m) if jumps[i] <= k]
        levels[k] = [s if s in known else -1 for s in range(m + 1)]
    idx = np.flatnonzero(keep)
    tree = ScenarioTree(grid, levels[:, idx], w[idx] / w[idx].sum())
    bundles, per_n = [], []
    for i, n in enumerate(n_list):
        Y = np.where(np.arange(m + 1) == i, float(n), 0.0)[idx]
        V, I = _ex0_values(grid, n, Y)
        bundles.append(PathBundle(grid, V, I, tree.weights, tag=f"ex0[{n}]"))
        lv = np.zeros((grid.K + 1, 2), dtype=np.int64)
        lv[jumps[i]:, 1] = 1
        t2 = ScenarioTree(grid, lv, [1.0 / n, 1.0 - 1.0 / n])
        V2, I2 = _ex0_values(grid, n, np.array([float(n), 0.0]))
        per_n.append(AdaptedProcess.from_values(t2, V2, I2, f"ex0[{n}]"))
    return tree, bundles, per_n


# --------------------------------------------------------------------------
# jump time, its compensator and two martingale sequences


@dataclass
class CompensatorExample:
    """``X1 = 1 - A``, ``X2 = X1 + 1_[[sigma]]`` and the sequences ``M1[i]``, ``M2[i]``.

    Iterating yields ``(X1, X2, M1, M2)``.
    """

    n_list: list
    sigma: GridStoppingTime
    A: PathBundle
    X1: PathBundle
    X2: PathBundle
    M1: list
    M2: list
    tree: ScenarioTree | None = None
    delay_nodes: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.X1, self.X2, self.M1, self.M2))

    def adapted(self, bundle: PathBundle) -> AdaptedProcess:
        if self.tree is None:
            raise ValueError("only the tree backend carries a filtration")
        return AdaptedProcess(self.tree, bundle)


def _compensator_values(hazard: HazardSpec, s: np.ndarray, K: int) -> np.ndarray:
    """``A_k = sum_{j<=k} h_j 1(sigma >= j)``; ``s`` uses ``K+1`` for 'never'."""
    ks = np.arange(K + 1)
    return np.cumsum(hazard.hazards[None, :] * (s[:, None] >= ks[None, :]), axis=1)


def _delay_node(grid: TimeGrid, s: np.ndarray, n: int) -> np.ndarray:
    """First node at or after ``t_sigma + 1/n`` (``K+1`` if past 1 or sigma never)."""
    out = np.full(s.size, grid.K + 1, dtype=np.int64)
    fin = s <= grid.K
    t = grid.nodes[s[fin]] + 1.0 / n
    idx = np.searchsorted(grid.nodes, t - 1e-12, side="left")
    out[fin] = np.where(t <= 1.0 + 1e-12, idx, grid.K + 1)
    return out


def _assemble(grid, weights, s, A, Y1s, Y2s, n_list, tree=None, seed=None):
    K = grid.K
    ks = np.arange(K + 1)
    after = (ks[None, :] >= s[:, None]).astype(float)
    X1V = 1.0 - A
    X2V = X1V + (ks[None, :] == s[:, None])
    mk = lambda V, I, tag: PathBundle(grid, V, I, weights, seed=seed, tag=tag)
    X1 = mk(X1V, X1V[:, :-1], "X1")
    X2 = mk(X2V, X1V[:, :-1], "X2")
    M1, M2, delays = [], [], []
    for n, Y1, Y2 in zip(n_list, Y1s, Y2s):
        r = _delay_node(grid, s, n)
        late = (ks[None, :] >= r[:, None]).astype(float)
        V1 = X1V + Y1[:, None] * after
        V2 = X1V + after + (Y2[:, None] - 1.0) * late
        M1.append(mk(V1, V1[:, :-1], f"M1[{n}]"))
        M2.append(mk(V2, V2[:, :-1], f"M2[{n}]"))
        delays.append(r)
    sigma = GridStoppingTime(grid, np.where(s > K, INFINITY, s), name="sigma")
    Ab = mk(A, A[:, :-1], "A")
    return CompensatorExample(list(n_list), sigma, Ab, X1, X2, M1, M2, tree, delays)


def compensator_example(hazard: HazardSpec, n, grid: TimeGrid, seed=None,
                        n_scenarios: int = 10_000) -> CompensatorExample:
    """Monte Carlo version; ``n`` is one index or a list sharing the draws of ``sigma``.

    ``Y_n`` in ``{0, n}`` with ``P(Y_n = n) = 1/n`` is drawn independently for
    each sequence and each ``n``.  The second sequence's correction sits at
    the first node at or after ``sigma + 1/n``.
    """
    n_list = [int(n)] if np.isscalar(n) else [int(x) for x in n]
    if hazard.K != grid.K:
        raise ValueError("hazard and grid sizes differ")
    ss = np.random.SeedSequence(seed)
    c_sigma, c_y = ss.spawn(2)
    sigma = sample_sigma(hazard, grid, n_scenarios, np.random.default_rng(c_sigma))
    s = np.where(sigma.finite, sigma.values, grid.K + 1)
    A = _compensator_values(hazard, s, grid.K)
    rng = np.random.default_rng(c_y)
    Y1s, Y2s = [], []
    for m in n_list:
        u = rng.random((2, n_scenarios))
        Y1s.append(np.where(u[0] < 1.0 / m, float(m), 0.0))
        Y2s.append(np.where(u[1] < 1.0 / m, float(m), 0.0))
    w = np.full(n_scenarios, 1.0 / n_scenarios)
    return _assemble(grid, w, s, A, Y1s, Y2s, n_list, seed=seed if isinstance(seed, int) else None)


def compensator_example_tree(hazard: HazardSpec, n_list: Sequence[int], grid: TimeGrid) -> CompensatorExample:
    """Exact tree: ``sigma`` times independent coins ``Y1_n`` (seen at ``sigma``)
    and ``Y2_n`` (seen at the delayed node) for every ``n`` in the list."""
    base, sig = sigma_tree(grid, hazard)
    K = grid.K
    n_list = [int(n) for n in n_list]
    m = len(n_list)
    bits = np.indices((2,) * (2 * m)).reshape(2 * m, -1).T if m else np.zeros((1, 0), dtype=int)
    sv = np.where(sig.finite, sig.values, K + 1)
    S0, B = sv.size, bits.shape[0]
    s = np.repeat(sv, B)
    b = np.tile(bits, (S0, 1))
    w = np.repeat(base.weights, B)
    for i, n in enumerate(n_list):
        for col in (2 * i, 2 * i + 1):
            w = w * np.where(b[:, col] == 1, 1.0 / n, 1.0 - 1.0 / n)
    Y1s = [b[:, 2 * i] * float(n) for i, n in enumerate(n_list)]
    Y2s = [b[:, 2 * i + 1] * float(n) for i, n in enumerate(n_list)]
    delays = [_delay_node(grid, s, n) for n in n_list]
    levels = np.empty((K + 1, s.size), dtype=np.int64)
    for k in range(K + 1):
        code = np.minimum(s, k + 1).astype(np.int64)
        for i in range(m):
            v1 = np.where(s <= k, b[:, 2 * i], 2)
            v2 = np.where(delays[i] <= k, b[:, 2 * i + 1], 2)
            code = code * 9 + v1 * 3 + v2
        levels[k] = code
    tree = ScenarioTree(grid, levels, w / w.sum())
    A = _compensator_values(hazard, s, K)
    ex = _assemble(grid, tree.weights, s, A, Y1s, Y2s, n_list, tree)
    # the closed form must agree with the compensator computed on the tree
    Atree = compensator_of_jump_time(tree, ex.sigma)
    if np.max(np.abs(Atree.V - A)) > 1e-12:
        raise AssertionError("closed-form compensator disagrees with the tree")
    return ex


def compensator_limit_tree(hazard: HazardSpec, n_list: Sequence[int], grid: TimeGrid) -> CompensatorExample:
    """Exact tree on which both sequences converge pointwise.

    ``{Y1_n = n}`` are pairwise disjoint cells of one variable seen at
    ``sigma`` and ``{Y2_n = n}`` disjoint cells of a second, independent one,
    with cell ``n`` seen at the delayed node of ``n``.  Each ``M^n`` keeps its
    law, but on this joint filtration ``M^n`` is no longer a martingale: a
    revealed cell rules out every other ``Y_n``.  Use it for limits only.
    """
    base, sig = sigma_tree(grid, hazard)
    K = grid.K
    n_list = [int(n) for n in n_list]
    m = len(n_list)
    pc = _cell_probabilities(n_list)
    cells = np.flatnonzero(pc > 0)
    sv = np.where(sig.finite, sig.values, K + 1)
    grid_idx = np.stack(np.meshgrid(np.arange(sv.size), cells, cells, indexing="ij"), -1).reshape(-1, 3)
    s = sv[grid_idx[:, 0]]
    c1, c2 = grid_idx[:, 1], grid_idx[:, 2]
    w = base.weights[grid_idx[:, 0]] * pc[c1] * pc[c2]
    Y1s = [np.where(c1 == i, float(n), 0.0) for i, n in enumerate(n_list)]
    Y2s = [np.where(c2 == i, float(n), 0.0) for i, n in enumerate(n_list)]
    delays = np.stack([_delay_node(grid, s, n) for n in n_list] + [np.full(s.size, K + 1)])
    d_own = delays[c2, np.arange(s.size)]
    levels = np.empty((K + 1, s.size), dtype=np.int64)
    for k in range(K + 1):
        v1 = np.where(s <= k, c1, m + 1)
        v2 = np.where(d_own <= k, c2, m + 1)
        levels[k] = (np.minimum(s, k + 1) * (m + 2) + v1) * (m + 2) + v2
    tree = ScenarioTree(grid, levels, w / w.sum())
    A = _compensator_values(hazard, s, K)
    return _assemble(grid, tree.weights, s, A, Y1s, Y2s, n_list, tree)


def compensator_sequence(hazard: HazardSpec, n_list, grid: TimeGrid, backend: str = "mc",
                         seed=None, n_scenarios: int = 10_000) -> CompensatorExample:
    if backend == "tree":
        return compensator_example_tree(hazard, n_list, grid)
    if backend == "mc":
        return compensator_example(hazard, list(n_list), grid, seed, n_scenarios)
    raise ValueError(f"unknown backend {backend!r}")


# --------------------------------------------------------------------------
# Brownian indicator blocks


def _block_qv(u: np.ndarray, n: int) -> np.ndarray:
    """Quadratic variation ``1/(2^-n - u) - 2^n`` of the blow-up integral at offset ``u``."""
    h = 2.0 ** -n
    with np.errstate(divide="ignore"):
        return np.where(u < h - 1e-15, 1.0 / np.maximum(h - u, 1e-300) - 1.0 / h, np.inf)


def refine_for_blocks(grid: TimeGrid, starts: Sequence[float], n: int, depth: int = 24) -> TimeGrid:
    """Add each window end ``t + 2^-n`` and geometric nodes accumulating at it."""
    g = grid
    for t in sorted(set(float(x) for x in starts)):
        end = t + 2.0 ** -n
        if end <= 1.0 + 1e-12:
            g = g.refine([min(end, 1.0)]).refine_geometric(min(end, 1.0), depth)
    return g


def indicator_block_martingales(rho: GridStoppingTime, n: int, k: float, grid: TimeGrid, seed=None,
                                carrier: PathBundle | None = None,
                                delta_hit: float = DELTA_HIT) -> PathBundle:
    """Martingale ``0`` up to ``rho``, then a Brownian-driven walk stopped at ``-1`` or ``k``.

    On ``[rho, rho + 2^-n]`` the walk takes the step ``sign(dW) c_j`` with
    ``c_j = min(sqrt(d<N>_j), x + 1, k - x)``, so it lands exactly on a
    barrier when it reaches one.  At the window end a walker still inside
    moves to ``k`` if ``Phi(dW / sqrt(dt)) < (x + 1) / (k + 1)`` and to ``-1``
    otherwise, which keeps the mean.  Windows running past 1 are cut there.
    """
    if grid != rho.grid:
        raise ValueError("stopping time lives on another grid")
    S, K = len(rho), grid.K
    if carrier is None:
        carrier = brownian_bundle(grid, S, seed)
    if carrier.grid != grid or carrier.n_scenarios != S:
        raise ValueError("carrier does not match the grid and scenario count")
    if k <= 0:
        raise ValueError("upper level k must be positive")
    nodes = grid.nodes
    a = np.where(rho.finite, rho.values, K + 1)
    end_t = np.where(a <= K, nodes[np.minimum(a, K)] + 2.0 ** -n, np.inf)
    inside = end_t <= 1.0 + 1e-12
    e = np.full(S, K + 1, dtype=np.int64)
    for s in np.flatnonzero(inside):
        if not grid.contains(end_t[s]):
            raise RefinementRequired(
                f"window end {end_t[s]!r} (scenario {s}) is not a grid node; refine the grid")
        e[s] = grid.index_of(end_t[s])
    dW = np.diff(carrier.V, axis=1)
    dt = grid.dt()
    x = np.zeros(S)
    V = np.zeros((S, K + 1))
    done = np.zeros(S, dtype=bool)
    reached_end = np.zeros(S, dtype=bool)
    for j in range(K):
        act = (a <= j) & (j < e) & ~done
        if act.any():
            last = act & (j == e - 1)
            walk = act & ~last
            if walk.any():
                u0 = nodes[j] - nodes[a[walk]]
                u1 = nodes[j + 1] - nodes[a[walk]]
                step = np.sqrt(_block_qv(u1, n) - _block_qv(u0, n))
                xw = x[walk]
                c = np.minimum(step, np.minimum(xw + 1.0, k - xw))
                xw = xw + np.sign(dW[walk, j]) * c
                xw = np.where(np.abs(xw + 1.0) < 1e-12, -1.0, np.where(np.abs(xw - k) < 1e-12, k, xw))
                x[walk] = xw
                done[walk] = (xw <= -1.0) | (xw >= k)
            if last.any():
                xl = x[last]
                reached_end[last] = True
                u = ndtr(dW[last, j] / np.sqrt(dt[j]))
                x[last] = np.where(u < (xl + 1.0) / (k + 1.0), k, -1.0)
                done[last] = True
        V[:, j + 1] = x
    n_win = int(inside.sum())
    if n_win and reached_end[inside].mean() > delta_hit:
        raise RefinementRequired(
            f"{reached_end[inside].mean():.3g} of the windows reach their end without hitting "
            f"-1 or {k} (tolerance {delta_hit}); refine the grid near the window ends")
    return PathBundle(grid, V, V[:, :-1], carrier.weights, seed=carrier.seed, tag=f"block[n={n},k={k:g}]")


# --------------------------------------------------------------------------
# staircase martingales: continuous, non-negative, close to 1 - t


def staircase_martingales(grid: TimeGrid, k: float, n_scenarios: int, seed=None,
                          up_until: float = 1.0) -> PathBundle:
    """``M_0 = 1`` and on each grid interval a two-point block: ``-dt`` with
    probability ``k/(k+1)``, ``+k dt`` otherwise.  ``M >= 1 - t`` pathwise.

    Intervals starting at or after ``up_until`` only drift down (``-dt``
    surely), so every up-move happens before ``up_until``.
    """
    rng = _rng(seed)
    dt = grid.dt()
    m = int(np.searchsorted(grid.nodes[:-1], up_until - 1e-12, side="left"))
    up = np.zeros((n_scenarios, grid.K), dtype=bool)
    up[:, :m] = rng.random((n_scenarios, m)) < 1.0 / (k + 1.0)
    xi = np.where(up, k * dt, -dt)
    V = np.ones((n_scenarios, grid.K + 1))
    np.cumsum(xi, axis=1, out=V[:, 1:])
    V[:, 1:] += 1.0
    return PathBundle(grid, V, V[:, :-1], seed=seed if isinstance(seed, int) else None,
                      tag=f"staircase[k={k:g}]")


@dataclass
class StaircaseSource:
    """Independent staircase martingales ``M^n``, ``n = 0, 1, ...``, generated on demand.

    An up-move adds ``jump * sqrt(1 + n / growth)``, so the up-probability
    per interval decays like ``n^{-1/2}``: each ``M^n`` is close to ``1 - t``
    while the chance of an up in a fixed window still has a divergent sum
    over ``n``.  Up-moves are confined to ``[0, up_until)``.
    """

    grid: TimeGrid
    n_scenarios: int
    seed: int = 0
    jump: float = 33.0
    growth: float = 100.0
    up_until: float = 1.0

    def k(self, n: int) -> float:
        dt = float(self.grid.dt().min())
        return self.jump / dt * math.sqrt(1.0 + n / self.growth)

    def __call__(self, n: int) -> PathBundle:
        ss = np.random.SeedSequence(self.seed, spawn_key=(int(n),))
        return staircase_martingales(self.grid, self.k(n), self.n_scenarios, np.random.default_rng(ss),
                                     self.up_until)


def staircase_sup_exceeds(bundle: PathBundle, k: float, level: float, lo: float, hi: float,
                          seed=None) -> np.ndarray:
    """Sample whether the continuous block paths exceed ``level`` on ``[lo, hi]``.

    A block from ``x`` ending at ``x - d`` reached ``L`` with probability
    ``d/(L-x+d) * (x+kd-L)/(kd+d) / (k/(k+1))`` (two gambler's-ruin legs).
    Only blocks inside ``[lo, hi]`` and the node values there are used.
    """
    rng = _rng(seed)
    g = bundle.grid
    nodes, dt = g.nodes, g.dt()
    V = bundle.V
    S = V.shape[0]
    hit = np.zeros(S, dtype=bool)
    inwin = (nodes >= lo - 1e-12) & (nodes <= hi + 1e-12)
    hit |= (V[:, inwin] >= level).any(axis=1)
    for i in range(g.K):
        if nodes[i] < lo - 1e-12 or nodes[i + 1] > hi + 1e-12:
            continue
        x, y, d = V[:, i], V[:, i + 1], dt[i]
        top = x + k * d
        up = y > x
        p_down = np.where(level <= x, 1.0,
                          np.where(level >= top, 0.0,
                                   d / np.maximum(level - x + d, 1e-300)
                                   * (top - level) / (k * d + d) / (k / (k + 1.0))))
        u = rng.random(S)
        hit |= np.where(up, top >= level, u < p_down)
    return hit


# --------------------------------------------------------------------------
# adaptive stopping time along which the combinations blow up


@dataclass
class Ex2Report:
    m_max: int
    eps: float
    n_used: int
    p_tau_lt_1: float
    stderr_tau: float
    p_all_levels: float
    stderr_levels: float
    level_counts: list
    hypothesis: list
    n_m: np.ndarray
    tau_m: np.ndarray
    sigma_m: np.ndarray

    def summary(self) -> dict:
        return {"m_max": self.m_max, "eps": self.eps, "n_used": self.n_used,
                "p_tau_lt_1": self.p_tau_lt_1, "stderr_tau": self.stderr_tau,
                "p_all_levels": self.p_all_levels, "stderr_levels": self.stderr_levels,
                "level_counts": self.level_counts, "hypothesis": self.hypothesis}


def _combined_source(source, scheme, n_max):
    """Yield ``(n, Mtilde^n)`` for the scheme applied lazily to ``source``."""
    if isinstance(scheme, ConvexScheme):
        cache: dict = {}
        for n in range(min(scheme.n_out, n_max)):
            idx = scheme.support(n)
            for j in list(cache):
                if j < idx[0]:
                    del cache[j]
            parts = []
            for j in idx:
                if j not in cache:
                    cache[j] = source(int(j))
                parts.append(cache[j].V)
            yield n, np.tensordot(scheme.weights[n, idx], np.stack(parts), axes=(0, 0))
        return
    b = int(scheme)
    if b < 1:
        raise ValueError("block size must be positive")
    for n in range(n_max):
        yield n, np.mean([source(n * b + j).V for j in range(b)], axis=0)


def ex2_adaptive_tau(source, scheme, eps: float, m_max: int, grid: TimeGrid, n_max: int = 5000,
                     n_check: int = 10, check_times=(0.25, 0.5, 0.75, 1.0)):
    """Build ``tau = lim tau_m`` level by level, scenario by scenario.

    ``source(j)`` returns the ``j``-th input bundle; ``scheme`` is a
    ``ConvexScheme`` or a block size ``b`` (output ``n`` averages inputs
    ``nb .. nb+b-1``).  For level ``m``: ``n_m`` is the next combination
    reaching ``2^m + 1`` at a node strictly inside ``(tau_{m-1}, sigma_{m-1})``,
    ``tau_m`` the first such node and ``sigma_m`` the first later node where
    it falls below ``2^m``, capped at ``sigma_{m-1}``.  Scenarios that run out
    of combinations get ``tau = 1``.  Returns ``(tau, Ex2Report)``.
    """
    K = grid.K
    half = grid.index_of(0.5)
    gen = _combined_source(source, scheme, n_max)
    first = []
    checks = []
    for _ in range(n_check):
        try:
            first.append(next(gen))
        except StopIteration:
            break
    if not first:
        raise ValueError("no combinations available")
    S = first[0][1].shape[0]
    for t in check_times:
        kt = grid.index_of(t)
        worst = max(float(np.mean(np.abs(M[:, kt] - (1.0 - t)) > eps)) for _, M in first)
        checks.append({"t": t, "worst_exceedance": worst, "ok": worst <= eps})
    bad = [c for c in checks if not c["ok"]]
    if bad:
        raise ValueError(f"inputs do not look close to 1 - t in probability: {bad}")

    level = np.ones(S, dtype=np.int64)
    tau_prev = np.zeros(S, dtype=np.int64)
    sig_prev = np.full(S, half, dtype=np.int64)
    n_m = np.full((S, m_max), -1, dtype=np.int64)
    tau_m = np.full((S, m_max), K, dtype=np.int64)
    sigma_m = np.full((S, m_max), K, dtype=np.int64)
    stash = np.zeros((S, max(m_max, 1), K + 1))
    ks = np.arange(K + 1)
    n_used = 0

    def run(n, M):
        act = np.flatnonzero(level <= m_max)
        if act.size == 0:
            return False
        m = level[act]
        thr = 2.0 ** m + 1.0
        win = (ks[None, :] > tau_prev[act, None]) & (ks[None, :] < sig_prev[act, None])
        hits = win & (M[act] >= thr[:, None])
        got = hits.any(axis=1)
        s = act[got]
        if s.size:
            mg = m[got]
            t_new = hits[got].argmax(axis=1)
            below = (ks[None, :] > t_new[:, None]) & (M[s] < (2.0 ** mg)[:, None])
            first_below = np.where(below.any(axis=1), below.argmax(axis=1), K + 1)
            s_new = np.minimum(first_below, sig_prev[s])
            n_m[s, mg - 1] = n
            tau_m[s, mg - 1] = t_new
            sigma_m[s, mg - 1] = s_new
            stash[s, mg - 1] = M[s]
            tau_prev[s], sig_prev[s] = t_new, s_new
            level[s] += 1
        return True

    for n, M in first:
        n_used = n + 1
        if not run(n, M):
            break
    else:
        for n, M in gen:
            n_used = n + 1
            if not run(n, M):
                break

    if m_max == 0:
        tau_vals = np.zeros(S, dtype=np.int64)
        all_levels = np.ones(S, dtype=bool)
    else:
        complete = level > m_max
        tau_vals = np.where(complete, tau_m[:, m_max - 1], K)
        rows = np.arange(S)
        at_tau = stash[rows[:, None], np.arange(m_max)[None, :], tau_vals[:, None]]
        all_levels = complete & (at_tau >= 2.0 ** np.arange(1, m_max + 1)[None, :]).all(axis=1)
    lt1 = tau_vals < K
    p1, p2 = float(lt1.mean()), float(all_levels.mean())
    counts = [int((level > m).sum()) for m in range(1, m_max + 1)]
    report = Ex2Report(m_max, eps, n_used, p1, math.sqrt(p1 * (1 - p1) / S), p2,
                       math.sqrt(p2 * (1 - p2) / S), counts, checks, n_m, tau_m, sigma_m)
    return GridStoppingTime(grid, tau_vals, name="tau"), report


def ex2_gamma_bound(c: float, alpha: float, eps: float, p_A: float) -> float:
    """``((alpha - 3 eps - (c + 1) eps) / (c + 1)) * p_A``; needs ``alpha > (c + 4) eps``."""
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if not 0 < p_A <= 1:
        raise ValueError("p_A must lie in (0, 1]")
    if not alpha > (c + 4) * eps:
        raise ValueError(f"need alpha > (c + 4) eps, got alpha={alpha}, (c+4)eps={(c + 4) * eps}")
    return (alpha - 3 * eps - (c + 1) * eps) / (c + 1) * p_A


def ex2_sup_probability(source: StaircaseSource, n: int, c: float, lo: float, hi: float, seed=None):
    """Estimated ``P(sup_{[lo, hi]} M^n > c + 1)`` with its binomial standard error."""
    b = source(n)
    hit = staircase_sup_exceeds(b, source.k(n), c + 1.0, lo, hi, seed)
    p = float(hit.mean())
    return p, math.sqrt(p * (1 - p) / hit.size)


# --------------------------------------------------------------------------
# bounded martingales converging to a given supermartingale


class _TreeCarrier:
    """Sentinel: resolve every block by an exact two-way branching of the tree."""

    def __repr__(self):
        return "TREE_CARRIER"


TREE_CARRIER = _TreeCarrier()


@dataclass(frozen=True)
class ApproximationPlan:
    """Knobs of the approximation pipeline.

    ``n_list`` are the indices ``n`` to build.  Increments of the
    predictable part at least ``jump_threshold`` are treated as jumps, the
    rest as its continuous part.  ``block_level(n)`` is the upper stop level
    of every block and the truncation level of the martingale part,
    ``mesh(n)`` the number of staircase steps for the continuous part, and
    ``announce_offset`` how many nodes before a left jump its block starts.
    The tolerances bound the predicted error of each part.
    """

    n_list: tuple = (2, 4, 6, 8)
    jump_threshold: float = 0.05
    announce_offset: int = 1
    tol_continuous: float = 0.1
    tol_right: float = 0.1
    tol_left: float = 0.1
    block_level: Callable[[int], float] = field(default=lambda n: 2.0 ** n)
    mesh: Callable[[int], int] = field(default=lambda n: n + 2)
    target: str = ""

    def __post_init__(self):
        if not self.n_list or any(int(n) < 1 for n in self.n_list):
            raise ValueError("indices must be positive")
        for name in ("tol_continuous", "tol_right", "tol_left", "jump_threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.announce_offset < 1:
            raise ValueError("announce_offset must be at least 1")
        object.__setattr__(self, "n_list", tuple(int(n) for n in self.n_list))


@dataclass
class _Branches:
    labels: np.ndarray   # (K+1, S) atom labels
    weights: np.ndarray
    parent: np.ndarray   # base scenario of each branch
    V: np.ndarray        # accumulated block values
    I: np.ndarray

    def split(self, start: np.ndarray, scale: np.ndarray, k: float) -> "_Branches":
        """Add a block starting at node ``start`` (per branch, -1 for none) of size ``scale``.

        Branches with a block split in two: ``-scale`` (prob ``k/(k+1)``) or
        ``+k scale`` from node ``start + 1`` on; the outcome becomes known there.
        """
        K = self.labels.shape[0] - 1
        live = (start >= 0) & (start < K) & (scale != 0)
        reps = np.where(live, 2, 1)
        idx = np.repeat(np.arange(live.size), reps)
        first = np.concatenate([[True], idx[1:] != idx[:-1]])
        bit = np.where(live[idx], np.where(first, 0, 1), -1)
        p_up = 1.0 / (k + 1.0)
        w = self.weights[idx] * np.where(bit == 1, p_up, np.where(bit == 0, 1 - p_up, 1.0))
        val = np.where(bit == 1, k * scale[idx], np.where(bit == 0, -scale[idx], 0.0))
        r = start[idx] + 1
        ks = np.arange(K + 1)
        on = (ks[None, :] >= r[:, None]) & (bit >= 0)[:, None]
        V = self.V[idx] + on * val[:, None]
        I = self.I[idx] + on[:, :-1] * val[:, None]
        seen = (ks[:, None] >= r[None, :]) & (bit >= 0)[None, :]
        labels = self.labels[:, idx] * 3 + np.where(seen, bit[None, :] + 1, 0)
        return _Branches(labels, w, self.parent[idx], V, I)


@dataclass
class Approximation:
    """Martingales ``M^n`` (one per plan index) and ``X`` lifted to each branched space."""

    n_list: list
    bundles: list
    targets: list
    parents: list
    processes: list = field(default_factory=list)
    exact: bool = True
    info: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.bundles)

    def __len__(self):
        return len(self.bundles)

    def __getitem__(self, i):
        return self.bundles[i]

    def lift(self, i: int, tau: GridStoppingTime) -> GridStoppingTime:
        """A stopping time of the base space, read on the ``i``-th branched space."""
        return GridStoppingTime(tau.grid, tau.values[self.parents[i]], tau.side, tau.name)

    def exceedance_report(self, taus, eps_list):
        from .limits import ConvergenceReport, exceedance
        from .ladlag_path import evaluate_at
        rep = ConvergenceReport()
        for j, tau in enumerate(taus):
            for i, (n, b, x) in enumerate(zip(self.n_list, self.bundles, self.targets)):
                t = self.lift(i, tau)
                for eps in eps_list:
                    p, se, m = exceedance(evaluate_at(b, t), evaluate_at(x, t), eps, b.weights, self.exact)
                    rep.add(n, tau.name or f"tau{j}", "at", eps, p, se, m)
        return rep


def _split_increments(A: AdaptedProcess, threshold: float):
    """Right increments (at ``V_j -> I_j``) and left increments (at ``I_{j-1} -> V_j``) of ``A``."""
    dR = A.I - A.V[:, :-1]
    dL = np.zeros_like(A.V)
    dL[:, 1:] = A.V[:, 1:] - A.I
    big_R = dR >= threshold
    big_L = dL >= threshold
    small = np.zeros((A.V.shape[0], 2 * A.V.shape[1] - 1))
    small[:, 1::2] = np.where(big_R, 0.0, dR)
    small[:, 0::2] = np.where(big_L, 0.0, dL)
    Ac = np.cumsum(small, axis=1)
    return np.where(big_R, dR, 0.0), np.where(big_L, dL, 0.0), Ac[:, 0::2]


def _first_n_events(mask: np.ndarray, n: int) -> np.ndarray:
    """Keep, per row, only the first ``n`` true entries."""
    return mask & (np.cumsum(mask, axis=1) <= n)


def _blocks_for(X: AdaptedProcess, plan: ApproximationPlan, n: int):
    """``(start, scale)`` arrays on the base scenarios, one per block, plus diagnostics."""
    tree = X.tree
    K = tree.grid.K
    S = tree.n_scenarios
    _, A = mertens_decomposition(X)
    dR, dL, Ac = _split_increments(A, plan.jump_threshold)
    blocks = []
    keep_R = _first_n_events(dR > 0, n)
    for j in np.flatnonzero(keep_R.any(axis=0)):
        start = np.where(keep_R[:, j], j, -1)
        blocks.append(("right", start, np.minimum(np.where(keep_R[:, j], dR[:, j], 0.0), n)))
    keep_L = _first_n_events(dL > 0, n)
    off = plan.announce_offset
    for j in np.flatnonzero(keep_L.any(axis=0)):
        a = max(j - off, 0)
        amount = np.where(keep_L[:, j], dL[:, j], 0.0)
        scale = tree.conditional_expectation(amount, a)
        blocks.append(("left", np.where(scale != 0, a, -1), np.minimum(scale, n)))
    m = max(int(plan.mesh(n)), 1)
    marks = sorted({tree.grid.first_at_or_after(i / m) for i in range(m + 1)})
    gap = 0.0
    for prev, cur in zip(marks, marks[1:]):
        inc = Ac[:, cur] - Ac[:, prev]
        gap = max(gap, float(inc.max(initial=0.0)))
        if cur < K:
            blocks.append(("continuous", np.where(inc > 0, cur, -1), inc))
    info = {"n": n, "right_jumps": int(keep_R.sum()), "left_jumps": int(keep_L.sum()),
            "staircase_steps": len(marks) - 1, "staircase_gap": gap,
            "continuous_ok": gap <= plan.tol_continuous}
    return blocks, info


def _truncated_martingale(X: AdaptedProcess, k: float):
    M, _ = mertens_decomposition(X)
    tree = X.tree
    Z = np.clip(M.V[:, -1], -k, k)
    V = np.stack([tree.conditional_expectation(Z, j) for j in range(tree.grid.K + 1)], axis=1)
    return V, V[:, :-1].copy()


def approximate_supermartingale(X: AdaptedProcess, plan: ApproximationPlan, carrier=None,
                                seed=None, n_scenarios: int = 20_000) -> Approximation:
    """Bounded martingales ``M^n`` with ``M^n_tau -> X_tau`` at stopping times.

    ``M^n`` is the martingale part of ``X`` truncated at ``k(n)`` plus one
    block per jump of the predictable part (the first ``n`` right and left
    jumps per scenario, sizes capped at ``n``) plus a staircase of blocks
    following its continuous part.  A block started at node ``r`` ends at
    node ``r + 1`` on ``-size`` with probability ``k/(k+1)`` and on
    ``k * size`` otherwise.

    ``carrier=TREE_CARRIER`` branches the tree at every block, so each
    ``M^n`` is an exact martingale on a finite tree.  A Brownian
    ``PathBundle`` carrier instead samples ``n_scenarios`` base scenarios by
    weight and resolves each block from the Brownian increment of its
    interval.
    """
    if carrier is None:
        raise ValueError("a carrier is required: TREE_CARRIER or a Brownian PathBundle")
    report = check_optional_strong_supermartingale(X)
    if not report.ok:
        raise NotSupermartingale(report)
    tree = X.tree
    K = tree.grid.K
    S = tree.n_scenarios
    out = Approximation([], [], [], [], exact=carrier is TREE_CARRIER)
    for n in plan.n_list:
        k = float(plan.block_level(n))
        MV, MI = _truncated_martingale(X, k)
        blocks, info = _blocks_for(X, plan, n)
        info["block_level"] = k
        info["block_count_bound"] = len(blocks) / (k + 1.0)
        if carrier is TREE_CARRIER:
            br = _Branches(np.array([tree.labels(j) for j in range(K + 1)]), tree.weights.copy(),
                           np.arange(S), np.zeros((S, K + 1)), np.zeros((S, K)))
            for _, start, scale in blocks:
                br = br.split(start[br.parent], scale[br.parent], k)
            t2 = ScenarioTree(tree.grid, br.labels, br.weights / br.weights.sum())
            p = br.parent
            proc = AdaptedProcess.from_values(t2, MV[p] + br.V, MI[p] + br.I, f"M[{n}]")
            out.processes.append(proc)
            out.bundles.append(proc.paths)
            out.targets.append(PathBundle(tree.grid, X.V[p], X.I[p], t2.weights, tag="X"))
            out.parents.append(p)
        else:
            if not isinstance(carrier, PathBundle) or carrier.grid != tree.grid:
                raise ValueError("the Brownian carrier must be a PathBundle on the tree's grid")
            rng = _rng(seed)
            S_mc = carrier.n_scenarios
            p = rng.choice(S, size=S_mc, p=tree.weights)
            dW = np.diff(carrier.V, axis=1)
            u = ndtr(dW / np.sqrt(tree.grid.dt())[None, :])
            V = MV[p].copy()
            I = MI[p].copy()
            ks = np.arange(K + 1)
            for _, start, scale in blocks:
                st, sc = start[p], scale[p]
                live = (st >= 0) & (st < K) & (sc != 0)
                uu = u[np.arange(S_mc), np.clip(st, 0, K - 1)]
                val = np.where(uu < 1.0 / (k + 1.0), k * sc, -sc) * live
                on = ks[None, :] >= (st + 1)[:, None]
                V += on * val[:, None]
                I += on[:, :-1] * val[:, None]
            w = np.full(S_mc, 1.0 / S_mc)
            out.bundles.append(PathBundle(tree.grid, V, I, w, tag=f"M[{n}]"))
            out.targets.append(PathBundle(tree.grid, X.V[p], X.I[p], w, tag="X"))
            out.parents.append(p)
        out.n_list.append(n)
        out.info.append(info)
    return out


# --------------------------------------------------------------------------
# eps-move bounds and a zoo of supermartingales


def eps_move_count_bound(eps: float, delta: float) -> int:
    """A constant ``C`` with ``P(eps-moves > C) <= delta`` for any càdlàg
    supermartingale bounded by 1 in absolute value.

    Built from ``n = ceil(2/eps)`` levels, ``C1 = ceil(2/delta)`` crossings per
    level, ``N = n C1`` and ``C2 = 2 N^2 / delta``: ``C = 2 (C2 + 1) N``.
    """
    if not (eps > 0 and 0 < delta < 1):
        raise ValueError("need eps > 0 and 0 < delta < 1")
    n = math.ceil(2.0 / eps)
    c1 = math.ceil(2.0 / delta)
    N = n * c1
    c2 = 2.0 * N * N / delta
    return int(math.ceil(2.0 * (c2 + 1.0) * N))


def _gbm(W: PathBundle, vol: float, tag: str) -> PathBundle:
    V = np.exp(vol * W.V - 0.5 * vol * vol * W.grid.nodes[None, :])
    return PathBundle(W.grid, V, V[:, :-1], W.weights, W.seed, tag)


def supermartingale_zoo(grid: TimeGrid | None = None, n_paths: int = 10_000, seed=0) -> dict:
    """Named bundles of (super)martingales for eps-move statistics.

    Every member starts at or below 1 and is a supermartingale in its own
    filtration; several are unbounded above.
    """
    grid = TimeGrid.uniform(256) if grid is None else grid
    ss = np.random.SeedSequence(seed)
    s_w, s_ex0, s_comp, s_stair = ss.spawn(4)
    W = brownian_bundle(grid, n_paths, np.random.default_rng(s_w))
    zoo = {f"gbm_vol{v:g}": _gbm(W, v, f"gbm[{v:g}]") for v in (0.5, 1.0, 2.0)}
    zoo["ex0"] = ex0_bundle(4, grid, n_paths, np.random.default_rng(s_ex0))
    comp = compensator_example(HazardSpec.constant_rate(grid, 1.0), 4, grid,
                               int(s_comp.generate_state(1)[0]), n_paths)
    zoo["X1"], zoo["X2"], zoo["M2_n4"] = comp.X1, comp.X2, comp.M2[0]
    zoo["staircase"] = staircase_martingales(grid, 4.0, n_paths, np.random.default_rng(s_stair))
    line = 1.0 - grid.nodes / 2.0
    zoo["linear_drift"] = PathBundle.deterministic(grid, line, n_scenarios=1, tag="1-t/2")
    g1 = zoo["gbm_vol1"]
    zoo["gbm_times_drift"] = g1.with_values(g1.V * line[None, :], g1.I * line[None, :-1],
                                            tag="gbm*(1-t/2)")
    hit = np.maximum.accumulate(g1.V >= 2.0, axis=1)
    first = np.where(hit.any(axis=1), hit.argmax(axis=1), grid.K)
    ks = np.arange(grid.K + 1)
    Vs = np.where(ks[None, :] <= first[:, None], g1.V, g1.V[np.arange(n_paths), first][:, None])
    zoo["stopped_gbm"] = g1.with_values(Vs, Vs[:, :-1], tag="gbm stopped at 2")
    return zoo
