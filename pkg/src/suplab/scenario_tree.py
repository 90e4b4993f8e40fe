"""Finite filtered probability spaces and exact supermartingale calculus.

Level ``k`` of a tree is the partition generating ``F_{t_k}``; the partition
before ``t_k`` (``F_{t_k -}``) is level ``k - 1`` and the trivial partition
before ``t_0``.  Along the sequence ``V_0, I_0, V_1, ..., V_K`` of a path the
values ``V_k`` and ``I_k`` are both observed at level ``k``: the point
``(t_k, LEFT)`` carries ``I_{k-1}`` with sigma-algebra level ``k - 1`` and
``(t_k, RIGHT)`` carries ``V_k`` with level ``k``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ladlag_path import PathBundle
from .timebase import INFINITY, GridMismatch, GridStoppingTime, TimeGrid, grid_from_config

__all__ = [
    "TreeError",
    "ZeroProbabilityAtom",
    "PredictabilityError",
    "NotSupermartingale",
    "ScenarioTree",
    "AdaptedProcess",
    "Violation",
    "CheckReport",
    "conditional_expectation",
    "check_martingale",
    "check_optional_strong_supermartingale",
    "check_predictable_strong_supermartingale",
    "mertens_decomposition",
    "compensator_of_jump_time",
    "check_relation_2_12",
]

TOL = 1e-12


class TreeError(ValueError):
    pass


class ZeroProbabilityAtom(TreeError):
    pass


class PredictabilityError(TreeError):
    pass


class NotSupermartingale(TreeError):
    def __init__(self, report: "CheckReport"):
        self.report = report
        first = report.violations[0] if report.violations else None
        super().__init__(f"process is not an optional strong supermartingale; first violation: {first}")


def _canonical(labels) -> np.ndarray:
    _, inv = np.unique(np.asarray(labels), return_inverse=True)
    return inv.astype(np.int64).ravel()


class ScenarioTree:
    """Partitions ``levels[k]`` (atom label per scenario) refining in ``k``."""

    def __init__(self, grid: TimeGrid, levels, weights=None):
        levels = np.asarray(levels)
        if levels.ndim != 2 or levels.shape[0] != grid.K + 1:
            raise TreeError(f"need one partition per node ({grid.K + 1}), got shape {levels.shape}")
        S = levels.shape[1]
        w = np.full(S, 1.0 / S) if weights is None else np.asarray(weights, dtype=float)
        if w.shape != (S,) or np.any(w < 0) or abs(w.sum() - 1.0) > TOL:
            raise TreeError("weights must be non-negative, one per scenario, summing to 1")
        lab = np.empty(levels.shape, dtype=np.int64)
        for k in range(levels.shape[0]):
            lab[k] = _canonical(levels[k])
        for k in range(1, lab.shape[0]):
            # every level-k atom must sit inside one level-(k-1) atom
            pairs = np.unique(np.stack([lab[k], lab[k - 1]]), axis=1)
            if pairs.shape[1] != lab[k].max() + 1:
                raise TreeError(f"level {k} does not refine level {k - 1}")
        lab.setflags(write=False)
        w = w.copy()
        w.setflags(write=False)
        self.grid = grid
        self._labels = lab
        self.weights = w
        self._mass = [np.bincount(lab[k], weights=w) for k in range(lab.shape[0])]

    @property
    def n_scenarios(self) -> int:
        return self._labels.shape[1]

    def labels(self, k: int) -> np.ndarray:
        """Atom id per scenario at level ``k``; level ``-1`` is trivial."""
        if k < 0:
            return np.zeros(self.n_scenarios, dtype=np.int64)
        return self._labels[k]

    def n_atoms(self, k: int) -> int:
        return 1 if k < 0 else int(self._labels[k].max()) + 1

    def atom_mass(self, k: int) -> np.ndarray:
        return np.array([1.0]) if k < 0 else self._mass[k]

    def atoms(self, k: int) -> list[list[int]]:
        lab = self.labels(k)
        order = np.argsort(lab, kind="stable")
        cuts = np.flatnonzero(np.diff(lab[order])) + 1
        return [list(map(int, a)) for a in np.split(order, cuts)]

    def expectation(self, values) -> np.ndarray:
        return np.tensordot(self.weights, np.asarray(values, dtype=float), axes=(0, 0))

    def conditional_expectation(self, values, level: int) -> np.ndarray:
        """Atom-wise weighted average of ``values`` (shape ``(S,)`` or ``(S, m)``)."""
        v = np.asarray(values, dtype=float)
        if v.shape[0] != self.n_scenarios:
            raise TreeError("values must have one row per scenario")
        lab = self.labels(level)
        mass = self.atom_mass(level)
        if np.any(mass <= 0):
            bad = int(np.flatnonzero(mass <= 0)[0])
            raise ZeroProbabilityAtom(f"atom {bad} at level {level} has zero probability; prune the tree")
        n = mass.size
        if v.ndim == 1:
            sums = np.bincount(lab, weights=self.weights * v, minlength=n)
            return (sums / mass)[lab]
        flat = v.reshape(v.shape[0], -1)
        out = np.empty_like(flat)
        for j in range(flat.shape[1]):
            sums = np.bincount(lab, weights=self.weights * flat[:, j], minlength=n)
            out[:, j] = (sums / mass)[lab]
        return out.reshape(v.shape)

    def atom_spread(self, values, level: int) -> np.ndarray:
        """Per-scenario ``max - min`` of ``values`` over the scenario's atom."""
        v = np.asarray(values, dtype=float)
        lab = self.labels(level)
        n = self.n_atoms(level)
        hi = np.full(n, -np.inf)
        lo = np.full(n, np.inf)
        np.maximum.at(hi, lab, v)
        np.minimum.at(lo, lab, v)
        return (hi - lo)[lab]

    def is_measurable(self, values, level: int, tol: float = 0.0) -> bool:
        return bool(np.all(self.atom_spread(values, level) <= tol))

    @classmethod
    def from_partitions(cls, grid: TimeGrid, partitions, weights=None) -> "ScenarioTree":
        """Build from lists of atoms (lists of scenario ids), one list per level."""
        S = sum(len(a) for a in partitions[0])
        levels = np.empty((len(partitions), S), dtype=np.int64)
        for k, atoms in enumerate(partitions):
            seen = np.zeros(S, dtype=bool)
            for j, atom in enumerate(atoms):
                levels[k, atom] = j
                seen[atom] = True
            if not seen.all() or sum(len(a) for a in atoms) != S:
                raise TreeError(f"level {k} is not a partition of the scenarios")
        return cls(grid, levels, weights)

    def to_json(self) -> dict:
        return {
            "grid": self.grid.to_config(),
            "levels": [self.atoms(k) for k in range(self.grid.K + 1)],
            "weights": [float(x) for x in self.weights],
        }

    @classmethod
    def from_json(cls, data) -> "ScenarioTree":
        if isinstance(data, (str, Path)):
            data = json.loads(Path(data).read_text())
        unknown = set(data) - {"grid", "levels", "weights"}
        if unknown:
            raise TreeError(f"unknown tree keys {sorted(unknown)}")
        return cls.from_partitions(grid_from_config(data["grid"]), data["levels"], data.get("weights"))

    @classmethod
    def product(cls, grid: TimeGrid, factors, reveal) -> "ScenarioTree":
        """Independent finite factors revealed at given nodes.

        ``factors`` is a list of probability vectors; factor ``i`` becomes
        known at node ``reveal[i]``.  Scenarios enumerate the product space
        in C order.
        """
        sizes = [len(p) for p in factors]
        idx = np.indices(sizes).reshape(len(sizes), -1)
        w = np.ones(idx.shape[1])
        for i, p in enumerate(factors):
            w = w * np.asarray(p, dtype=float)[idx[i]]
        levels = np.zeros((grid.K + 1, idx.shape[1]), dtype=np.int64)
        for k in range(grid.K + 1):
            known = [i for i in range(len(sizes)) if reveal[i] <= k]
            if known:
                levels[k] = np.ravel_multi_index(idx[known], [sizes[i] for i in known])
        return cls(grid, levels, w / w.sum())

    def __repr__(self):
        return f"ScenarioTree(S={self.n_scenarios}, K={self.grid.K})"


def conditional_expectation(tree: ScenarioTree, values, level: int) -> np.ndarray:
    return tree.conditional_expectation(values, level)


@dataclass
class AdaptedProcess:
    """A path bundle living on the scenarios of a tree."""

    tree: ScenarioTree
    paths: PathBundle

    def __post_init__(self):
        if self.paths.grid != self.tree.grid:
            raise GridMismatch("process and tree use different grids")
        if self.paths.n_scenarios != self.tree.n_scenarios:
            raise GridMismatch("process and tree have different scenario counts")
        if not np.allclose(self.paths.weights, self.tree.weights, rtol=0, atol=TOL):
            raise TreeError("process weights differ from tree weights")

    @classmethod
    def from_values(cls, tree: ScenarioTree, V, I=None, tag: str = "") -> "AdaptedProcess":
        return cls(tree, PathBundle(tree.grid, V, I, tree.weights, tag=tag))

    @property
    def V(self):
        return self.paths.V

    @property
    def I(self):
        return self.paths.I

    def chain(self) -> np.ndarray:
        """Values along ``V_0, I_0, V_1, ...``; position ``p`` is observed at level ``p // 2``."""
        return self.paths.sequences()

    def adaptedness_defects(self, tol: float = TOL) -> list[tuple[str, int]]:
        out = []
        for k in range(self.tree.grid.K + 1):
            if not self.tree.is_measurable(self.V[:, k], k, tol * (1 + np.abs(self.V[:, k]).max())):
                out.append(("V", k))
            if k < self.tree.grid.K and not self.tree.is_measurable(
                    self.I[:, k], k, tol * (1 + np.abs(self.I[:, k]).max())):
                out.append(("I", k))
        return out

    def is_adapted(self, tol: float = TOL) -> bool:
        return not self.adaptedness_defects(tol)

    def __sub__(self, other: "AdaptedProcess") -> "AdaptedProcess":
        return AdaptedProcess.from_values(self.tree, self.V - other.V, self.I - other.I)

    def __add__(self, other: "AdaptedProcess") -> "AdaptedProcess":
        return AdaptedProcess.from_values(self.tree, self.V + other.V, self.I + other.I)


@dataclass
class Violation:
    level: int
    atom: int
    kind: str
    slack: float

    def __str__(self):
        return f"{self.kind} at level {self.level}, atom {self.atom}: slack {self.slack:.3e}"


@dataclass
class CheckReport:
    ok: bool
    min_slack: float
    max_abs_slack: float = 0.0
    violations: list[Violation] = field(default_factory=list)
    checks: int = 0

    def __bool__(self):
        return self.ok


def _atomwise(tree: ScenarioTree, slack: np.ndarray, level: int, kind: str, tol: float,
              scale: np.ndarray, sink: list, lower_only: bool = True):
    lab = tree.labels(level)
    bad = slack < -tol * (1 + scale) if lower_only else np.abs(slack) > tol * (1 + scale)
    if bad.any():
        for a in np.unique(lab[bad]):
            sel = bad & (lab == a)
            worst = slack[sel][np.argmax(np.abs(slack[sel]))] if not lower_only else slack[sel].min()
            sink.append(Violation(level, int(a), kind, float(worst)))


def _chain_steps(X: AdaptedProcess):
    """Yield ``(p, level, prev, expected_next)`` for each chain step ``p-1 -> p``."""
    seq = X.chain()
    tree = X.tree
    for p in range(1, seq.shape[1]):
        level = (p - 1) // 2
        yield p, level, seq[:, p - 1], tree.conditional_expectation(seq[:, p], level)


def check_optional_strong_supermartingale(X: AdaptedProcess, tol: float = TOL) -> CheckReport:
    """One-step checks ``V_k >= E[I_k | F_k]`` and ``I_k >= E[V_{k+1} | F_k]``."""
    viol: list[Violation] = []
    mins, maxabs, n = np.inf, 0.0, 0
    for p, level, prev, nxt in _chain_steps(X):
        slack = prev - nxt
        kind = "right step V>=E[I]" if p % 2 == 1 else "left step I>=E[V]"
        _atomwise(X.tree, slack, level, kind, tol, np.abs(prev), viol)
        mins = min(mins, float(slack.min()))
        maxabs = max(maxabs, float(np.abs(slack).max()))
        n += 1
    return CheckReport(not viol, mins, maxabs, viol, n)


def check_martingale(X: AdaptedProcess, tol: float = TOL) -> CheckReport:
    viol: list[Violation] = []
    mins, maxabs, n = np.inf, 0.0, 0
    for p, level, prev, nxt in _chain_steps(X):
        slack = prev - nxt
        _atomwise(X.tree, slack, level, "martingale step", tol, np.abs(prev), viol, lower_only=False)
        mins = min(mins, float(slack.min()))
        maxabs = max(maxabs, float(np.abs(slack).max()))
        n += 1
    return CheckReport(not viol, mins, maxabs, viol, n)


def _require_predictable(tree: ScenarioTree, V: np.ndarray, tol: float):
    for k in range(V.shape[1]):
        spread = tree.atom_spread(V[:, k], k - 1)
        bad = spread > tol * (1 + np.abs(V[:, k]).max())
        if bad.any():
            atom = int(tree.labels(k - 1)[np.flatnonzero(bad)[0]])
            raise PredictabilityError(
                f"value at node {k} is not measurable before t_{k}: it splits atom {atom} of level {k - 1}")


def check_predictable_strong_supermartingale(X: AdaptedProcess, tol: float = TOL) -> CheckReport:
    """Node values must be known one level early; checks ``V_k >= E[V_{k+1} | F_{k-1}]``.

    Only node values enter: a predictable process is read as the sequence of
    its values at the nodes.
    """
    tree = X.tree
    _require_predictable(tree, X.V, tol)
    viol: list[Violation] = []
    mins, maxabs, n = np.inf, 0.0, 0
    for k in range(tree.grid.K):
        nxt = tree.conditional_expectation(X.V[:, k + 1], k - 1)
        slack = X.V[:, k] - nxt
        _atomwise(tree, slack, k - 1, "predictable step", tol, np.abs(X.V[:, k]), viol)
        mins = min(mins, float(slack.min()))
        maxabs = max(maxabs, float(np.abs(slack).max()))
        n += 1
    return CheckReport(not viol, mins, maxabs, viol, n)


def mertens_decomposition(X: AdaptedProcess, tol: float = TOL) -> tuple[AdaptedProcess, AdaptedProcess]:
    """``X = M - A`` by the Doob recursion along the chain.

    Each step adds ``E[x_{p-1} - x_p | level of p-1]`` to ``A``; the increment
    is known at the level of the previous chain point, so ``A`` is
    predictable in the split-time sense, and ``M = X + A`` is a martingale.
    """
    report = check_optional_strong_supermartingale(X, tol)
    if not report.ok:
        raise NotSupermartingale(report)
    seq = X.chain()
    A = np.zeros_like(seq)
    for p, level, prev, nxt in _chain_steps(X):
        A[:, p] = A[:, p - 1] + (prev - nxt)
    M = seq + A
    tree = X.tree
    return (AdaptedProcess.from_values(tree, M[:, 0::2], M[:, 1::2], "mertens-M"),
            AdaptedProcess.from_values(tree, A[:, 0::2], A[:, 1::2], "mertens-A"))


def compensator_of_jump_time(tree: ScenarioTree, sigma: GridStoppingTime, hazards=None,
                             tol: float = TOL) -> AdaptedProcess:
    """Predictable ``A`` with ``1_[[sigma,1]] - A`` a martingale.

    ``A`` jumps at node ``k`` by ``h_k = P(sigma = t_k | F_{k-1})`` on
    ``{sigma >= t_k}``.  If ``hazards`` (per level, scalar or per scenario)
    are supplied they are validated against the tree.
    """
    if sigma.grid != tree.grid or len(sigma) != tree.n_scenarios:
        raise GridMismatch("stopping time does not live on this tree")
    K = tree.grid.K
    s = np.where(sigma.finite, sigma.values, K + 1)
    S = tree.n_scenarios
    dA = np.zeros((S, K + 1))
    for k in range(K + 1):
        alive = (s >= k).astype(float)
        if not tree.is_measurable(alive, k - 1):
            raise TreeError(f"{{sigma >= t_{k}}} is not known before t_{k}")
        if not tree.is_measurable((s == k).astype(float), k):
            raise TreeError(f"sigma is not a stopping time at node {k}")
        h = tree.conditional_expectation((s == k).astype(float), k - 1) * alive
        if hazards is not None:
            given = np.broadcast_to(np.asarray(hazards[k], dtype=float), (S,))
            survive_after = tree.conditional_expectation((s > k).astype(float), k - 1) > 0
            if np.any((given >= 1) & (alive > 0) & survive_after):
                raise TreeError(f"hazard >= 1 at node {k} where survival continues")
            if np.any(np.abs(given - h) * alive > 1e-9):
                raise TreeError(f"supplied hazards disagree with the tree at node {k}")
        dA[:, k] = h
    A = np.cumsum(dA, axis=1)
    return AdaptedProcess.from_values(tree, A, A[:, :-1], "compensator")


def check_relation_2_12(X1: AdaptedProcess, X0: AdaptedProcess, tol: float = TOL) -> CheckReport:
    """``X1_{t-} >= X0_t >= E[X1_t | F_{t-}]`` at every node ``t_k``, ``k >= 1``.

    Node 0 is excluded: the convention ``X_{0-} = 0`` makes the left inequality
    meaningless there.
    """
    tree = X1.tree
    if X0.tree is not tree and (X0.paths.grid != tree.grid
                                or X0.tree.n_scenarios != tree.n_scenarios):
        raise GridMismatch("processes use different trees")
    viol: list[Violation] = []
    mins, maxabs, n = np.inf, 0.0, 0
    for k in range(1, tree.grid.K + 1):
        x0 = X0.V[:, k]
        left = X1.I[:, k - 1]
        cond = tree.conditional_expectation(X1.V[:, k], k - 1)
        for slack, kind in ((left - x0, "X1_- >= X0"), (x0 - cond, "X0 >= E[X1|F_-]")):
            _atomwise(tree, slack, k - 1, f"{kind} at node {k}", tol, np.abs(x0), viol)
            mins = min(mins, float(slack.min()))
            maxabs = max(maxabs, float(np.abs(slack).max()))
            n += 1
    return CheckReport(not viol, mins, maxabs, viol, n)
