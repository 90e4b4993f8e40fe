"""Time grids on [0, 1], the double-arrow index and grid stopping times."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "INFINITY",
    "NODE_TOL",
    "GridError",
    "GridMismatch",
    "RefinementRequired",
    "TimeGrid",
    "Side",
    "DoubleIndex",
    "compare",
    "GridStoppingTime",
    "AdaptednessReport",
    "dyadic_approximation",
    "validate_stopping_time",
    "grid_from_config",
]

INFINITY = -1
DEFAULT_DYADIC_LEVEL = 30
NODE_TOL = 1e-12


class GridError(ValueError):
    pass


class GridMismatch(GridError):
    pass


class RefinementRequired(GridError):
    pass


class TimeGrid:
    """Strictly increasing nodes ``0 = t_0 < ... < t_K = 1``.

    Uniform dyadic grids keep their level so that membership of a dyadic
    ``j / 2**m`` is decided with integer arithmetic.  Other grids compare
    times with an absolute tolerance of ``NODE_TOL``.
    """

    __slots__ = ("_nodes", "_level", "hints")

    def __init__(self, nodes: Iterable[float], *, level: int | None = None,
                 hints: Sequence[float] = ()):
        arr = np.array([float(t) for t in nodes], dtype=float)
        if arr.ndim != 1 or arr.size < 2:
            raise GridError("a grid needs at least the two nodes 0 and 1")
        if abs(arr[0]) > NODE_TOL or abs(arr[-1] - 1.0) > NODE_TOL:
            raise GridError("grid must start at 0 and end at 1")
        arr[0], arr[-1] = 0.0, 1.0
        if np.any(np.diff(arr) <= NODE_TOL):
            raise GridError("grid nodes must be strictly increasing")
        arr.setflags(write=False)
        self._nodes = arr
        self._level = level
        self.hints = tuple(float(h) for h in hints)

    @classmethod
    def dyadic(cls, level: int) -> "TimeGrid":
        if level < 0:
            raise GridError("dyadic level must be non-negative")
        n = 2 ** level
        return cls(np.arange(n + 1) / n, level=level)

    @classmethod
    def uniform(cls, k: int) -> "TimeGrid":
        if k < 1:
            raise GridError("need at least one interval")
        level = int(math.log2(k)) if k & (k - 1) == 0 else None
        return cls(np.arange(k + 1) / k, level=level)

    @property
    def nodes(self) -> np.ndarray:
        return self._nodes

    @property
    def level(self) -> int | None:
        return self._level

    @property
    def K(self) -> int:
        """Number of intervals; nodes are indexed ``0..K``."""
        return self._nodes.size - 1

    def __len__(self):
        return self._nodes.size

    def __eq__(self, other):
        if not isinstance(other, TimeGrid):
            return NotImplemented
        return self is other or (self._nodes.size == other._nodes.size
                                 and np.array_equal(self._nodes, other._nodes))

    def __hash__(self):
        return hash((self._nodes.size, self._nodes.tobytes()))

    def __repr__(self):
        if self._level is not None:
            return f"TimeGrid.dyadic({self._level})"
        return f"TimeGrid(K={self.K})"

    def dt(self) -> np.ndarray:
        return np.diff(self._nodes)

    def index_of(self, t: float) -> int:
        """Index of the node equal to ``t``; raises if ``t`` is not a node."""
        if self._level is not None:
            x = t * 2 ** self._level
            j = round(x)
            if abs(x - j) <= NODE_TOL * 2 ** self._level and 0 <= j <= self.K:
                return int(j)
            raise GridError(f"time {t!r} is not a node of {self!r}")
        j = int(np.searchsorted(self._nodes, t - NODE_TOL))
        if j <= self.K and abs(self._nodes[j] - t) <= NODE_TOL:
            return j
        raise GridError(f"time {t!r} is not a node of {self!r}")

    def contains(self, t: float) -> bool:
        try:
            self.index_of(t)
        except GridError:
            return False
        return True

    def first_after(self, t: float) -> int:
        """Index of the smallest node strictly greater than ``t`` (``K`` if none)."""
        j = int(np.searchsorted(self._nodes, t + NODE_TOL, side="right"))
        return min(j, self.K)

    def first_at_or_after(self, t: float) -> int:
        j = int(np.searchsorted(self._nodes, t - NODE_TOL, side="left"))
        return min(j, self.K)

    def contains_dyadics(self, m: int) -> bool:
        if self._level is not None:
            return m <= self._level
        return all(self.contains(j / 2 ** m) for j in range(2 ** m + 1))

    def dyadic_nodes(self, m: int | None = None) -> np.ndarray:
        """Indices of the nodes that are dyadic rationals (of level ``<= m``).

        Every float is a dyadic rational of some huge level, so without ``m``
        only levels up to ``DEFAULT_DYADIC_LEVEL`` count.
        """
        if self._level is not None:
            step = 1 if m is None or m >= self._level else 2 ** (self._level - m)
            return np.arange(0, self.K + 1, step)
        cap = DEFAULT_DYADIC_LEVEL if m is None else m
        out = []
        for k, t in enumerate(self._nodes):
            f = Fraction(float(t)).limit_denominator(2 ** cap)
            den = f.denominator
            if abs(float(f) - t) <= NODE_TOL and den & (den - 1) == 0:
                out.append(k)
        return np.array(out, dtype=np.int64)

    def refine(self, times: Iterable[float]) -> "TimeGrid":
        """Grid containing all current nodes plus ``times`` (within [0, 1])."""
        extra = [float(t) for t in times if 0.0 <= t <= 1.0 and not self.contains(t)]
        if not extra:
            return self
        merged = np.union1d(self._nodes, np.array(extra))
        keep = np.concatenate([[True], np.diff(merged) > NODE_TOL])
        return TimeGrid(merged[keep], hints=self.hints)

    def refine_geometric(self, anchor: float, depth: int, ratio: float = 0.5) -> "TimeGrid":
        """Add nodes ``anchor - h * ratio**i`` accumulating at ``anchor`` from the left.

        ``h`` is the width of the grid interval ending at (or containing) ``anchor``.
        """
        j = self.first_at_or_after(anchor)
        h = anchor - self._nodes[j - 1] if j > 0 else 0.0
        if h <= 0:
            return self
        pts = [anchor - h * ratio ** i for i in range(1, depth + 1)]
        g = self.refine([p for p in pts if anchor - p > 10 * NODE_TOL] + [anchor])
        hints = tuple(sorted(set(self.hints) | {float(anchor)}))
        return TimeGrid(g.nodes, level=g.level, hints=hints)

    def to_config(self):
        if self._level is not None:
            return {"dyadic_level": self._level}
        return [float(t) for t in self._nodes]


def grid_from_config(spec) -> TimeGrid:
    """Build a grid from ``{"dyadic_level": m}`` or an explicit sorted list."""
    if isinstance(spec, TimeGrid):
        return spec
    if isinstance(spec, dict):
        unknown = set(spec) - {"dyadic_level"}
        if unknown or "dyadic_level" not in spec:
            raise GridError(f"grid spec must be {{'dyadic_level': m}}, got {spec!r}")
        return TimeGrid.dyadic(int(spec["dyadic_level"]))
    if isinstance(spec, (list, tuple)):
        times = [float(t) for t in spec]
        if times != sorted(times):
            raise GridError("explicit grid must be sorted")
        return TimeGrid(times)
    raise GridError(f"unsupported grid spec {spec!r}")


class Side(IntEnum):
    LEFT = 0
    RIGHT = 1


@dataclass(frozen=True)
class DoubleIndex:
    """Point ``(t_k, side)`` of the split time axis; LEFT precedes RIGHT."""

    node: int
    side: Side = Side.RIGHT
    grid: TimeGrid | None = field(default=None, compare=False, repr=False)

    def key(self):
        return (self.node, int(self.side))

    def chain_position(self) -> int:
        """Position in the sequence ``X_{0-}, X_0, X_{0+}, X_1, ...``, starting at -1."""
        return 2 * self.node - (1 if self.side == Side.LEFT else 0)


def compare(a: DoubleIndex, b: DoubleIndex) -> int:
    """Lexicographic comparison: -1, 0 or 1."""
    if a.grid is not None and b.grid is not None and a.grid != b.grid:
        raise GridMismatch("double indices live on different grids")
    ka, kb = a.key(), b.key()
    return (ka > kb) - (ka < kb)


class GridStoppingTime:
    """Per-scenario node index, with ``INFINITY`` (-1) for 'never'."""

    __slots__ = ("grid", "values", "side", "name")

    def __init__(self, grid: TimeGrid, values, side: Side | None = None, name: str = ""):
        v = np.asarray(values, dtype=np.int64).copy()
        if v.ndim != 1:
            raise ValueError("stopping time values must be one-dimensional")
        bad = (v != INFINITY) & ((v < 0) | (v > grid.K))
        if bad.any():
            raise ValueError(f"stopping time values out of range at scenarios {np.flatnonzero(bad)[:5]}")
        v.setflags(write=False)
        self.grid = grid
        self.values = v
        self.side = side
        self.name = name

    @classmethod
    def constant(cls, grid: TimeGrid, k: int, n_scenarios: int, name: str = "") -> "GridStoppingTime":
        return cls(grid, np.full(n_scenarios, k), name=name or f"t={grid.nodes[k]:g}")

    @classmethod
    def at_time(cls, grid: TimeGrid, t: float, n_scenarios: int) -> "GridStoppingTime":
        return cls.constant(grid, grid.index_of(t), n_scenarios)

    @classmethod
    def first_hit(cls, grid: TimeGrid, values: np.ndarray, predicate, name: str = "") -> "GridStoppingTime":
        """First node where ``predicate(values)`` holds, INFINITY if never.

        ``values`` has shape (scenarios, K+1) and must be adapted.
        """
        hit = np.asarray(predicate(values), dtype=bool)
        first = np.where(hit.any(axis=1), hit.argmax(axis=1), INFINITY)
        return cls(grid, first, name=name)

    def __len__(self):
        return self.values.size

    @property
    def finite(self) -> np.ndarray:
        return self.values != INFINITY

    def times(self) -> np.ndarray:
        t = np.full(self.values.size, np.inf)
        f = self.finite
        t[f] = self.grid.nodes[self.values[f]]
        return t

    def capped(self) -> "GridStoppingTime":
        """``tau ^ 1``: the sentinel is replaced by the last node."""
        return GridStoppingTime(self.grid, np.where(self.finite, self.values, self.grid.K),
                                self.side, self.name)

    def __repr__(self):
        return f"GridStoppingTime({self.name or '?'}, n={self.values.size})"


def dyadic_approximation(tau: GridStoppingTime, m: int) -> GridStoppingTime:
    """``inf{t in D_m : t > tau} ^ 1`` scenario-wise.

    The sentinel maps to 1, as the infimum over the empty set capped at 1.
    """
    grid = tau.grid
    if m < 0 or not grid.contains_dyadics(m):
        raise RefinementRequired(f"grid {grid!r} does not contain the dyadics of level {m}")
    out = np.full(tau.values.size, grid.K, dtype=np.int64)
    f = tau.finite
    if grid.level is not None:
        # node k is k / 2**L; next dyadic of level m strictly above it
        shift = grid.level - m
        j = (tau.values[f] >> shift) + 1
        out[f] = np.minimum(j << shift, grid.K)
    else:
        scale = 2 ** m
        x = grid.nodes[tau.values[f]] * scale
        r = np.round(x)
        near = np.abs(x - r) <= NODE_TOL * scale
        j = np.where(near, r, np.floor(x)) + 1
        t = np.minimum(j / scale, 1.0)
        out[f] = [grid.index_of(s) for s in t]
    return GridStoppingTime(grid, out, tau.side, f"{tau.name}@D{m}")


@dataclass
class AdaptednessReport:
    ok: bool
    # level -> atom ids on which tau equals that node
    events: dict = field(default_factory=dict)
    violation_level: int | None = None
    violation_atom: int | None = None

    def __bool__(self):
        return self.ok


def validate_stopping_time(tau: GridStoppingTime, tree) -> AdaptednessReport:
    """Check that every event ``{tau <= t_k}`` is a union of level-k atoms."""
    if tau.grid != tree.grid:
        raise GridMismatch("stopping time and tree use different grids")
    if len(tau) != tree.n_scenarios:
        raise GridMismatch("stopping time and tree have different scenario counts")
    events = {}
    v = tau.values
    for k in range(tree.grid.K + 1):
        labels = tree.labels(k)
        stopped = (v != INFINITY) & (v <= k)
        n_atoms = labels.max() + 1
        hits = np.bincount(labels, weights=stopped, minlength=n_atoms)
        sizes = np.bincount(labels, minlength=n_atoms)
        split = np.flatnonzero((hits > 0) & (hits < sizes))
        if split.size:
            return AdaptednessReport(False, events, k, int(split[0]))
        now = np.unique(labels[v == k])
        if now.size:
            events[k] = [int(a) for a in now]
    return AdaptednessReport(True, events)
