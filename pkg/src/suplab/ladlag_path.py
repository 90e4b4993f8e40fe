"""Piecewise-constant làdlàg trajectories and bundles of them.

A path on a grid with nodes ``t_0 < ... < t_K`` is stored as node values
``V_k = X_{t_k}`` and interval values ``I_k`` (the constant value on the
open interval ``(t_k, t_{k+1})``).  The left limit at ``t_k`` is ``I_{k-1}``
(``X_{0-} = 0``), the right limit is ``I_k`` (``X_{1+} = X_1``).

Walking through ``V_0, I_0, V_1, I_1, ..., V_K`` visits every value the path
takes, in time order; counters for moves and up-crossings run over this
sequence.
"""

from __future__ import annotations

import csv
import json
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .timebase import INFINITY, GridMismatch, GridStoppingTime, TimeGrid, grid_from_config

__all__ = [
    "Evaluation",
    "LadlagPath",
    "PathBundle",
    "left_limit",
    "right_limit",
    "jumps",
    "eps_move_count",
    "eps_move_counts",
    "upcrossings",
    "upcrossing_counts",
    "evaluate_at",
    "override_at_stopping_times",
    "linear_combination",
    "write_bundle",
    "read_bundle",
]

WEIGHT_TOL = 1e-12


class Evaluation(str, Enum):
    AT = "AT"
    LEFT = "LEFT"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str) and value.upper() in cls.__members__:
            return cls[value.upper()]
        return None


class LadlagPath:
    __slots__ = ("grid", "node_values", "interval_values")

    def __init__(self, grid: TimeGrid, node_values, interval_values=None):
        v = np.array(node_values, dtype=float)
        if v.shape != (grid.K + 1,):
            raise ValueError(f"expected {grid.K + 1} node values, got {v.shape}")
        i = v[:-1].copy() if interval_values is None else np.array(interval_values, dtype=float)
        if i.shape != (grid.K,):
            raise ValueError(f"expected {grid.K} interval values, got {i.shape}")
        v.setflags(write=False)
        i.setflags(write=False)
        self.grid = grid
        self.node_values = v
        self.interval_values = i

    @classmethod
    def constant(cls, grid: TimeGrid, c: float) -> "LadlagPath":
        return cls(grid, np.full(grid.K + 1, float(c)), np.full(grid.K, float(c)))

    @classmethod
    def from_sequence(cls, grid: TimeGrid, seq) -> "LadlagPath":
        seq = np.asarray(seq, dtype=float)
        return cls(grid, seq[0::2], seq[1::2])

    def sequence(self) -> np.ndarray:
        out = np.empty(2 * self.grid.K + 1)
        out[0::2] = self.node_values
        out[1::2] = self.interval_values
        return out

    def left_limits(self) -> np.ndarray:
        return np.concatenate([[0.0], self.interval_values])

    def right_limits(self) -> np.ndarray:
        return np.concatenate([self.interval_values, self.node_values[-1:]])

    def is_cadlag(self) -> bool:
        return bool(np.array_equal(self.node_values[:-1], self.interval_values))

    def is_continuous(self) -> bool:
        return self.is_cadlag() and bool(np.array_equal(self.node_values[1:], self.interval_values))

    def __eq__(self, other):
        if not isinstance(other, LadlagPath):
            return NotImplemented
        return (self.grid == other.grid
                and np.array_equal(self.node_values, other.node_values)
                and np.array_equal(self.interval_values, other.interval_values))

    def __repr__(self):
        return f"LadlagPath(K={self.grid.K})"


def left_limit(path: LadlagPath, k: int) -> float:
    return 0.0 if k == 0 else float(path.interval_values[k - 1])


def right_limit(path: LadlagPath, k: int) -> float:
    return float(path.node_values[-1] if k == path.grid.K else path.interval_values[k])


def jumps(path: LadlagPath, k: int) -> tuple[float, float]:
    """``(X_t - X_{t-}, X_{t+} - X_t)`` at node ``k``."""
    v = float(path.node_values[k])
    return v - left_limit(path, k), right_limit(path, k) - v


class PathBundle:
    """Scenarios of làdlàg paths on one grid, with probability weights."""

    __slots__ = ("grid", "V", "I", "weights", "seed", "tag")

    def __init__(self, grid: TimeGrid, V, I=None, weights=None, seed=None, tag: str = ""):
        V = np.array(V, dtype=float)
        if V.ndim != 2 or V.shape[1] != grid.K + 1:
            raise ValueError(f"node values must have shape (S, {grid.K + 1}), got {V.shape}")
        I = V[:, :-1].copy() if I is None else np.array(I, dtype=float)
        if I.shape != (V.shape[0], grid.K):
            raise ValueError(f"interval values must have shape {(V.shape[0], grid.K)}, got {I.shape}")
        S = V.shape[0]
        w = np.full(S, 1.0 / S) if weights is None else np.array(weights, dtype=float)
        if w.shape != (S,):
            raise ValueError("one weight per scenario required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights must be non-negative and sum to 1 (sum={w.sum()!r})")
        for a in (V, I, w):
            a.setflags(write=False)
        self.grid, self.V, self.I, self.weights = grid, V, I, w
        self.seed, self.tag = seed, tag

    @classmethod
    def from_paths(cls, paths: Sequence[LadlagPath], weights=None, seed=None, tag="") -> "PathBundle":
        grid = paths[0].grid
        if any(p.grid != grid for p in paths):
            raise GridMismatch("all paths must share one grid")
        return cls(grid, np.stack([p.node_values for p in paths]),
                   np.stack([p.interval_values for p in paths]), weights, seed, tag)

    @classmethod
    def deterministic(cls, grid: TimeGrid, node_values, interval_values=None, n_scenarios=1,
                      weights=None, tag="") -> "PathBundle":
        p = LadlagPath(grid, node_values, interval_values)
        return cls(grid, np.tile(p.node_values, (n_scenarios, 1)),
                   np.tile(p.interval_values, (n_scenarios, 1)), weights, tag=tag)

    @property
    def n_scenarios(self) -> int:
        return self.V.shape[0]

    def __len__(self):
        return self.V.shape[0]

    def path(self, s: int) -> LadlagPath:
        return LadlagPath(self.grid, self.V[s], self.I[s])

    def sequences(self) -> np.ndarray:
        S, K = self.V.shape[0], self.grid.K
        out = np.empty((S, 2 * K + 1))
        out[:, 0::2] = self.V
        out[:, 1::2] = self.I
        return out

    def left_values(self) -> np.ndarray:
        """``X_{t_k-}`` for every node, with ``X_{0-} = 0``."""
        return np.concatenate([np.zeros((self.V.shape[0], 1)), self.I], axis=1)

    def right_values(self) -> np.ndarray:
        return np.concatenate([self.I, self.V[:, -1:]], axis=1)

    def mean(self, values: np.ndarray) -> np.ndarray:
        return np.tensordot(self.weights, values, axes=(0, 0))

    def with_values(self, V, I=None, tag=None) -> "PathBundle":
        return PathBundle(self.grid, V, I, self.weights, self.seed, self.tag if tag is None else tag)

    def aligned_with(self, other: "PathBundle") -> bool:
        return (self.grid == other.grid and self.V.shape == other.V.shape
                and np.array_equal(self.weights, other.weights))

    def __eq__(self, other):
        if not isinstance(other, PathBundle):
            return NotImplemented
        return (self.aligned_with(other) and np.array_equal(self.V, other.V)
                and np.array_equal(self.I, other.I))

    def __repr__(self):
        return f"PathBundle({self.tag or '?'}, S={self.n_scenarios}, K={self.grid.K})"


def _as_sequences(x) -> np.ndarray:
    if isinstance(x, LadlagPath):
        return x.sequence()[None, :]
    if isinstance(x, PathBundle):
        return x.sequences()
    a = np.asarray(x, dtype=float)
    return a[None, :] if a.ndim == 1 else a


def eps_move_counts(x, eps: float) -> np.ndarray:
    """Maximal number of moves of size ``> eps`` along each sequence.

    Exact dynamic programme over the sets ``S_c`` of values at which a chain
    with ``c`` moves can end.  Dropping the first point of a chain shows
    ``S_{c+1}`` is contained in ``S_c``, so only ``min S_c`` and ``max S_c``
    matter and both are monotone in ``c``: a new value ``x`` ends a chain of
    ``f = max{c + 1 : min S_c < x - eps or max S_c > x + eps}`` moves and joins
    every ``S_c`` with ``c <= f``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    seq = _as_sequences(x)
    S, n = seq.shape
    cap = 8
    lo = np.full((S, cap), np.inf)
    hi = np.full((S, cap), -np.inf)
    cols = np.arange(cap)
    best = np.zeros(S, dtype=np.int64)
    for p in range(n):
        v = seq[:, p]
        a = np.count_nonzero(lo < (v - eps)[:, None], axis=1)
        b = np.count_nonzero(hi > (v + eps)[:, None], axis=1)
        f = np.maximum(a, b)
        np.maximum(best, f, out=best)
        if best.max() + 1 >= cap:
            grow = cap
            lo = np.concatenate([lo, np.full((S, grow), np.inf)], axis=1)
            hi = np.concatenate([hi, np.full((S, grow), -np.inf)], axis=1)
            cap += grow
            cols = np.arange(cap)
        mask = cols[None, :] <= f[:, None]
        np.minimum(lo, np.where(mask, v[:, None], np.inf), out=lo)
        np.maximum(hi, np.where(mask, v[:, None], -np.inf), out=hi)
    return best


def eps_move_count(path, eps: float) -> int:
    return int(eps_move_counts(path, eps)[0])


def upcrossing_counts(x, a: float, b: float) -> np.ndarray:
    """Completed passages from strictly below ``a`` to strictly above ``b``."""
    if not a < b:
        raise ValueError(f"need a < b, got a={a!r}, b={b!r}")
    seq = _as_sequences(x)
    below = np.zeros(seq.shape[0], dtype=bool)
    count = np.zeros(seq.shape[0], dtype=np.int64)
    for p in range(seq.shape[1]):
        v = seq[:, p]
        up = below & (v > b)
        count += up
        below = (below & ~up) | (v < a)
    return count


def upcrossings(path, a: float, b: float) -> int:
    return int(upcrossing_counts(path, a, b)[0])


def _check_tau(bundle: PathBundle, tau: GridStoppingTime):
    if tau.grid != bundle.grid:
        raise GridMismatch("stopping time and bundle use different grids")
    if len(tau) != bundle.n_scenarios:
        raise GridMismatch("stopping time and bundle have different scenario counts")


def evaluate_at(bundle: PathBundle, tau: GridStoppingTime, side: Evaluation | str = Evaluation.AT) -> np.ndarray:
    """``X_tau`` (AT) or ``X_{tau-}`` (LEFT) per scenario."""
    _check_tau(bundle, tau)
    side = Evaluation(side)
    inf = np.flatnonzero(~tau.finite)
    if inf.size:
        raise ValueError(f"stopping time is infinite on scenario {int(inf[0])}; restrict it first")
    rows = np.arange(bundle.n_scenarios)
    k = tau.values
    if side is Evaluation.AT:
        return bundle.V[rows, k].copy()
    out = np.zeros(bundle.n_scenarios)
    pos = k > 0
    out[pos] = bundle.I[rows[pos], k[pos] - 1]
    return out


def override_at_stopping_times(bundle: PathBundle, taus: Sequence[GridStoppingTime], values) -> PathBundle:
    """Replace ``X_{tau_m}`` by ``Y_m`` on ``{tau_m < inf}``; interval values stay."""
    if len(taus) != len(values):
        raise ValueError("one value array per stopping time required")
    if not taus:
        return bundle
    for t in taus:
        _check_tau(bundle, t)
    S = bundle.n_scenarios
    stack = np.stack([t.values for t in taus])
    for s in range(S):
        col = stack[:, s]
        fin = col[col != INFINITY]
        if fin.size != np.unique(fin).size:
            dup = [int(x) for x in fin if np.count_nonzero(fin == x) > 1]
            times = sorted({float(bundle.grid.nodes[d]) for d in dup})
            raise ValueError(f"stopping-time graphs overlap on scenario {s} at times {times}")
    V = bundle.V.copy()
    rows = np.arange(S)
    for t, y in zip(taus, values):
        y = np.broadcast_to(np.asarray(y, dtype=float), (S,))
        f = t.finite
        V[rows[f], t.values[f]] = y[f]
    return bundle.with_values(V, bundle.I)


def linear_combination(bundles: Sequence[PathBundle], coeffs) -> PathBundle:
    coeffs = np.asarray(coeffs, dtype=float)
    if len(bundles) != coeffs.size or not bundles:
        raise ValueError("one coefficient per bundle required")
    ref = bundles[0]
    for b in bundles[1:]:
        if not ref.aligned_with(b):
            raise GridMismatch("bundles are not aligned")
    V = sum(c * b.V for c, b in zip(coeffs, bundles))
    I = sum(c * b.I for c, b in zip(coeffs, bundles))
    return ref.with_values(V, I, tag="combination")


def _fmt(x: float) -> str:
    return repr(float(x))


def write_bundle(bundle: PathBundle, directory, name: str = "bundle") -> tuple[Path, Path]:
    """Write ``<name>.csv`` (one row per scenario and node) and ``<name>.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = d / f"{name}.csv", d / f"{name}.json"
    K = bundle.grid.K
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "node", "V", "I", "weight"])
        for s in range(bundle.n_scenarios):
            ws = _fmt(bundle.weights[s])
            for k in range(K + 1):
                iv = _fmt(bundle.I[s, k]) if k < K else ""
                w.writerow([s, k, _fmt(bundle.V[s, k]), iv, ws])
    manifest = {
        "grid": bundle.grid.to_config(),
        "seed": bundle.seed,
        "construction": bundle.tag,
        "scenarios": bundle.n_scenarios,
        "csv": csv_path.name,
    }
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def read_bundle(json_path) -> PathBundle:
    json_path = Path(json_path)
    manifest = json.loads(json_path.read_text())
    grid = grid_from_config(manifest["grid"])
    S, K = manifest["scenarios"], grid.K
    V = np.empty((S, K + 1))
    I = np.empty((S, K))
    w = np.empty(S)
    with open(json_path.parent / manifest["csv"], newline="") as fh:
        for row in csv.DictReader(fh):
            s, k = int(row["scenario"]), int(row["node"])
            V[s, k] = float(row["V"])
            if k < K:
                I[s, k] = float(row["I"])
            w[s] = float(row["weight"])
    return PathBundle(grid, V, I, w, manifest.get("seed"), manifest.get("construction", ""))
