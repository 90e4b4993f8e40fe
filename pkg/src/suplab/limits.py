"""Convex-combination extraction and limits of process sequences.

Sequences are lists of aligned ``PathBundle`` objects, one per index ``n``.
Limits are estimated from the tail of the list: a scenario's value is
accepted once two of the last three indices agree to ``EPS_STAB``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ladlag_path import Evaluation, PathBundle, evaluate_at
from .timebase import GridMismatch, GridStoppingTime, RefinementRequired

__all__ = [
    "ConvexScheme",
    "ConvergenceReport",
    "LeftLimitReport",
    "NotStabilized",
    "ExtractionError",
    "EPS_STAB",
    "MASS_TOL",
    "cesaro_means",
    "komlos_extract",
    "apply_scheme",
    "combine_samples",
    "stabilized_limit",
    "fatou_limit",
    "convergence_in_probability",
    "exceedance",
    "one_sided_gap",
    "double_limit",
    "dyadic_gap",
    "left_limit_convergence_check",
]

EPS_STAB = 1e-3
MASS_TOL = 1e-3
SCHEME_TOL = 1e-12


class NotStabilized(ValueError):
    """The tail of a sequence has not settled on a set of positive mass."""


class ExtractionError(ValueError):
    pass


# --------------------------------------------------------------------------
# convex schemes


@dataclass(frozen=True)
class ConvexScheme:
    """Row ``n`` of ``weights`` gives output ``n`` as a combination of inputs ``n, n+1, ...``."""

    weights: np.ndarray
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        W = np.array(self.weights, dtype=float)
        if W.ndim != 2 or W.shape[0] == 0:
            raise ValueError("scheme weights must be a non-empty matrix")
        if np.any(W < -SCHEME_TOL):
            raise ValueError("scheme weights must be non-negative")
        sums = W.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            bad = int(np.argmax(np.abs(sums - 1.0)))
            raise ValueError(f"weights of output {bad} sum to {sums[bad]!r}, not 1")
        rows, cols = np.nonzero(W)
        if np.any(cols < rows):
            bad = int(rows[np.argmax(cols < rows)])
            raise ValueError(f"output {bad} uses an input index below its own")
        W = np.clip(W, 0.0, None)
        W.setflags(write=False)
        object.__setattr__(self, "weights", W)

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    def support(self, n: int) -> np.ndarray:
        return np.flatnonzero(self.weights[n])

    @classmethod
    def identity(cls, n: int) -> "ConvexScheme":
        return cls(np.eye(n))

    @classmethod
    def from_windows(cls, n_in: int, windows: Sequence[Sequence[int]]) -> "ConvexScheme":
        """Uniform averages over the given input index windows."""
        W = np.zeros((len(windows), n_in))
        for n, win in enumerate(windows):
            idx = np.asarray(win, dtype=np.int64)
            if idx.size == 0:
                raise ValueError(f"window {n} is empty")
            W[n, idx] += 1.0 / idx.size
        return cls(W)

    @classmethod
    def block_average(cls, n_in: int, block: int) -> "ConvexScheme":
        """Output ``n`` averages the disjoint block ``n*block .. (n+1)*block - 1``."""
        if block < 1 or n_in < block:
            raise ValueError("need 1 <= block <= n_in")
        return cls.from_windows(n_in, [range(n * block, (n + 1) * block) for n in range(n_in // block)])

    @classmethod
    def sliding_average(cls, n_in: int, width: int) -> "ConvexScheme":
        if width < 1 or n_in < width:
            raise ValueError("need 1 <= width <= n_in")
        return cls.from_windows(n_in, [range(n, n + width) for n in range(n_in - width + 1)])

    def then(self, outer: "ConvexScheme") -> "ConvexScheme":
        """Apply ``self`` first and ``outer`` to its outputs."""
        if outer.n_in != self.n_out:
            raise ValueError(f"outer scheme expects {outer.n_in} inputs, got {self.n_out}")
        return ConvexScheme(outer.weights @ self.weights)

    def apply(self, samples) -> np.ndarray:
        """Combine along the last axis of ``samples`` (one column per input index)."""
        x = np.asarray(samples, dtype=float)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"scheme expects {self.n_in} inputs, got {x.shape[-1]}")
        return x @ self.weights.T


def compose(inner: ConvexScheme, outer: ConvexScheme) -> ConvexScheme:
    return inner.then(outer)


def cesaro_means(samples, subsequence) -> np.ndarray:
    """Running means ``(1/J) sum_{j<=J} f_{n_j}`` per scenario (rows)."""
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    sub = np.asarray(subsequence, dtype=np.int64)
    if sub.size == 0:
        raise ValueError("empty subsequence")
    if np.any(np.diff(sub) <= 0):
        raise ValueError("subsequence must be strictly increasing")
    if sub[0] < 0 or sub[-1] >= x.shape[1]:
        raise IndexError("subsequence index out of range")
    return np.cumsum(x[:, sub], axis=1) / np.arange(1, sub.size + 1)


def _weighted_prob(mask: np.ndarray, weights: np.ndarray | None) -> np.ndarray:
    if weights is None:
        return mask.mean(axis=0)
    return np.tensordot(weights, mask, axes=(0, 0))


def komlos_extract(samples, eps: float = 0.1, weights=None, growth: float = 10.0) -> ConvexScheme:
    """Forward Cesàro combinations along a subsequence with thin tails.

    ``samples`` has one row per scenario and one column per index.  A
    truncation ladder ``C_k = C_0 2^{k/2}`` is walked greedily: ``n_k`` is the
    first index ``n >= 2 n_{k-1} + 1`` whose estimated ``P(|f_n| > C_k)`` is
    below ``2^{-k}``.  Output ``j`` averages ``f_{n_j}, ..., f_{n_{2j-1}}``.  When
    the successive differences fail to settle, every output instead averages
    the whole remaining subsequence.  ``info`` records the subsequence, the
    ladder and the difference diagnostic.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    S, N = x.shape
    if N < 4:
        raise ExtractionError("need at least four indices")
    if not np.all(np.isfinite(x)):
        raise ExtractionError("samples contain non-finite values")
    w = None if weights is None else np.asarray(weights, dtype=float)
    a = np.abs(x)
    means = _weighted_prob(a, w)
    q = max(N // 4, 1)
    head, tail = means[:q].mean(), means[-q:].mean()
    if tail > growth * max(head, 1e-300) and tail > 1e-12:
        raise ExtractionError(
            f"column means of |f| grow from {head:.4g} (first quarter) to {tail:.4g} "
            f"(last quarter); the sequence does not look L1-bounded")
    c0 = max(float(means.mean()), 1e-12)

    picks, ladder = [], []
    n, k = 0, 0
    while n < N:
        ck = c0 * 2.0 ** (k / 2)
        p = _weighted_prob(a[:, n:] > ck, w)
        ok = np.flatnonzero(p < 2.0 ** -k)
        if ok.size == 0:
            break
        nk = n + int(ok[0])
        picks.append(nk)
        ladder.append(ck)
        # indices at least double, so the tail sums of the subsequence stay summable
        n, k = 2 * nk + 1, k + 1
    if len(picks) < 2:
        raise ExtractionError(f"only {len(picks)} indices pass the truncation ladder")
    picks = np.array(picks)
    L = picks.size

    def diagnostic(windows):
        vals = np.stack([x[:, picks[list(win)]].mean(axis=1) for win in windows], axis=1)
        if vals.shape[1] < 2:
            return np.zeros(0)
        return _weighted_prob(np.abs(np.diff(vals, axis=1)) > eps, w)

    forward = [range(j, 2 * j) for j in range(1, L // 2 + 1)]
    d = diagnostic(forward)
    mode = "forward"
    half = d.size // 2
    if d.size >= 2 and d[half:].mean() > d[:half].mean() + 1e-12:
        forward = [range(j, L) for j in range(1, L)]
        d = diagnostic(forward)
        mode = "remaining"
    windows = [picks[list(win)] for win in forward]
    scheme = ConvexScheme.from_windows(N, windows)
    object.__setattr__(scheme, "info", {
        "subsequence": picks.tolist(), "ladder": ladder, "c0": c0,
        "mode": mode, "cauchy_diagnostic": d.tolist(), "eps": eps,
    })
    return scheme


def combine_samples(samples, scheme: ConvexScheme) -> np.ndarray:
    return scheme.apply(samples)


def apply_scheme(bundleseq: Sequence[PathBundle], scheme: ConvexScheme) -> list[PathBundle]:
    """Pathwise combinations ``sum_j w_{nj} X^j`` for every output ``n``."""
    if len(bundleseq) != scheme.n_in:
        raise ValueError(f"scheme expects {scheme.n_in} bundles, got {len(bundleseq)}")
    ref = bundleseq[0]
    for b in bundleseq[1:]:
        if not ref.aligned_with(b):
            raise GridMismatch("bundles are not aligned")
    Vs = np.stack([b.V for b in bundleseq], axis=-1)
    Is = np.stack([b.I for b in bundleseq], axis=-1)
    out = []
    for n in range(scheme.n_out):
        idx = scheme.support(n)
        w = scheme.weights[n, idx]
        V = Vs[..., idx] @ w
        I = Is[..., idx] @ w
        out.append(ref.with_values(V, I, tag=f"combined[{n}]"))
    return out


# --------------------------------------------------------------------------
# empirical limits


def stabilized_limit(stack, weights, eps_stab: float = EPS_STAB, tail: int = 3):
    """Tail limit of ``stack`` (index along axis 0).

    Among the last ``tail`` entries, the latest pair that agrees to
    ``eps_stab`` gives the limit (its later member).  Entries with no
    agreeing pair keep the last value and are flagged.  Returns
    ``(limit, unstable_mask)``.
    """
    z = np.asarray(stack, dtype=float)
    if z.shape[0] < 2:
        raise ValueError("need at least two indices to judge a limit")
    z = z[-tail:]
    m = z.shape[0]
    limit = z[-1].copy()
    done = np.zeros(z.shape[1:], dtype=bool)
    # pairs ordered by their later member, then by their earlier member
    for j in range(m - 1, 0, -1):
        for i in range(j - 1, -1, -1):
            agree = (np.abs(z[j] - z[i]) <= eps_stab) & ~done
            limit[agree] = z[j][agree]
            done |= agree
    return limit, ~done


def _limit_or_raise(stack, weights, eps_stab, what, node_names):
    lim, bad = stabilized_limit(stack, weights, eps_stab)
    # bad has shape (S, nodes); report the first node with too much mass
    mass = np.tensordot(weights, bad.astype(float), axes=(0, 0))
    over = np.flatnonzero(mass > MASS_TOL)
    if over.size:
        k = int(over[0])
        raise NotStabilized(
            f"{what} at node {node_names(k)} has not stabilized "
            f"(unsettled mass {mass[k]:.3g} > {MASS_TOL})")
    return lim


def _check_seq(bundleseq: Sequence[PathBundle]) -> PathBundle:
    if len(bundleseq) < 2:
        raise ValueError("need at least two bundles")
    ref = bundleseq[0]
    for b in bundleseq[1:]:
        if not ref.aligned_with(b):
            raise GridMismatch("bundles are not aligned")
    return ref


def fatou_limit(bundleseq: Sequence[PathBundle], rational_grid=None,
                eps_stab: float = EPS_STAB) -> PathBundle:
    """Right limits along a dense node subset of the pointwise limits ``Z``.

    ``rational_grid`` lists node indices (default: every dyadic node).  For
    ``t_k < 1`` the value is ``Z`` at the first listed node strictly after
    ``t_k``; at ``t_K`` it is ``Z_K``.  The result is càdlàg.
    """
    ref = _check_seq(bundleseq)
    grid, K = ref.grid, ref.grid.K
    q = grid.dyadic_nodes() if rational_grid is None else np.asarray(rational_grid, dtype=np.int64)
    q = np.unique(q)
    if q.size == 0 or q[-1] != K:
        raise RefinementRequired("the rational sub-grid must contain the last node")
    Zq = _limit_or_raise(np.stack([b.V[:, q] for b in bundleseq]), ref.weights, eps_stab,
                         "pointwise limit", lambda j: f"{int(q[j])} (t={grid.nodes[q[j]]:g})")
    nxt = np.searchsorted(q, np.arange(K + 1), side="right")
    nxt[K] = q.size - 1
    V = Zq[:, nxt]
    return ref.with_values(V, V[:, :-1], tag="fatou")


def double_limit(bundleseq: Sequence[PathBundle], eps_stab: float = EPS_STAB):
    """``(X1, X0)``: limits of the values and of the left values.

    ``X1`` takes node and interval limits; ``X0`` carries the limits of the
    left values as its node values (``X0_0 = 0``) and the next node's value
    on each interval.  On a grid the left value at ``t_k`` is the interval
    value before it, so ``X0_k`` equals ``X1``'s left limit there; the two
    still differ from ``X1_k`` wherever a jump survives in the limit.
    """
    ref = _check_seq(bundleseq)
    grid = ref.grid
    w = ref.weights
    name = lambda k: f"{k} (t={grid.nodes[k]:g})"
    V1 = _limit_or_raise(np.stack([b.V for b in bundleseq]), w, eps_stab, "node value", name)
    I1 = _limit_or_raise(np.stack([b.I for b in bundleseq]), w, eps_stab, "interval value", name)
    L0 = _limit_or_raise(np.stack([b.left_values() for b in bundleseq]), w, eps_stab,
                         "left value", name)
    X1 = ref.with_values(V1, I1, tag="X1")
    X0 = ref.with_values(L0, L0[:, 1:], tag="X0")
    return X1, X0


# --------------------------------------------------------------------------
# convergence in probability

REPORT_COLUMNS = ("n", "tau_id", "side", "eps", "estimate", "stderr", "samples")


@dataclass
class ConvergenceReport:
    """Exceedance estimates ``P(|X^n_tau - X_tau| > eps)``, one row per cell."""

    rows: list = field(default_factory=list)
    seed: int | None = None

    def add(self, n, tau_id, side, eps, estimate, stderr, samples):
        est = float(estimate)
        if not -1e-12 <= est <= 1 + 1e-12:
            raise ValueError(f"estimate {est!r} outside [0, 1]")
        self.rows.append({"n": int(n), "tau_id": str(tau_id), "side": str(side),
                          "eps": float(eps), "estimate": min(max(est, 0.0), 1.0),
                          "stderr": float(stderr), "samples": int(samples)})

    def cells(self):
        """Rows grouped by ``(tau_id, side, eps)``, each sorted by ``n``."""
        out: dict = {}
        for r in self.rows:
            out.setdefault((r["tau_id"], r["side"], r["eps"]), []).append(r)
        return {k: sorted(v, key=lambda r: r["n"]) for k, v in out.items()}

    def select(self, tau_id=None, side=None, eps=None) -> list:
        return [r for r in self.rows
                if (tau_id is None or r["tau_id"] == tau_id)
                and (side is None or r["side"] == side)
                and (eps is None or r["eps"] == eps)]

    def first_below(self, threshold: float) -> dict:
        """Per cell, the smallest ``n`` from which every estimate is below ``threshold``."""
        out = {}
        for key, rows in self.cells().items():
            start = None
            for r in rows:
                if r["estimate"] < threshold:
                    start = r["n"] if start is None else start
                else:
                    start = None
            out[key] = start
        return out

    def eventually_below(self, threshold: float, from_n: int | None = None, **sel) -> bool:
        """True if in every selected cell the estimates stay below ``threshold``
        from ``from_n`` on (default: at the last ``n``)."""
        cells = self.cells()
        keys = [k for k in cells
                if all(sel.get(name) is None or sel[name] == v
                       for name, v in zip(("tau_id", "side", "eps"), k))]
        if not keys:
            return False
        for k in keys:
            rows = cells[k]
            lo = rows[-1]["n"] if from_n is None else from_n
            tail = [r for r in rows if r["n"] >= lo]
            if not tail or any(r["estimate"] >= threshold for r in tail):
                return False
        return True

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([r["n"], r["tau_id"], r["side"], repr(r["eps"]),
                            repr(r["estimate"]), repr(r["stderr"]), r["samples"]])
        return path

    def summary(self, thresholds: dict | None = None) -> dict:
        """Final-``n`` estimates per cell plus a verdict per named threshold."""
        cells = self.cells()
        final = {f"{k[0]}|{k[1]}|{k[2]!r}": {"n": v[-1]["n"], "estimate": v[-1]["estimate"],
                                              "stderr": v[-1]["stderr"]}
                 for k, v in cells.items()}
        verdicts = {name: self.eventually_below(float(t))
                    for name, t in (thresholds or {}).items()}
        return {"seed": self.seed, "final": final, "verdicts": verdicts}

    def write_json(self, path, thresholds: dict | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.summary(thresholds), indent=2, sort_keys=True) + "\n")
        return path


def exceedance(values, target, eps: float, weights, exact: bool = False):
    """``(p, stderr, samples)`` for ``P(|values - target| > eps)`` under ``weights``.

    The standard error is binomial with the effective sample size
    ``1 / sum w^2``; it is zero for exact (tree) weights.
    """
    w = np.asarray(weights, dtype=float)
    hit = np.abs(np.asarray(values) - np.asarray(target)) > eps
    p = float(np.clip(w @ hit, 0.0, 1.0))
    if exact:
        return p, 0.0, w.size
    n_eff = 1.0 / float(w @ w)
    return p, float(np.sqrt(p * (1 - p) / n_eff)), w.size


def _tau_id(tau: GridStoppingTime, i: int) -> str:
    return tau.name or f"tau{i}"


def convergence_in_probability(bundleseq: Sequence[PathBundle], target: PathBundle, taus,
                               eps_list, side: Evaluation | str = Evaluation.AT, ns=None,
                               target_side: Evaluation | str | None = None,
                               exact: bool = False, seed=None) -> ConvergenceReport:
    """Exceedance of ``X^n`` against ``target`` at each stopping time.

    ``side`` picks ``X^n_tau`` or ``X^n_{tau-}``; ``target_side`` (default:
    the same) picks how ``target`` is read, so a process of left-limit values
    can be compared at its nodes with ``target_side="at"``.
    """
    side = Evaluation(side)
    tside = side if target_side is None else Evaluation(target_side)
    ns = list(range(1, len(bundleseq) + 1)) if ns is None else list(ns)
    if len(ns) != len(bundleseq):
        raise ValueError("one index label per bundle required")
    report = ConvergenceReport(seed=seed if seed is not None else target.seed)
    for i, tau in enumerate(taus):
        ref = evaluate_at(target, tau, tside)
        for n, b in zip(ns, bundleseq):
            if not b.aligned_with(target):
                raise GridMismatch(f"bundle {n} is not aligned with the target")
            x = evaluate_at(b, tau, side)
            for eps in eps_list:
                p, se, m = exceedance(x, ref, eps, b.weights, exact)
                report.add(n, _tau_id(tau, i), side.value, eps, p, se, m)
    return report


def one_sided_gap(bundleseq: Sequence[PathBundle], target: PathBundle,
                  tau: GridStoppingTime) -> np.ndarray:
    """``E[(X^n_tau - Xbar_tau)^-]`` per bundle."""
    ref = evaluate_at(target, tau)
    out = []
    for b in bundleseq:
        if not b.aligned_with(target):
            raise GridMismatch("bundle is not aligned with the target")
        out.append(float(b.weights @ np.maximum(ref - evaluate_at(b, tau), 0.0)))
    return np.array(out)


# --------------------------------------------------------------------------
# left limits


def _strict_dyadic_below(tau: GridStoppingTime, m: int) -> np.ndarray:
    """Index of the largest level-``m`` dyadic node strictly before ``tau`` (-1 at 0)."""
    grid = tau.grid
    if not grid.contains_dyadics(m):
        raise RefinementRequired(f"grid {grid!r} does not contain the dyadics of level {m}")
    k = tau.capped().values
    if grid.level is not None:
        shift = grid.level - m
        out = np.where(k > 0, ((k - 1) >> shift) << shift, -1)
        return out.astype(np.int64)
    d = grid.dyadic_nodes(m)
    pos = np.searchsorted(d, k, side="left") - 1
    return np.where(pos >= 0, d[np.maximum(pos, 0)], -1)


def dyadic_gap(bundle: PathBundle, tau: GridStoppingTime, m_list, eps: float,
               exact: bool = False) -> list[dict]:
    """``P(|X_{rho_m} - X_{tau-}| > eps)`` where ``rho_m`` is the last level-``m``
    dyadic strictly before ``tau``; scenarios with ``tau = 0`` count as no gap."""
    left = evaluate_at(bundle, tau.capped(), Evaluation.LEFT)
    rows = np.arange(bundle.n_scenarios)
    out = []
    for m in m_list:
        rho = _strict_dyadic_below(tau, m)
        x = np.where(rho >= 0, bundle.V[rows, np.maximum(rho, 0)], left)
        p, se, s = exceedance(x, left, eps, bundle.weights, exact)
        out.append({"m": int(m), "estimate": p, "stderr": se, "samples": s})
    return out


@dataclass
class LeftLimitReport:
    convergence: ConvergenceReport
    threshold: float
    passed: bool
    gaps: dict = field(default_factory=dict)
    gap_envelope: list = field(default_factory=list)
    gap_decreasing: bool = True

    def __bool__(self):
        return self.passed


def left_limit_convergence_check(bundleseq: Sequence[PathBundle], target: PathBundle,
                                 sigma: GridStoppingTime, eps: float, ns=None,
                                 threshold: float = 0.05, zoo: dict | None = None,
                                 m_list=(1, 2, 3, 4, 5, 6), exact: bool = False,
                                 target_side: Evaluation | str = Evaluation.LEFT) -> LeftLimitReport:
    """Check ``X^n_{sigma-} -> X_{sigma-}`` in probability and the dyadic-gap diagnostic.

    ``zoo`` maps names to ``(bundle, tau)`` pairs.  The envelope is the
    largest gap estimate over the zoo at each ``m``; it must not increase by
    more than two standard errors from one ``m`` to the next.
    """
    conv = convergence_in_probability(bundleseq, target, [sigma], [eps], Evaluation.LEFT, ns,
                                      target_side=target_side, exact=exact)
    passed = conv.eventually_below(threshold)
    gaps, envelope, decreasing = {}, [], True
    if zoo:
        for name, (b, tau) in zoo.items():
            gaps[name] = dyadic_gap(b, tau, m_list, eps, exact)
        for j, m in enumerate(m_list):
            worst = max((g[j] for g in gaps.values()), key=lambda r: r["estimate"])
            envelope.append({"m": int(m), "estimate": worst["estimate"], "stderr": worst["stderr"]})
        for a, b in zip(envelope, envelope[1:]):
            if b["estimate"] > a["estimate"] + 2 * max(a["stderr"], b["stderr"]) + 1e-12:
                decreasing = False
    return LeftLimitReport(conv, threshold, passed, gaps, envelope, decreasing)
