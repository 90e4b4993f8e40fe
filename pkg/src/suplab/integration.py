"""Pathwise integrals of finite-variation integrands against làdlàg paths.

An integrand ``phi`` is stored through its continuous part ``c`` (node
samples, linear in between), left jumps ``a_k = phi_{t_k} - phi_{t_k-}``
(``a_0 = 0``) and right jumps ``b_k = phi_{t_k+} - phi_{t_k}`` (``b_K = 0``).
Integrators are piecewise constant (``LadlagPath`` / ``PathBundle``), so
every integral below is a finite sum and exact up to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ladlag_path import LadlagPath, PathBundle
from .timebase import GridMismatch, GridStoppingTime, TimeGrid

__all__ = [
    "FVIntegrand",
    "split_integrand",
    "integrate_X_dphi",
    "integrate_phi_dX",
    "integration_by_parts_residual",
    "limit_integral_formula",
    "reference_integrals",
    "IBP_TOL",
]

IBP_TOL = 1e-10


@dataclass(frozen=True)
class FVIntegrand:
    grid: TimeGrid
    continuous: np.ndarray
    left_jumps: np.ndarray
    right_jumps: np.ndarray

    def __post_init__(self):
        n = self.grid.K + 1
        for name in ("continuous", "left_jumps", "right_jumps"):
            a = np.array(getattr(self, name), dtype=float)
            if a.shape[-1] != n:
                raise ValueError(f"{name} needs {n} entries along the last axis")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if np.any(self.left_jumps[..., 0] != 0) or np.any(self.right_jumps[..., -1] != 0):
            raise ValueError("no left jump at 0 and no right jump at 1")

    @classmethod
    def from_config(cls, grid: TimeGrid, spec: dict) -> "FVIntegrand":
        """``{"continuous": [c_0..c_K], "jumps": [[t, left, right], ...]}``."""
        unknown = set(spec) - {"continuous", "jumps"}
        if unknown:
            raise ValueError(f"unknown integrand keys {sorted(unknown)}")
        n = grid.K + 1
        c = np.asarray(spec.get("continuous", np.zeros(n)), dtype=float)
        a, b = np.zeros(n), np.zeros(n)
        for t, left, right in spec.get("jumps", []):
            k = grid.index_of(float(t))
            a[k] += left
            b[k] += right
        return cls(grid, c, a, b)

    def _acc(self):
        A = np.cumsum(self.left_jumps, axis=-1)
        B = np.cumsum(self.right_jumps, axis=-1)
        return A, B

    def node_values(self) -> np.ndarray:
        A, B = self._acc()
        return self.continuous + A + (B - self.right_jumps)

    def left_limits(self) -> np.ndarray:
        """``phi_{t_k-}``; at ``t_0`` this is ``phi_0`` (no jump at 0 from the left)."""
        return self.node_values() - self.left_jumps

    def right_limits(self) -> np.ndarray:
        return self.node_values() + self.right_jumps

    def variation(self) -> np.ndarray:
        return (np.abs(np.diff(self.continuous, axis=-1)).sum(axis=-1)
                + np.abs(self.left_jumps).sum(axis=-1) + np.abs(self.right_jumps).sum(axis=-1))

    def value_at(self, t: float) -> np.ndarray:
        """``phi_t`` at any time, interpolating the continuous part linearly."""
        nodes = self.grid.nodes
        if self.grid.contains(t):
            return self.node_values()[..., self.grid.index_of(t)]
        k = int(np.searchsorted(nodes, t)) - 1
        w = (t - nodes[k]) / (nodes[k + 1] - nodes[k])
        c = (1 - w) * self.continuous[..., k] + w * self.continuous[..., k + 1]
        A, B = self._acc()
        return c + A[..., k] + B[..., k]


def split_integrand(phi: LadlagPath, left_limits=None) -> FVIntegrand:
    """Continuous part and jumps of ``phi``.

    ``phi`` supplies node values and right limits (its interval values).  By
    default the left limit at ``t_k`` is the interval value before it, which
    makes ``phi`` a pure-jump path with constant continuous part.  Passing the
    true ``left_limits`` (``phi_{t_k-}`` for ``k = 0..K``, entry 0 ignored)
    lets ``phi`` move continuously across each interval, from ``phi_{t_k+}``
    to ``phi_{t_{k+1}-}``.
    """
    V = phi.node_values
    R = phi.interval_values
    K = phi.grid.K
    L = np.concatenate([[V[0]], R]) if left_limits is None else np.array(left_limits, dtype=float)
    if L.shape != (K + 1,):
        raise ValueError(f"need {K + 1} left limits")
    a = np.zeros(K + 1)
    b = np.zeros(K + 1)
    a[1:] = V[1:] - L[1:]
    b[:-1] = R - V[:-1]
    A = np.cumsum(a)
    Bprev = np.concatenate([[0.0], np.cumsum(b)[:-1]])
    c = V - A - Bprev
    return FVIntegrand(phi.grid, c, a, b)


def _arrays(X):
    if isinstance(X, LadlagPath):
        return X.grid, X.node_values[None, :], X.interval_values[None, :]
    if isinstance(X, PathBundle):
        return X.grid, X.V, X.I
    raise TypeError("integrator must be a LadlagPath or PathBundle")


def _nodes(t, S: int, K: int) -> np.ndarray:
    if isinstance(t, GridStoppingTime):
        if not t.finite.all():
            raise ValueError("stopping time must be finite for integration")
        t = t.values
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (S,))
    if np.any((t < 0) | (t > K)):
        raise ValueError("node index out of range")
    return t


def _prefix(terms: np.ndarray) -> np.ndarray:
    """Row-wise prefix sums with a leading zero: ``out[:, j] = sum(terms[:, :j])``."""
    out = np.zeros((terms.shape[0], terms.shape[1] + 1))
    np.cumsum(terms, axis=1, out=out[:, 1:])
    return out


def _phi_rows(phi: FVIntegrand, S: int):
    c = np.broadcast_to(phi.continuous, (S, phi.grid.K + 1))
    a = np.broadcast_to(phi.left_jumps, (S, phi.grid.K + 1))
    b = np.broadcast_to(phi.right_jumps, (S, phi.grid.K + 1))
    return c, a, b


def _squeeze(out, X):
    return float(out[0]) if isinstance(X, LadlagPath) else out


def _pieces_X_dphi(phi, V, I):
    c, a, b = _phi_rows(phi, V.shape[0])
    Pc = _prefix(I * np.diff(c, axis=1))                     # sum_{k<j} I_k (c_{k+1} - c_k)
    Pa = _prefix(I * a[:, 1:])                               # sum_{1<=k<=j} X_{t_k-} a_k
    Pb = _prefix(V[:, :-1] * b[:, :-1])                      # sum_{k<j} X_{t_k} b_k
    return Pc, Pa, Pb


def integrate_X_dphi(X, phi: FVIntegrand, t) -> np.ndarray | float:
    """``int_0^t X dphi`` with left jumps weighted by ``X_{u-}`` and right jumps by ``X_u``."""
    grid, V, I = _arrays(X)
    if grid != phi.grid:
        raise GridMismatch("integrand and integrator use different grids")
    t = _nodes(t, V.shape[0], grid.K)
    Pc, Pa, Pb = _pieces_X_dphi(phi, V, I)
    rows = np.arange(V.shape[0])
    return _squeeze(Pc[rows, t] + Pa[rows, t] + Pb[rows, t], X)


def _continuous_dX(c, V, I):
    """Prefix sums of ``int phi^c dX`` over nodes: right steps then left steps."""
    right = c[:, :-1] * (I - V[:, :-1])                       # at t_k, k < j
    left = c[:, 1:] * (V[:, 1:] - I)                         # at t_k, 1 <= k <= j
    return _prefix(right + left)


def integrate_phi_dX(phi: FVIntegrand, X, t) -> np.ndarray | float:
    """``int_0^t phi dX``; jumps of ``phi`` act on the increment of ``X`` up to ``t``."""
    grid, V, I = _arrays(X)
    if grid != phi.grid:
        raise GridMismatch("integrand and integrator use different grids")
    S = V.shape[0]
    t = _nodes(t, S, grid.K)
    rows = np.arange(S)
    c, a, b = _phi_rows(phi, S)
    Xt = V[rows, t]
    cont = _continuous_dX(c, V, I)[rows, t]
    sa = _prefix(a[:, 1:])[rows, t]
    sa_x = _prefix(a[:, 1:] * I)[rows, t]
    sb = _prefix(b[:, :-1])[rows, t]
    sb_x = _prefix(b[:, :-1] * V[:, :-1])[rows, t]
    return _squeeze(cont + (Xt * sa - sa_x) + (Xt * sb - sb_x), X)


def integration_by_parts_residual(phi: FVIntegrand, X, t) -> np.ndarray | float:
    """``phi_t X_t - phi_0 X_0 - int phi dX - int X dphi``."""
    grid, V, I = _arrays(X)
    S = V.shape[0]
    tt = _nodes(t, S, grid.K)
    rows = np.arange(S)
    pv = np.broadcast_to(phi.node_values(), (S, grid.K + 1))
    lhs = pv[rows, tt] * V[rows, tt] - pv[:, 0] * V[:, 0]
    r = lhs - np.atleast_1d(integrate_phi_dX(phi, X, t)) - np.atleast_1d(integrate_X_dphi(X, phi, t))
    return _squeeze(r, X)


def limit_integral_formula(phi: FVIntegrand, X1: PathBundle, X0: PathBundle, tau) -> np.ndarray:
    """Limit of ``int_0^tau phi dX^n`` given the limits ``X1`` (values) and ``X0`` (left values).

    ``X0`` carries the limits of the left values as its node values.
    """
    if not X1.aligned_with(X0):
        raise GridMismatch("limit processes are not aligned")
    if X1.grid != phi.grid:
        raise GridMismatch("integrand uses a different grid")
    S, K = X1.n_scenarios, X1.grid.K
    t = _nodes(tau, S, K)
    rows = np.arange(S)
    c, a, b = _phi_rows(phi, S)
    X1t = X1.V[rows, t]
    cont = _continuous_dX(c, X1.V, X1.I)[rows, t]
    sa = _prefix(a[:, 1:])[rows, t]
    sa_x = _prefix(a[:, 1:] * X0.V[:, 1:])[rows, t]
    sb = _prefix(b[:, :-1])[rows, t]
    sb_x = _prefix(b[:, :-1] * X1.V[:, :-1])[rows, t]
    return cont + (X1t * sa - sa_x) + (X1t * sb - sb_x)


def reference_integrals(phi: FVIntegrand, X: LadlagPath, k: int) -> tuple[float, float]:
    """``(int_0^{t_k} phi dX, int_0^{t_k} X dphi)`` by a plain loop over split points.

    Time is walked as ``t_0, t_0+, t_1-, t_1, t_1+, ...``.  On each step
    ``p -> q`` the first integral adds ``phi(q) (X(q) - X(p))`` and the
    second ``X(p) (phi(q) - phi(p))``; ``X`` is constant on open intervals,
    so only steps across a node contribute to the first.  Slow and direct:
    meant as an oracle for the vectorized routines.
    """
    if phi.grid != X.grid:
        raise GridMismatch("integrand and integrator use different grids")
    if not 0 <= k <= X.grid.K:
        raise ValueError("node index out of range")
    node, left, right = phi.node_values(), phi.left_limits(), phi.right_limits()
    V, I = X.node_values, X.interval_values
    points = [(float(node[0]), float(V[0]))]
    for j in range(k):
        points.append((float(right[j]), float(I[j])))
        points.append((float(left[j + 1]), float(I[j])))
        points.append((float(node[j + 1]), float(V[j + 1])))
    phi_dx = x_dphi = 0.0
    for (fp, xp), (fq, xq) in zip(points, points[1:]):
        phi_dx += fq * (xq - xp)
        x_dphi += xp * (fq - fp)
    return phi_dx, x_dphi
