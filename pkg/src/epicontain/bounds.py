"""Upper-bound dynamics ``dp/dt = (B A(t) - D) p`` on a temporal network.

The flow over one snapshot is ``exp((B A_l - D) h_l)``; it is applied to the
state vector (never formed as a matrix) with a shifted, scaled Taylor series.
Shifting a Metzler generator by its smallest diagonal entry makes it entrywise
nonnegative, so every Taylor term is nonnegative and the sum has no
cancellation.  Nodes without contacts in a snapshot are advanced in closed
form; only the rows of nodes that touch an edge go through the series.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from numba import njit

from .contacts import TemporalNetwork

__all__ = [
    "RateBounds",
    "Allocation",
    "BoundTrajectory",
    "SensitivityBlock",
    "generator",
    "expm_action",
    "propagate_bound",
    "propagate_with_sensitivity",
    "write_trajectory_csv",
]

_EPS = np.finfo(float).eps
# per-step scaling target for the Taylor series; ~25 terms reach 1e-16 at this norm
_THETA = 2.0


@dataclass(frozen=True)
class RateBounds:
    """Per-node box for the rates, plus the recovery offset ``delta_hat``."""

    beta_lo: np.ndarray
    beta_hi: np.ndarray
    delta_lo: np.ndarray
    delta_hi: np.ndarray
    delta_hat: float

    def __post_init__(self):
        arrs = [np.atleast_1d(np.asarray(getattr(self, k), dtype=float))
                for k in ("beta_lo", "beta_hi", "delta_lo", "delta_hi")]
        n = max(a.size for a in arrs)
        arrs = [np.broadcast_to(a, (n,)).copy() for a in arrs]
        blo, bhi, dlo, dhi = arrs
        if np.any(blo <= 0) or np.any(blo > bhi):
            raise ValueError("need 0 < beta_lo <= beta_hi")
        if np.any(dlo <= 0) or np.any(dlo > dhi):
            raise ValueError("need 0 < delta_lo <= delta_hi")
        if not self.delta_hat > dhi.max():
            raise ValueError("delta_hat must exceed every delta_hi")
        for k, a in zip(("beta_lo", "beta_hi", "delta_lo", "delta_hi"), arrs):
            a.setflags(write=False)
            object.__setattr__(self, k, a)
        object.__setattr__(self, "delta_hat", float(self.delta_hat))

    @classmethod
    def uniform(cls, n, beta_lo, beta_hi, delta_lo, delta_hi, delta_hat) -> "RateBounds":
        full = lambda x: np.full(n, float(x))
        return cls(full(beta_lo), full(beta_hi), full(delta_lo), full(delta_hi), delta_hat)

    @property
    def n(self) -> int:
        return self.beta_lo.size

    def contains(self, alloc: "Allocation", rtol: float = 1e-12) -> bool:
        b, d = alloc.beta, alloc.delta
        if b.size != self.n or d.size != self.n:
            return False
        slack = lambda lo, x, hi: np.all(x >= lo * (1 - rtol)) and np.all(x <= hi * (1 + rtol))
        return bool(slack(self.beta_lo, b, self.beta_hi) and slack(self.delta_lo, d, self.delta_hi))

    def nominal(self) -> "Allocation":
        """No intervention: highest transmission, lowest recovery."""
        return Allocation(self.beta_hi, self.delta_lo)

    def full_protection(self) -> "Allocation":
        return Allocation(self.beta_lo, self.delta_hi)


@dataclass(frozen=True)
class Allocation:
    beta: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.beta, dtype=float)).copy()
        d = np.atleast_1d(np.asarray(self.delta, dtype=float)).copy()
        if b.shape != d.shape or b.ndim != 1:
            raise ValueError("beta and delta must be vectors of equal length")
        if np.any(b < 0) or np.any(d < 0) or not (np.all(np.isfinite(b)) and np.all(np.isfinite(d))):
            raise ValueError("rates must be finite and nonnegative")
        b.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "delta", d)

    @property
    def n(self) -> int:
        return self.beta.size


@dataclass(frozen=True)
class BoundTrajectory:
    """``values[k]`` is the bound vector at ``sample_times[k]``."""

    sample_times: np.ndarray
    values: np.ndarray
    p0: np.ndarray

    def at(self, t: float) -> np.ndarray:
        k = np.flatnonzero(self.sample_times == t)
        if k.size == 0:
            raise KeyError(f"time {t} was not sampled")
        return self.values[k[0]]


@dataclass(frozen=True)
class SensitivityBlock:
    """``d[k, i, j]``: derivative of component ``i`` at ``sample_times[k]``.

    Columns ``0..n-1`` are with respect to ``beta_j``; columns ``n..2n-1`` with
    respect to ``delta_j``.
    """

    sample_times: np.ndarray
    d: np.ndarray


def generator(adjacency, alloc: Allocation) -> np.ndarray:
    """Return ``diag(beta) @ A - diag(delta)``."""
    A = np.asarray(adjacency, dtype=float)
    n = alloc.n
    if A.shape != (n, n):
        raise ValueError(f"adjacency shape {A.shape} does not match {n} nodes")
    return alloc.beta[:, None] * A - np.diag(alloc.delta)


def _inf_norm(M) -> float:
    if sp.issparse(M):
        return float(abs(M).sum(axis=1).max()) if M.shape[0] else 0.0
    return float(np.abs(M).sum(axis=1).max()) if M.size else 0.0


def _taylor(apply: Callable[[np.ndarray], np.ndarray], norm: float, h: float,
            X: np.ndarray, shift: float, tol: float) -> np.ndarray:
    """``exp(h (Op + shift I)) X`` where ``Op`` is given by ``apply`` with inf-norm ``norm``."""
    a = norm * h
    s = max(1, int(math.ceil(a / _THETA)))
    eta = math.exp(shift * h / s)
    ratio = a / s
    for _ in range(s):
        acc = X.copy()
        term = X
        k = 0
        while True:
            k += 1
            term = apply(term) * (h / (s * k))
            acc += term
            tn = np.abs(term).max()
            rho = ratio / (k + 1)
            if tn == 0.0 or (rho < 0.5 and tn / (1.0 - rho) <= tol * np.abs(acc).max()):
                break
            if k > 200:
                break
        X = acc * eta
    return X


def expm_action(M, h: float, v, tol: float = 1e-14) -> np.ndarray:
    """Approximate ``exp(M h) @ v`` for a Metzler matrix ``M``.

    Parameters
    ----------
    M : (n, n) array or sparse matrix
        Nonnegative off-diagonal entries are what make the result nonnegative;
        other matrices are accepted but get no positivity guarantee.
    h : float
        Nonnegative step.
    v : (n,) or (n, k) array
    tol : float
        Relative error target in the max norm, in ``(0, 1e-6]``.

    Returns
    -------
    w : ndarray
        Same shape as ``v``.  Tiny negative round-off is clamped to zero when
        ``M`` is Metzler and ``v`` nonnegative.
    """
    if not 0 < tol <= 1e-6:
        raise ValueError("tol must lie in (0, 1e-6]")
    if h < 0:
        raise ValueError("h must be nonnegative")
    v = np.asarray(v, dtype=float)
    dense = not sp.issparse(M)
    if dense:
        M = np.asarray(M, dtype=float)
        finite = np.all(np.isfinite(M))
    else:
        M = sp.csr_matrix(M, dtype=float)
        finite = np.all(np.isfinite(M.data))
    if not finite or not np.all(np.isfinite(v)) or not math.isfinite(h):
        raise ValueError("nonfinite input")
    if h == 0 or v.size == 0:
        return v.copy()
    tol = max(tol, _EPS)
    diag = M.diagonal()
    mu = float(diag.min())
    if dense:
        N = M - mu * np.eye(M.shape[0])
    else:
        N = (M - mu * sp.identity(M.shape[0], format="csr")).tocsr()
    w = _taylor(lambda X: N @ X, _inf_norm(N), h, v, mu, tol)
    if np.all(v >= 0):
        offdiag_ok = (np.all(N >= 0) if dense else np.all(N.data >= 0))
        if offdiag_ok:
            np.maximum(w, 0.0, out=w)
    return w


def _check_inputs(net: TemporalNetwork, alloc: Allocation, p0, sample_times):
    if alloc.n != net.n:
        raise ValueError(f"allocation has {alloc.n} nodes, network has {net.n}")
    p0 = np.asarray(p0, dtype=float)
    if p0.shape != (net.n,) or np.any(p0 < 0):
        raise ValueError("p0 must be a nonnegative vector with one entry per node")
    ts = np.atleast_1d(np.asarray(sample_times, dtype=float))
    if np.any(np.diff(ts) < 0):
        raise ValueError("sample_times must be ordered")
    if ts.size and (ts[0] < 0 or ts[-1] > net.horizon):
        raise ValueError(f"sample time outside [0, {net.horizon}]")
    return p0, ts


def _segments(net: TemporalNetwork, ts: np.ndarray):
    """Split ``[0, ts[-1]]`` into pieces that never cross a switch or a sample time.

    Returns arrays ``(snapshot, dt, slot)``; pieces with ``slot >= 0`` are
    zero-length markers that record the state into output row ``slot``.
    """
    bounds = net.boundaries
    snaps, dts, slots = [], [], []
    t = 0.0
    k = 0
    ell = 0
    while k < ts.size:
        if ts[k] <= t:
            snaps.append(-1); dts.append(0.0); slots.append(k)
            k += 1
            continue
        while bounds[ell + 1] <= t and ell < net.num_snapshots - 1:
            ell += 1
        t_next = min(bounds[ell + 1], ts[k])
        snaps.append(ell); dts.append(t_next - t); slots.append(-1)
        t = t_next
    return (np.array(snaps, dtype=np.int64), np.array(dts, dtype=float),
            np.array(slots, dtype=np.int64))


class _Layout:
    """Per-snapshot active nodes and directed edge lists in CSR-like arrays."""

    def __init__(self, net: TemporalNetwork):
        act_ptr = [0]
        act_idx = []
        edge_ptr = [0]
        edge_r, edge_c = [], []
        for A in net.adjacency:
            act = np.flatnonzero(A.any(axis=1))
            loc = np.full(net.n, -1)
            loc[act] = np.arange(act.size)
            r, c = np.nonzero(A)
            act_idx.extend(act.tolist())
            act_ptr.append(len(act_idx))
            edge_r.extend(loc[r].tolist())
            edge_c.extend(loc[c].tolist())
            edge_ptr.append(len(edge_r))
        self.act_ptr = np.array(act_ptr, dtype=np.int64)
        self.act_idx = np.array(act_idx, dtype=np.int64)
        self.edge_ptr = np.array(edge_ptr, dtype=np.int64)
        self.edge_r = np.array(edge_r, dtype=np.int64)
        self.edge_c = np.array(edge_c, dtype=np.int64)


_LAYOUTS: dict[int, tuple] = {}


def _layout(net: TemporalNetwork) -> _Layout:
    hit = _LAYOUTS.get(id(net))
    if hit is not None and hit[0] is net:
        return hit[1]
    if len(_LAYOUTS) > 32:
        _LAYOUTS.clear()
    lay = _Layout(net)
    _LAYOUTS[id(net)] = (net, lay)
    return lay


@njit(cache=True)
def _advance(X, act_idx, a0, a1, edge_r, edge_c, e0, e1, beta, delta, dt, tol, coupled):
    """Advance rows of ``X`` over one piece of length ``dt`` (in place).

    Column 0 is the state.  With ``coupled`` the remaining columns are the
    sensitivities to ``log beta`` (1..n) and ``-log delta`` (n+1..2n).
    """
    n = beta.size
    m = X.shape[1]
    k = a1 - a0
    act = act_idx[a0:a1]
    Y = np.empty((k, m))
    for r in range(k):
        for col in range(m):
            Y[r, col] = X[act[r], col]
    # rows of nodes without contacts: closed form (active rows are overwritten below)
    for i in range(n):
        dec = math.exp(-delta[i] * dt)
        for col in range(m):
            X[i, col] *= dec
        if coupled:
            X[i, 1 + n + i] += delta[i] * dt * X[i, 0]
    if k == 0:
        return
    dn = np.empty(k)
    ba = np.empty(k)
    da = np.empty(k)
    dmax = 0.0
    for r in range(k):
        ba[r] = beta[act[r]]
        da[r] = delta[act[r]]
        if da[r] > dmax:
            dmax = da[r]
    deg = np.zeros(k)
    for e in range(e0, e1):
        deg[edge_r[e]] += 1.0
    norm = 0.0
    cpl = 0.0
    for r in range(k):
        dn[r] = dmax - da[r]
        v = dn[r] + ba[r] * deg[r]
        if v > norm:
            norm = v
        if coupled:
            v = max(ba[r] * deg[r], da[r])
            if v > cpl:
                cpl = v
    norm += cpl
    a = norm * dt
    s = max(1, int(math.ceil(a / 2.0)))
    h = dt / s
    eta = math.exp(-dmax * h)
    ratio = a / s
    term = np.empty((k, m))
    nxt = np.empty((k, m))
    acc = np.empty((k, m))
    for _ in range(s):
        for r in range(k):
            for col in range(m):
                acc[r, col] = Y[r, col]
                term[r, col] = Y[r, col]
        j = 0
        while True:
            j += 1
            c = h / j
            for r in range(k):
                for col in range(m):
                    nxt[r, col] = dn[r] * term[r, col]
            for e in range(e0, e1):
                rr = edge_r[e]
                cc = edge_c[e]
                f = ba[rr]
                for col in range(m):
                    nxt[rr, col] += f * term[cc, col]
                if coupled:
                    nxt[rr, 1 + act[rr]] += f * term[cc, 0]
            if coupled:
                for r in range(k):
                    nxt[r, 1 + n + act[r]] += da[r] * term[r, 0]
            tn = 0.0
            an = 0.0
            for r in range(k):
                for col in range(m):
                    v = nxt[r, col] * c
                    term[r, col] = v
                    acc[r, col] += v
                    if v > tn:
                        tn = v
                    if acc[r, col] > an:
                        an = acc[r, col]
            rho = ratio / (j + 1)
            if tn == 0.0 or (rho < 0.5 and tn / (1.0 - rho) <= tol * an) or j > 200:
                break
        for r in range(k):
            for col in range(m):
                Y[r, col] = acc[r, col] * eta
    for r in range(k):
        for col in range(m):
            X[act[r], col] = Y[r, col]


@njit(cache=True)
def _run(X, seg_snap, seg_dt, seg_slot, act_ptr, act_idx, edge_ptr, edge_r, edge_c,
         beta, delta, tol, coupled, out):
    for q in range(seg_snap.size):
        slot = seg_slot[q]
        if slot >= 0:
            for i in range(X.shape[0]):
                for col in range(X.shape[1]):
                    out[slot, i, col] = X[i, col]
            continue
        dt = seg_dt[q]
        if dt <= 0.0:
            continue
        ell = seg_snap[q]
        _advance(X, act_idx, act_ptr[ell], act_ptr[ell + 1], edge_r, edge_c,
                 edge_ptr[ell], edge_ptr[ell + 1], beta, delta, dt, tol, coupled)


def _propagate(net, alloc, p0, ts, tol, coupled):
    lay = _layout(net)
    seg = _segments(net, ts)
    n = net.n
    m = 2 * n + 1 if coupled else 1
    X = np.zeros((n, m))
    X[:, 0] = p0
    out = np.empty((ts.size, n, m))
    _run(X, *seg, lay.act_ptr, lay.act_idx, lay.edge_ptr, lay.edge_r, lay.edge_c,
         np.ascontiguousarray(alloc.beta), np.ascontiguousarray(alloc.delta),
         max(tol, _EPS), coupled, out)
    return out


def propagate_bound(net: TemporalNetwork, alloc: Allocation, p0, sample_times,
                    tol: float = 1e-14) -> BoundTrajectory:
    """Bound trajectory sampled at ``sample_times`` (ordered, within ``[0, T]``)."""
    p0, ts = _check_inputs(net, alloc, p0, sample_times)
    out = _propagate(net, alloc, p0, ts, tol, False)
    return BoundTrajectory(ts, np.maximum(out[:, :, 0], 0.0), p0)


def propagate_with_sensitivity(net: TemporalNetwork, alloc: Allocation, p0, sample_times,
                               tol: float = 1e-14):
    """Bound trajectory plus its derivatives with respect to every rate.

    The state and the ``n x 2n`` sensitivity matrix are advanced together as
    one linear system per snapshot.  Internally the sensitivities are taken
    with respect to ``log beta`` and ``-log delta`` so that the augmented
    system stays nonnegative and well scaled; they are unscaled on output.
    """
    p0, ts = _check_inputs(net, alloc, p0, sample_times)
    n = net.n
    out = _propagate(net, alloc, p0, ts, tol, True)
    d = np.empty((ts.size, n, 2 * n))
    d[:, :, :n] = out[:, :, 1:n + 1] / alloc.beta[None, None, :]
    d[:, :, n:] = -out[:, :, n + 1:] / alloc.delta[None, None, :]
    return (BoundTrajectory(ts, np.maximum(out[:, :, 0], 0.0), p0),
            SensitivityBlock(ts, d))


def write_trajectory_csv(traj: BoundTrajectory, fh, labels: Sequence[str] | None = None) -> None:
    import csv

    w = csv.writer(fh)
    w.writerow(["t", "node", "value"])
    for t, row in zip(traj.sample_times, traj.values):
        for i, v in enumerate(row):
            w.writerow([float(t), labels[i] if labels else i, repr(float(v))])
