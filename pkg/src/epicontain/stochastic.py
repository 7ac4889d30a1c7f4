"""Exact and sampled SIS dynamics on a temporal network.

Two references for the bound:

* :func:`master_equation_marginals` propagates the full distribution over the
  ``2^n`` infection states (node ``i`` is bit ``i`` of the state index) and
  reads off the marginal infection probabilities.
* :func:`gillespie_run` and :func:`mc_estimate_objective` simulate the
  continuous-time chain.  Inside a snapshot all rates are constant; a waiting
  time that crosses a switch is discarded and redrawn at the switch, which is
  exact because waiting times are memoryless.

Initial states are independent Bernoulli draws with the given marginals.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from numba import njit

from .bounds import Allocation, _segments, expm_action
from .contacts import TemporalNetwork
from .objectives import ObjectiveSpec, sample_times as objective_times, value_and_sample_gradient

__all__ = [
    "EpidemicState",
    "InitialDistribution",
    "McEstimate",
    "MarginalTrajectory",
    "SamplePath",
    "StateSpaceTooLargeError",
    "MAX_EXACT_NODES",
    "master_generator",
    "master_equation_marginals",
    "gillespie_run",
    "mc_marginals",
    "mc_estimate_objective",
    "write_marginals_csv",
    "write_path_csv",
]

MAX_EXACT_NODES = 14


class StateSpaceTooLargeError(MemoryError):
    """The exact chain would need more than ``2**MAX_EXACT_NODES`` states."""


@dataclass(frozen=True)
class EpidemicState:
    x: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        x = np.asarray(self.x)
        if x.ndim != 1 or not np.all((x == 0) | (x == 1)):
            raise ValueError("state entries must be 0 or 1")
        object.__setattr__(self, "x", x.astype(np.int8))


@dataclass(frozen=True)
class InitialDistribution:
    """Independent Bernoulli marginals ``p0``."""

    p0: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p0, dtype=float)
        if p.ndim != 1 or np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
            raise ValueError("p0 entries must lie in [0, 1]")
        object.__setattr__(self, "p0", p)

    @property
    def n(self) -> int:
        return self.p0.size


@dataclass(frozen=True)
class McEstimate:
    mean: float
    std_error: float
    trials: int
    seed: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std_error": self.std_error, "trials": self.trials,
                "seed": self.seed}


@dataclass(frozen=True)
class MarginalTrajectory:
    """Infection probabilities at ``sample_times``; ``mass`` is the total probability."""

    sample_times: np.ndarray
    values: np.ndarray
    mass: np.ndarray

    def at(self, t: float) -> np.ndarray:
        k = np.flatnonzero(np.isclose(self.sample_times, t, rtol=0, atol=1e-9))
        if k.size == 0:
            raise KeyError(f"time {t} was not sampled")
        return self.values[k[0]]


@dataclass(frozen=True)
class SamplePath:
    """States at ``times`` plus the event list ``(time, node, new_value)``."""

    times: np.ndarray
    states: np.ndarray
    event_times: np.ndarray
    event_nodes: np.ndarray
    event_values: np.ndarray


def _as_init(init, n) -> InitialDistribution:
    if not isinstance(init, InitialDistribution):
        init = InitialDistribution(init)
    if init.n != n:
        raise ValueError(f"initial distribution has {init.n} entries, network has {n} nodes")
    return init


def _check_times(net, sample_times):
    ts = np.atleast_1d(np.asarray(sample_times, dtype=float))
    if np.any(np.diff(ts) < 0):
        raise ValueError("sample_times must be ordered")
    if ts.size and (ts[0] < 0 or ts[-1] > net.horizon):
        raise ValueError(f"sample time outside [0, {net.horizon}]")
    return ts


# -- master equation ---------------------------------------------------------

def _bits(n):
    states = np.arange(1 << n, dtype=np.int64)
    return ((states[:, None] >> np.arange(n)) & 1).astype(np.int8)


def master_generator(adjacency, alloc: Allocation) -> sp.csr_matrix:
    """Generator ``Q`` of the ``2^n``-state chain, with ``dq/dt = Q q``.

    Recovery of an infected node ``i`` has rate ``delta_i``; infection of a
    susceptible node ``i`` has rate ``beta_i`` times its number of infected
    neighbours.
    """
    A = np.asarray(adjacency, dtype=float)
    n = alloc.n
    if n > MAX_EXACT_NODES:
        raise StateSpaceTooLargeError(f"{n} nodes exceed the exact limit of {MAX_EXACT_NODES}")
    X = _bits(n)
    S = np.arange(1 << n, dtype=np.int64)
    pressure = X @ A.T  # infected neighbours of each node, per state
    rates = np.where(X == 1, alloc.delta[None, :], alloc.beta[None, :] * pressure)
    src = np.repeat(S, n)
    dst = (S[:, None] ^ (1 << np.arange(n))[None, :]).ravel()
    r = rates.ravel()
    keep = r > 0
    Q = sp.csr_matrix((r[keep], (dst[keep], src[keep])), shape=(1 << n, 1 << n))
    return (Q - sp.diags(rates.sum(axis=1))).tocsr()


def _product_bernoulli(p0):
    q = np.ones(1)
    for p in p0:
        # node i is bit i, so each new node doubles the block from the top
        q = np.concatenate([q * (1.0 - p), q * p])
    return q


def master_equation_marginals(net: TemporalNetwork, alloc: Allocation, init, sample_times,
                              tol: float = 1e-14) -> MarginalTrajectory:
    """Exact marginal infection probabilities at ``sample_times``.

    Raises
    ------
    StateSpaceTooLargeError
        If ``net.n > MAX_EXACT_NODES``.
    """
    n = net.n
    if n > MAX_EXACT_NODES:
        raise StateSpaceTooLargeError(f"{n} nodes exceed the exact limit of {MAX_EXACT_NODES}")
    if alloc.n != n:
        raise ValueError("allocation and network sizes differ")
    init = _as_init(init, n)
    ts = _check_times(net, sample_times)
    X = _bits(n).astype(float)
    q = _product_bernoulli(init.p0)
    snaps, dts, slots = _segments(net, ts)
    gens: dict[int, sp.csr_matrix] = {}
    vals = np.empty((ts.size, n))
    mass = np.empty(ts.size)
    for ell, dt, slot in zip(snaps, dts, slots):
        if slot >= 0:
            vals[slot] = X.T @ q
            mass[slot] = q.sum()
            continue
        if dt <= 0:
            continue
        Q = gens.get(ell)
        if Q is None:
            Q = gens[ell] = master_generator(net.adjacency[ell], alloc)
        q = expm_action(Q, float(dt), q, tol)
    return MarginalTrajectory(ts, vals, mass)


# -- Gillespie ---------------------------------------------------------------

def _neighbour_lists(net: TemporalNetwork):
    L, n = net.num_snapshots, net.n
    ptr = np.zeros((L, n + 1), dtype=np.int64)
    idx = []
    off = 0
    for ell, A in enumerate(net.adjacency):
        r, c = np.nonzero(A)
        counts = np.bincount(r, minlength=n)
        ptr[ell, 1:] = off + np.cumsum(counts)
        ptr[ell, 0] = off
        idx.append(c)
        off += c.size
    return ptr, (np.concatenate(idx) if idx else np.zeros(0, np.int64)).astype(np.int64)


@njit(cache=True)
def _simulate(x, bounds, ptr, nbr, beta, delta, ts, out, ev_t, ev_n, ev_v, record):
    """One trajectory from state ``x`` (modified in place).

    States at ``ts`` go to ``out``; events are written to ``ev_*`` while
    ``record`` is set.  Returns the number of events, or -1 on overflow.
    """
    n = x.size
    L = bounds.size - 1
    K = ts.size
    k = 0
    nev = 0
    t = bounds[0]
    count = np.zeros(n, dtype=np.int64)
    rate = np.zeros(n)
    for ell in range(L):
        t_end = bounds[ell + 1]
        for i in range(n):
            c = 0
            for e in range(ptr[ell, i], ptr[ell, i + 1]):
                c += x[nbr[e]]
            count[i] = c
        for i in range(n):
            rate[i] = delta[i] if x[i] == 1 else beta[i] * count[i]
        while True:
            total = 0.0
            for i in range(n):
                total += rate[i]
            if total > 0.0:
                t_next = t + np.random.exponential(1.0 / total)
            else:
                t_next = np.inf
            stop = t_next if t_next < t_end else t_end
            while k < K and ts[k] < stop:
                out[k, :] = x
                k += 1
            if t_next >= t_end:
                t = t_end
                break
            t = t_next
            u = np.random.random() * total
            j = n - 1
            acc = 0.0
            for i in range(n):
                acc += rate[i]
                if u < acc:
                    j = i
                    break
            while rate[j] == 0.0:
                j -= 1
            x[j] = 1 - x[j]
            step = 1 if x[j] == 1 else -1
            rate[j] = delta[j] if x[j] == 1 else beta[j] * count[j]
            for e in range(ptr[ell, j], ptr[ell, j + 1]):
                i = nbr[e]
                count[i] += step
                if x[i] == 0:
                    rate[i] = beta[i] * count[i]
            if record:
                if nev >= ev_t.size:
                    return -1
                ev_t[nev] = t
                ev_n[nev] = j
                ev_v[nev] = x[j]
            nev += 1
    while k < K:
        out[k, :] = x
        k += 1
    return nev


@njit(cache=True)
def _batch(seeds, p0, bounds, ptr, nbr, beta, delta, ts, weights, mode, acc, per_trial):
    """Run one trajectory per seed.

    ``mode == 0`` accumulates state sums into ``acc`` (K, n);
    ``mode == 1`` stores ``sum(weights * states)`` per trial in ``per_trial``.
    """
    n = p0.size
    K = ts.size
    out = np.zeros((K, n), dtype=np.int8)
    x = np.zeros(n, dtype=np.int8)
    dummy_t = np.zeros(0)
    dummy_i = np.zeros(0, dtype=np.int64)
    dummy_v = np.zeros(0, dtype=np.int8)
    for r in range(seeds.size):
        np.random.seed(seeds[r])
        for i in range(n):
            x[i] = 1 if np.random.random() < p0[i] else 0
        _simulate(x, bounds, ptr, nbr, beta, delta, ts, out, dummy_t, dummy_i, dummy_v, False)
        if mode == 0:
            for k in range(K):
                for i in range(n):
                    acc[k, i] += out[k, i]
        else:
            s = 0.0
            for k in range(K):
                for i in range(n):
                    s += weights[k, i] * out[k, i]
            per_trial[r] = s


@njit(cache=True)
def _seed(s):
    # numba keeps its own generator state; seeding numpy from Python would not reach it
    np.random.seed(s)


def _trial_seeds(seed: int, trials: int) -> np.ndarray:
    """One 31-bit seed per trial, derived from ``(seed, trial index)``."""
    words = np.random.SeedSequence(seed).generate_state(trials, dtype=np.uint32)
    return (words >> np.uint32(1)).astype(np.int64)


def _rates(net, alloc):
    if alloc.n != net.n:
        raise ValueError("allocation and network sizes differ")
    return np.ascontiguousarray(alloc.beta), np.ascontiguousarray(alloc.delta)


def gillespie_run(net: TemporalNetwork, alloc: Allocation, x0, rng_seed: int,
                  sample_times=()) -> SamplePath:
    """Simulate one exact trajectory of the SIS chain.

    Parameters
    ----------
    x0 : EpidemicState or array of 0/1
    rng_seed : int
    sample_times : array_like, optional
        Extra times at which to record the state; every snapshot boundary is
        always recorded.

    Returns
    -------
    SamplePath
        States are right-continuous: the state at ``t`` includes events at ``t``.
    """
    if not isinstance(x0, EpidemicState):
        x0 = EpidemicState(np.asarray(x0))
    if x0.x.size != net.n:
        raise ValueError("initial state size does not match the network")
    beta, delta = _rates(net, alloc)
    extra = _check_times(net, sample_times)
    times = np.union1d(net.boundaries, extra)
    ptr, nbr = _neighbour_lists(net)
    cap = 1024
    while True:
        x = x0.x.copy()
        out = np.zeros((times.size, net.n), dtype=np.int8)
        ev_t, ev_n, ev_v = np.zeros(cap), np.zeros(cap, np.int64), np.zeros(cap, np.int8)
        _seed(int(_trial_seeds(rng_seed, 1)[0]))
        nev = _simulate(x, net.boundaries, ptr, nbr, beta, delta, times, out, ev_t, ev_n, ev_v, True)
        if nev >= 0:
            return SamplePath(times, out, ev_t[:nev], ev_n[:nev], ev_v[:nev])
        cap *= 8


def mc_marginals(net: TemporalNetwork, alloc: Allocation, init, sample_times, trials: int,
                 seed: int) -> np.ndarray:
    """Fraction of ``trials`` trajectories infected, per sample time and node."""
    init = _as_init(init, net.n)
    ts = _check_times(net, sample_times)
    beta, delta = _rates(net, alloc)
    ptr, nbr = _neighbour_lists(net)
    acc = np.zeros((ts.size, net.n))
    _batch(_trial_seeds(seed, trials), init.p0, net.boundaries, ptr, nbr, beta, delta, ts,
           np.zeros((ts.size, net.n)), 0, acc, np.zeros(0))
    return acc / trials


def mc_estimate_objective(net: TemporalNetwork, alloc: Allocation, init,
                          objective: ObjectiveSpec, trials: int, seed: int) -> McEstimate:
    """Monte Carlo estimate of the objective on the true infection probabilities.

    The objective is applied to the ensemble-averaged indicator trajectories.
    Its standard error comes from the per-trial linearization around that
    average, which is exact for objectives linear in the marginals.  A second
    pass replays the same random streams to form the per-trial terms.
    """
    if trials < 100:
        raise ValueError("trials must be at least 100")
    init = _as_init(init, net.n)
    ts = objective_times(objective)
    _check_times(net, ts)
    beta, delta = _rates(net, alloc)
    ptr, nbr = _neighbour_lists(net)
    seeds = _trial_seeds(seed, trials)
    acc = np.zeros((ts.size, net.n))
    _batch(seeds, init.p0, net.boundaries, ptr, nbr, beta, delta, ts,
           np.zeros((ts.size, net.n)), 0, acc, np.zeros(0))
    mean = acc / trials
    traj = MarginalTrajectory(ts, mean, np.ones(ts.size))
    J, G = value_and_sample_gradient(objective, traj)
    per = np.zeros(trials)
    _batch(seeds, init.p0, net.boundaries, ptr, nbr, beta, delta, ts,
           np.ascontiguousarray(G, dtype=float), 1, np.zeros((ts.size, net.n)), per)
    se = float(per.std(ddof=1) / math.sqrt(trials))
    return McEstimate(float(J), se, int(trials), int(seed))


def write_marginals_csv(traj: MarginalTrajectory, fh, labels: Sequence[str] | None = None) -> None:
    w = csv.writer(fh)
    w.writerow(["t", "node", "probability"])
    for t, row in zip(traj.sample_times, traj.values):
        for i, v in enumerate(row):
            w.writerow([float(t), labels[i] if labels else i, repr(float(v))])


def write_path_csv(path: SamplePath, fh, labels: Sequence[str] | None = None) -> None:
    w = csv.writer(fh)
    w.writerow(["t", "node", "infected"])
    for t, node, v in zip(path.event_times, path.event_nodes, path.event_values):
        w.writerow([float(t), labels[node] if labels else int(node), int(v)])
