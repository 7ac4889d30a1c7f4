import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_alloc, random_network
from epicontain.bounds import Allocation, propagate_bound
from epicontain.contacts import TemporalNetwork
from epicontain.objectives import make_terminal_lq
from epicontain.stochastic import (MAX_EXACT_NODES, EpidemicState, InitialDistribution,
                                   StateSpaceTooLargeError, gillespie_run, master_equation_marginals,
                                   master_generator, mc_estimate_objective, mc_marginals,
                                   write_marginals_csv, write_path_csv)


def static_network(n, edges, horizon):
    A = np.zeros((1, n, n), bool)
    for i, j in edges:
        A[0, i, j] = A[0, j, i] = True
    return TemporalNetwork(tuple(map(str, range(n))), np.array([0.0, horizon]), A)


def path_network(bounds, patterns, n=3):
    adj = np.zeros((len(patterns), n, n), bool)
    for k, edges in enumerate(patterns):
        for i, j in edges:
            adj[k, i, j] = adj[k, j, i] = True
    return TemporalNetwork(tuple(map(str, range(n))), np.asarray(bounds, float), adj)


def rk4_master(net, alloc, q0, t_end, h_max=0.5):
    """Fixed-step RK4 on the dense full-state equation, snapshot by snapshot."""
    q = np.array(q0, float)
    for k in range(net.num_snapshots):
        t0, t1 = net.boundaries[k], min(net.boundaries[k + 1], t_end)
        if t1 <= t0:
            break
        Q = master_generator(net.adjacency[k], alloc).toarray()
        m = int(math.ceil((t1 - t0) / h_max))
        h = (t1 - t0) / m
        for _ in range(m):
            k1 = Q @ q
            k2 = Q @ (q + 0.5 * h * k1)
            k3 = Q @ (q + 0.5 * h * k2)
            k4 = Q @ (q + h * k3)
            q = q + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return q


def bernoulli_product(p0):
    n = len(p0)
    X = (np.arange(1 << n)[:, None] >> np.arange(n)) & 1
    return np.prod(np.where(X == 1, p0, 1 - np.asarray(p0)), axis=1), X


# -- types -----------------------------------------------------------------------

def test_state_and_initial_distribution_validation():
    assert EpidemicState([0, 1, 1]).x.dtype == np.int8
    with pytest.raises(ValueError):
        EpidemicState([0, 2])
    with pytest.raises(ValueError):
        InitialDistribution([0.5, 1.5])
    assert InitialDistribution([0.2, 0.3]).n == 2


# -- master equation -------------------------------------------------------------

def test_generator_columns_sum_to_zero(rng):
    net = random_network(rng, 4, 1)
    Q = master_generator(net.adjacency[0], random_alloc(rng, 4)).toarray()
    np.testing.assert_allclose(Q.sum(axis=0), 0.0, atol=1e-18)
    off = Q[~np.eye(16, dtype=bool)]
    assert np.all(off >= 0)


def test_pure_death_single_node():
    net = static_network(1, [], 5000.0)
    a = Allocation([1e-3], [4e-4])
    ts = [0.0, 1000.0, 5000.0]
    m = master_equation_marginals(net, a, [1.0], ts)
    np.testing.assert_allclose(m.values[:, 0], np.exp(-4e-4 * np.array(ts)), rtol=1e-13)


def test_no_infection_equals_bound(rng):
    net = random_network(rng, 5, 4, t_max=5000.0)
    a = Allocation(np.zeros(5), rng.uniform(1e-4, 1e-3, 5))
    p0 = rng.random(5)
    ts = np.sort(rng.uniform(0, net.horizon, 4))
    m = master_equation_marginals(net, a, p0, ts)
    np.testing.assert_allclose(m.values, p0 * np.exp(-np.outer(ts, a.delta)), rtol=1e-10)
    np.testing.assert_allclose(m.values, propagate_bound(net, a, p0, ts).values, rtol=1e-10)


def test_path_graph_matches_fine_step_integrator(rng):
    net = path_network([0.0, 600.0, 1500.0], [[(0, 1), (1, 2)], [(1, 2)]])
    a = random_alloc(rng, 3)
    p0 = np.array([0.9, 0.3, 0.05])
    ts = [300.0, 600.0, 1100.0, 1500.0]
    m = master_equation_marginals(net, a, p0, ts)
    q0, X = bernoulli_product(p0)
    for t, row in zip(ts, m.values):
        np.testing.assert_allclose(row, X.T @ rk4_master(net, a, q0, t), rtol=1e-8)


def test_probability_is_conserved(rng):
    net = random_network(rng, 6, 4, t_max=8000.0)
    m = master_equation_marginals(net, random_alloc(rng, 6), rng.random(6),
                                  np.sort(rng.uniform(0, net.horizon, 6)))
    np.testing.assert_allclose(m.mass, 1.0, atol=1e-10)
    assert np.all((m.values >= 0) & (m.values <= 1 + 1e-12))


def test_state_space_guard():
    n = MAX_EXACT_NODES + 1
    net = static_network(n, [], 10.0)
    a = Allocation(np.full(n, 1e-3), np.full(n, 1e-3))
    with pytest.raises(StateSpaceTooLargeError):
        master_equation_marginals(net, a, np.zeros(n), [1.0])


def test_marginal_lookup():
    net = static_network(1, [], 10.0)
    m = master_equation_marginals(net, Allocation([0.0], [0.1]), [1.0], [0.0, 10.0])
    assert m.at(10.0)[0] == pytest.approx(math.exp(-1.0), rel=1e-13)
    with pytest.raises(KeyError):
        m.at(5.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.integers(1, 5))
def test_bound_dominates_marginals(seed, n, L):
    rng = np.random.default_rng(seed)
    net = random_network(rng, n, L, t_max=30000.0)
    a = random_alloc(rng, n)
    p0 = rng.random(n)
    ts = np.union1d(net.boundaries, rng.uniform(0, net.horizon, 5))
    exact = master_equation_marginals(net, a, p0, ts).values
    bound = propagate_bound(net, a, p0, ts).values
    assert np.all(bound - exact >= -1e-9)


# -- Gillespie -------------------------------------------------------------------

def test_all_susceptible_is_absorbing(rng):
    net = random_network(rng, 5, 4)
    path = gillespie_run(net, random_alloc(rng, 5), np.zeros(5, int), 3, [1.0, 2.0])
    assert path.event_times.size == 0
    assert not path.states.any()
    np.testing.assert_array_equal(path.times, np.union1d(net.boundaries, [1.0, 2.0]))


def test_recovery_time_is_exponential():
    delta = 2e-3
    net = static_network(1, [], 1e6)
    a = Allocation([0.0], [delta])
    runs = 100_000
    times = np.empty(runs)
    for r in range(runs):
        p = gillespie_run(net, a, [1], r)
        assert p.event_values.tolist() == [0]
        times[r] = p.event_times[0]
    se = times.std(ddof=1) / math.sqrt(runs)
    assert abs(times.mean() - 1 / delta) <= 3 * se


def test_two_node_long_run_fraction():
    # always connected pair: long-run fraction vs the exact chain
    net = static_network(2, [(0, 1)], 400.0)
    a = Allocation([0.05, 0.02], [0.01, 0.015])
    trials = 20_000
    est = mc_marginals(net, a, [1.0, 1.0], [400.0], trials, seed=11)[0]
    exact = master_equation_marginals(net, a, [1.0, 1.0], [400.0]).values[0]
    se = np.sqrt(exact * (1 - exact) / trials)
    assert np.all(np.abs(est - exact) <= 3 * se)


def test_mc_marginals_converge_to_master_equation(rng):
    net = random_network(rng, 5, 4, t_max=20000.0)
    a = Allocation(rng.uniform(5e-3, 2e-2, 5), rng.uniform(1e-4, 1e-3, 5))
    p0 = rng.random(5)
    ts = np.sort(rng.uniform(0, net.horizon, 3))
    trials = 100_000
    est = mc_marginals(net, a, p0, ts, trials, seed=5)
    exact = master_equation_marginals(net, a, p0, ts).values
    se = np.sqrt(exact * (1 - exact) / trials)
    assert np.all(np.abs(est - exact) <= 3 * se)


def test_path_is_consistent_with_events(rng):
    net = random_network(rng, 4, 3, t_max=5000.0)
    a = Allocation(np.full(4, 5e-3), np.full(4, 1e-3))
    x0 = np.array([1, 0, 1, 0])
    p = gillespie_run(net, a, x0, 42, [0.1 * net.horizon, 0.7 * net.horizon])
    x = x0.copy()
    k = 0
    for t, state in zip(p.times, p.states):
        while k < p.event_times.size and p.event_times[k] <= t:
            assert x[p.event_nodes[k]] != p.event_values[k]
            x[p.event_nodes[k]] = p.event_values[k]
            k += 1
        np.testing.assert_array_equal(state, x)
    assert np.all(np.diff(p.event_times) >= 0)


def test_gillespie_is_deterministic(rng):
    net = random_network(rng, 4, 3)
    a = random_alloc(rng, 4)
    p1 = gillespie_run(net, a, [1, 1, 0, 0], 9)
    p2 = gillespie_run(net, a, [1, 1, 0, 0], 9)
    np.testing.assert_array_equal(p1.event_times, p2.event_times)
    np.testing.assert_array_equal(p1.states, p2.states)


def test_gillespie_rejects_bad_state(rng):
    net = random_network(rng, 3, 2)
    with pytest.raises(ValueError):
        gillespie_run(net, random_alloc(rng, 3), [1, 0], 0)


# -- Monte Carlo objective ---------------------------------------------------------

def test_mc_degenerate_case_is_exact():
    net = static_network(3, [(0, 1), (1, 2)], 100.0)
    a = Allocation(np.zeros(3), np.full(3, 50.0))
    est = mc_estimate_objective(net, a, np.zeros(3), make_terminal_lq(np.ones(3), 1, 100.0), 500, 1)
    assert est.mean == 0.0 and est.std_error == 0.0
    assert est.trials == 500 and est.seed == 1


def test_mc_no_infection_closed_form(rng):
    n, T = 6, 2000.0
    net = random_network(rng, n, 3, t_max=T)
    a = Allocation(np.zeros(n), rng.uniform(1e-4, 1e-3, n))
    p0 = rng.random(n)
    w = rng.uniform(0.5, 2.0, n)
    spec = make_terminal_lq(w, 1, net.horizon)
    est = mc_estimate_objective(net, a, p0, spec, 20_000, seed=3)
    exact = float(np.sum(w * p0 * np.exp(-a.delta * net.horizon)))
    assert est.std_error > 0
    assert abs(est.mean - exact) <= 3 * est.std_error


def test_mc_is_reproducible_per_seed(rng):
    net = random_network(rng, 5, 3)
    a = random_alloc(rng, 5)
    spec = make_terminal_lq(np.ones(5), 1, net.horizon)
    e1 = mc_estimate_objective(net, a, np.full(5, 0.5), spec, 300, seed=8)
    e2 = mc_estimate_objective(net, a, np.full(5, 0.5), spec, 300, seed=8)
    e3 = mc_estimate_objective(net, a, np.full(5, 0.5), spec, 300, seed=9)
    assert e1 == e2
    assert e1.to_dict() != e3.to_dict()


def test_mc_rejects_few_trials(rng):
    net = random_network(rng, 2, 1)
    with pytest.raises(ValueError):
        mc_estimate_objective(net, random_alloc(rng, 2), [0.5, 0.5],
                              make_terminal_lq([1, 1], 1, net.horizon), 99, 0)


# -- output ----------------------------------------------------------------------

def test_csv_writers():
    net = static_network(2, [(0, 1)], 50.0)
    a = Allocation([0.1, 0.1], [0.05, 0.05])
    m = master_equation_marginals(net, a, [1.0, 0.0], [0.0, 50.0])
    buf = io.StringIO()
    write_marginals_csv(m, buf, ["x", "y"])
    lines = buf.getvalue().splitlines()
    assert lines[0] == "t,node,probability" and len(lines) == 5
    assert lines[1] == "0.0,x,1.0"
    p = gillespie_run(net, a, [1, 0], 2)
    buf = io.StringIO()
    write_path_csv(p, buf)
    rows = buf.getvalue().splitlines()
    assert rows[0] == "t,node,infected" and len(rows) == p.event_times.size + 1
