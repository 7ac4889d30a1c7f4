import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from conftest import needs_dataset, random_network, school_problem, school_solutions
from epicontain.allocation import (FEASIBLE, INFEASIBLE, InfeasibleBudgetError, LogBox,
                                   SolverOptions, investment_rows, solve_budget_constrained,
                                   solve_feasibility, solve_performance_constrained,
                                   solve_static_baseline, static_decay_rate, verify_allocation)
from epicontain.bounds import Allocation, RateBounds, propagate_bound
from epicontain.contacts import WeightedStaticGraph, aggregate_static
from epicontain.costs import normalize_costs, total_cost
from epicontain.objectives import evaluate, make_terminal_lq, sample_times
from epicontain.optim import augmented_lagrangian, pg_norm, restore_feasibility, spg


def small_instance(rng, n=4, L=3, lam=1e-2):
    net = random_network(rng, n, L, density=0.6, t_max=20000.0)
    bounds = RateBounds.uniform(n, 5e-4, 5e-3, 1e-4, 1e-3, 10.0)
    cost = normalize_costs(bounds, lam)
    p0 = np.full(n, 0.05)
    p0[0] = 1.0
    w = np.ones(n)
    w[0] = 0.0
    obj = make_terminal_lq(w, 1, net.horizon)
    return net, p0, obj, cost, bounds


def F(net, p0, obj, alloc):
    return evaluate(obj, propagate_bound(net, alloc, p0, sample_times(obj)))


# -- optimizer building blocks ------------------------------------------------------

def test_spg_box_quadratic():
    c = np.array([0.3, -2.0, 5.0])
    fun = lambda z: (float(((z - c) ** 2).sum()), 2 * (z - c))
    z, *_ = spg(fun, np.zeros(3), np.zeros(3), np.ones(3), 1e-10, 1000, SolverOptions())
    np.testing.assert_allclose(z, [0.3, 0.0, 1.0], atol=1e-9)


def test_augmented_lagrangian_known_solution():
    # min (x-2)^2 + (y-2)^2  s.t.  x + y <= 1  ->  (0.5, 0.5), multiplier 3
    obj = lambda z: (float(((z - 2) ** 2).sum()), 2 * (z - 2))
    cons = lambda z: (np.array([z.sum() - 1.0]), np.ones((1, 2)))
    for inner in ("lbfgsb", "spg"):
        res = augmented_lagrangian(obj, cons, np.zeros(2), np.full(2, -5.0), np.full(2, 5.0),
                                   SolverOptions(inner=inner))
        assert res.converged
        np.testing.assert_allclose(res.z, [0.5, 0.5], atol=1e-7)
        assert res.multipliers[0] == pytest.approx(3.0, rel=1e-6)


def test_restore_feasibility_bisects_toward_reference():
    cons = lambda z: np.array([z.sum() - 1.0])
    z, t = restore_feasibility(np.array([1.0, 1.0]), np.zeros(2), cons)
    assert cons(z)[0] <= 0 and t == pytest.approx(0.5, rel=2e-3)
    with pytest.raises(ValueError):
        restore_feasibility(np.array([1.0, 1.0]), np.array([2.0, 2.0]), cons)


def test_pg_norm():
    assert pg_norm(np.array([0.0, 0.5]), np.array([1.0, 0.2]), np.zeros(2), np.ones(2)) == 0.2


def test_logbox_maps_corners():
    b = RateBounds.uniform(3, 5e-4, 5e-3, 1e-4, 1e-3, 10.0)
    box = LogBox.from_bounds(b)
    nom, _ = box.rates_z(box.nominal_z)
    full, _ = box.rates_z(box.protected_z)
    np.testing.assert_allclose(nom.beta, b.beta_hi, rtol=1e-14)
    np.testing.assert_allclose(nom.delta, b.delta_lo, rtol=1e-12)
    np.testing.assert_array_equal(full.beta, b.beta_lo)
    np.testing.assert_array_equal(full.delta, b.delta_hi)
    np.testing.assert_allclose(box.to_x(box.nominal_z), box.hi, rtol=1e-15)


# -- budget-constrained ---------------------------------------------------------------

def test_budget_covers_full_protection(rng):
    net, p0, obj, cost, bounds = small_instance(rng)
    rep = solve_budget_constrained(net, p0, obj, cost, bounds, 2 * net.n)
    assert rep.status == FEASIBLE
    np.testing.assert_array_equal(rep.allocation.beta, bounds.beta_lo)
    np.testing.assert_array_equal(rep.allocation.delta, bounds.delta_hi)


def test_zero_budget_is_nominal_corner(rng):
    net, p0, obj, cost, bounds = small_instance(rng)
    rep = solve_budget_constrained(net, p0, obj, cost, bounds, 0.0)
    assert rep.status == FEASIBLE and rep.cost_used == 0.0
    np.testing.assert_allclose(rep.allocation.beta, bounds.beta_hi, rtol=1e-14)
    assert rep.guaranteed_J == pytest.approx(F(net, p0, obj, bounds.nominal()), rel=1e-12)


def test_negative_budget(rng):
    net, p0, obj, cost, bounds = small_instance(rng)
    assert solve_budget_constrained(net, p0, obj, cost, bounds, -1.0).status == INFEASIBLE
    with pytest.raises(InfeasibleBudgetError):
        solve_budget_constrained(net, p0, obj, cost, bounds, -cost.r_minus - 1)


def slsqp_budget(net, p0, obj, cost, bounds, R_bar):
    """Independent route: SLSQP on log J with the cost-unit budget, in rescaled log coordinates."""
    n = net.n
    lo = np.concatenate([np.log(bounds.beta_lo), np.log(bounds.delta_hat - bounds.delta_hi)])
    hi = np.concatenate([np.log(bounds.beta_hi), np.log(bounds.delta_hat - bounds.delta_lo)])
    to_alloc = lambda s: Allocation(np.exp(lo[:n] + s[:n] * (hi - lo)[:n]),
                                    np.minimum(bounds.delta_hat - np.exp(lo[n:] + s[n:] * (hi - lo)[n:]),
                                               bounds.delta_hi))
    f = lambda s: math.log(F(net, p0, obj, to_alloc(s)))
    g = lambda s: R_bar - total_cost(cost, to_alloc(s))
    res = minimize(f, np.full(2 * n, 0.5), method="SLSQP", bounds=[(0.0, 1.0)] * (2 * n),
                   constraints=[{"type": "ineq", "fun": g}], options={"ftol": 1e-14, "maxiter": 1000})
    assert g(res.x) >= -1e-9
    return math.exp(res.fun)


def test_budget_solution_matches_independent_solver(rng):
    for _ in range(3):
        inst = small_instance(rng, n=3, L=2)
        net, p0, obj, cost, bounds = inst
        rep = solve_budget_constrained(*inst, 2.0)
        assert rep.status == FEASIBLE
        assert rep.stationarity <= SolverOptions().tol_stationarity
        assert rep.cost_used <= 2.0
        ref = slsqp_budget(*inst, 2.0)
        assert rep.guaranteed_J <= ref * (1 + 1e-6)
        assert rep.guaranteed_J == pytest.approx(ref, rel=1e-6)


def test_spg_inner_solver_agrees(rng):
    inst = small_instance(rng, n=3, L=2)
    a = solve_budget_constrained(*inst, 2.5)
    b = solve_budget_constrained(*inst, 2.5, SolverOptions(inner="spg"))
    assert b.status == FEASIBLE
    assert b.guaranteed_J == pytest.approx(a.guaranteed_J, rel=1e-6)


# -- performance-constrained ------------------------------------------------------------

def test_performance_target_met_without_intervention(rng):
    net, p0, obj, cost, bounds = small_instance(rng)
    J_nom = F(net, p0, obj, bounds.nominal())
    rep = solve_performance_constrained(net, p0, obj, cost, bounds, J_nom * 1.01)
    assert rep.status == FEASIBLE and rep.cost_used == 0.0


def test_performance_target_out_of_reach(rng):
    net, p0, obj, cost, bounds = small_instance(rng)
    J_full = F(net, p0, obj, bounds.full_protection())
    rep = solve_performance_constrained(net, p0, obj, cost, bounds, 0.5 * J_full)
    assert rep.status == INFEASIBLE


def test_performance_then_budget_round_trip(rng):
    inst = small_instance(rng, n=4, L=3)
    net, p0, obj, cost, bounds = inst
    J_nom = F(net, p0, obj, bounds.nominal())
    J_full = F(net, p0, obj, bounds.full_protection())
    J_bar = math.sqrt(J_nom * J_full)
    perf = solve_performance_constrained(*inst, J_bar)
    assert perf.status == FEASIBLE
    assert perf.guaranteed_J <= J_bar * (1 + 1e-9)
    back = solve_budget_constrained(*inst, perf.cost_used)
    assert back.guaranteed_J <= J_bar * (1 + 1e-6)


# -- feasibility ------------------------------------------------------------------------

def test_feasibility_trivial_corner(rng):
    net, p0, obj, cost, bounds = small_instance(rng)
    rep = solve_feasibility(net, p0, obj, cost, bounds, 1e300, 2 * net.n)
    assert rep.status == FEASIBLE
    np.testing.assert_array_equal(rep.allocation.beta, bounds.beta_lo)


def test_feasibility_zero_budget_infeasible(rng):
    net, p0, obj, cost, bounds = small_instance(rng)
    J_nom = F(net, p0, obj, bounds.nominal())
    rep = solve_feasibility(net, p0, obj, cost, bounds, 0.5 * J_nom, 0.0)
    assert rep.status == INFEASIBLE


def test_feasibility_agrees_with_budget_optimum(rng):
    inst = small_instance(rng)
    best = solve_budget_constrained(*inst, 2.0).guaranteed_J
    ok = solve_feasibility(*inst, best * 1.05, 2.0)
    assert ok.status == FEASIBLE and ok.guaranteed_J <= best * 1.05 and ok.cost_used <= 2.0
    assert solve_feasibility(*inst, best * 0.95, 2.0).status == INFEASIBLE


@needs_dataset
def test_school_feasibility_at_1_2():
    prob = school_problem("dataset")
    rep = solve_feasibility(prob.net, prob.p0, prob.objective, prob.cost, prob.bounds, 1.2, 44.0)
    assert rep.status == FEASIBLE
    assert rep.guaranteed_J <= 1.2 and rep.cost_used <= 44.0


# -- static baseline -------------------------------------------------------------------

def test_static_decay_rate_matches_nonsymmetric_eigenvalues(rng):
    W = rng.random((5, 5))
    W = np.triu(W, 1) + np.triu(W, 1).T
    a = Allocation(rng.uniform(5e-4, 5e-3, 5), rng.uniform(1e-4, 1e-3, 5))
    M = a.beta[:, None] * W - np.diag(a.delta)
    assert static_decay_rate(W, a) == pytest.approx(np.linalg.eigvals(M).real.max(), rel=1e-12)


def test_baseline_empty_graph_spends_nothing_on_beta():
    n = 4
    bounds = RateBounds.uniform(n, 5e-4, 5e-3, 1e-4, 1e-3, 10.0)
    cost = normalize_costs(bounds, 1e-2)
    agg = WeightedStaticGraph(tuple("abcd"), np.zeros((n, n)))
    rep = solve_static_baseline(agg, cost, bounds, 2.0)
    assert rep.status == FEASIBLE
    np.testing.assert_allclose(rep.allocation.beta, bounds.beta_hi, rtol=1e-6)
    # the best worst-case recovery spreads the budget evenly
    np.testing.assert_allclose(rep.allocation.delta, rep.allocation.delta.mean(), rtol=1e-6)
    assert rep.cost_used == pytest.approx(2.0, abs=1e-6)


def test_baseline_symmetric_pair():
    bounds = RateBounds.uniform(2, 5e-4, 5e-3, 1e-4, 1e-3, 10.0)
    cost = normalize_costs(bounds, 1e-2)
    agg = WeightedStaticGraph(("a", "b"), np.array([[0.0, 0.6], [0.6, 0.0]]))
    rep = solve_static_baseline(agg, cost, bounds, 1.5)
    a = rep.allocation
    assert a.beta[0] == pytest.approx(a.beta[1], rel=1e-6)
    assert a.delta[0] == pytest.approx(a.delta[1], rel=1e-6)


def test_baseline_minimizes_decay_rate(rng):
    """No random feasible allocation beats the baseline's decay rate."""
    n = 5
    W = rng.random((n, n)) * (rng.random((n, n)) < 0.6)
    W = np.triu(W, 1) + np.triu(W, 1).T
    bounds = RateBounds.uniform(n, 5e-4, 5e-3, 1e-4, 1e-3, 10.0)
    cost = normalize_costs(bounds, 1e-2)
    rep = solve_static_baseline(WeightedStaticGraph(tuple("abcde"), W), cost, bounds, 4.0)
    best = static_decay_rate(W, rep.allocation)
    box = LogBox.from_bounds(bounds)
    for _ in range(300):
        z = rng.random(2 * n)
        alloc, _ = box.rates_z(z)
        if total_cost(cost, alloc) <= 4.0:
            assert static_decay_rate(W, alloc) >= best - 1e-12


# -- verification and reporting ----------------------------------------------------------

def test_verify_own_output(rng):
    inst = small_instance(rng)
    net, p0, obj, cost, bounds = inst
    rep = solve_budget_constrained(*inst, 3.0)
    J, R, in_box = verify_allocation(net, p0, obj, cost, rep.allocation, bounds)
    assert in_box and R <= 3.0 + 1e-9
    assert J == pytest.approx(rep.guaranteed_J, rel=1e-12)
    out = Allocation(np.full(net.n, 1.0), np.full(net.n, 1e-4))
    assert not verify_allocation(net, p0, obj, cost, out, bounds)[2]


def test_investment_rows(rng):
    inst = small_instance(rng)
    net, p0, obj, cost, bounds = inst
    rows = list(investment_rows(cost, bounds.full_protection(), net.node_labels))
    assert len(rows) == net.n
    assert rows[0][:2] == (0, "v0")
    np.testing.assert_allclose([r[4] for r in rows], 1.0, atol=1e-12)


def test_report_json_round_trip(rng):
    import json

    rep = solve_budget_constrained(*small_instance(rng), 1.0)
    d = json.loads(rep.to_json())
    assert d["status"] == FEASIBLE and len(d["beta"]) == 4
    assert "stationarity_log_units" in d["constraint_residuals"]


@needs_dataset
def test_school_verify_ratio():
    prob, rep, base, J_base = school_solutions("dataset")
    J, R, in_box = verify_allocation(prob.net, prob.p0, prob.objective, prob.cost, rep.allocation,
                                     prob.bounds)
    assert in_box and R <= 44.0 + 1e-9
    assert J_base / J >= 5


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.5, 7.5))
def test_budget_solution_is_feasible_and_no_worse_than_corners(seed, R_bar):
    rng = np.random.default_rng(seed)
    inst = small_instance(rng, n=4, L=2)
    net, p0, obj, cost, bounds = inst
    rep = solve_budget_constrained(*inst, R_bar)
    assert rep.cost_used <= R_bar
    assert bounds.contains(rep.allocation)
    assert rep.guaranteed_J <= F(net, p0, obj, bounds.nominal()) * (1 + 1e-12)
    # scaling the protection toward the nominal corner never helps
    box = LogBox.from_bounds(bounds)
    z = box.to_z(np.concatenate(rep.logspace_point))
    worse, _ = box.rates_z(0.5 * (z + 1.0))
    assert F(net, p0, obj, worse) >= rep.guaranteed_J * (1 - 1e-9)
