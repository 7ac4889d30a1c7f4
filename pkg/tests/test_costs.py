import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epicontain.bounds import Allocation, RateBounds
from epicontain.costs import (CostDomainWarning, CostModel, DegenerateBoundsError, cost_logspace,
                              cost_model_from_config, node_costs, normalize_costs,
                              r_plus_logspace, total_cost)

SCHOOL = RateBounds.uniform(44, 5e-4, 5e-3, 1e-4, 1e-3, 10.0)


def mp_normalization(lo, hi, lam):
    """Solve ``c1 + c2 lo^-lam = 1`` and ``c1 + c2 hi^-lam = 0`` at 40 digits."""
    mp.mp.dps = 40
    lam, lo, hi = mp.mpf(lam), mp.mpf(lo), mp.mpf(hi)
    c = mp.lu_solve(mp.matrix([[1, lo ** -lam], [1, hi ** -lam]]), mp.matrix([1, 0]))
    return float(c[0]), float(c[1])


def test_school_c2_and_identities():
    model = normalize_costs(SCHOOL, 1e-2)
    c1, c2 = mp_normalization("5e-4", "5e-3", "0.01")
    assert model.phi_terms[0][0][0] == pytest.approx(c2, rel=1e-13)
    assert c2 == pytest.approx(40.7159354601, abs=1e-9)
    assert model.phi_minus[0] == pytest.approx(-c1, rel=1e-13)
    phi, psi = node_costs(model, SCHOOL.full_protection())
    np.testing.assert_allclose(phi, 1.0, atol=1e-12)
    np.testing.assert_allclose(psi, 1.0, atol=1e-12)
    phi, psi = node_costs(model, SCHOOL.nominal())
    np.testing.assert_allclose(phi, 0.0, atol=1e-12)
    np.testing.assert_allclose(psi, 0.0, atol=1e-12)


def test_large_lambda_identities():
    model = normalize_costs(SCHOOL, 5.0)
    for alloc, want in ((SCHOOL.full_protection(), 1.0), (SCHOOL.nominal(), 0.0)):
        phi, psi = node_costs(model, alloc)
        np.testing.assert_allclose(phi, want, atol=1e-9)
        np.testing.assert_allclose(psi, want, atol=1e-9)


def test_degenerate_bounds():
    with pytest.raises(DegenerateBoundsError):
        normalize_costs(RateBounds.uniform(2, 1e-3, 1e-3, 1e-4, 1e-3, 10.0), 0.01)
    with pytest.raises(ValueError):
        normalize_costs(SCHOOL, 0.0)


def test_school_corner_costs():
    model = normalize_costs(SCHOOL, 1e-2)
    assert total_cost(model, SCHOOL.nominal()) == pytest.approx(0.0, abs=1e-10)
    assert total_cost(model, SCHOOL.full_protection()) == pytest.approx(88.0, abs=1e-10)


def test_single_node_low_beta_low_delta():
    b = RateBounds.uniform(1, 5e-4, 5e-3, 1e-4, 1e-3, 10.0)
    model = normalize_costs(b, 1e-2)
    assert total_cost(model, Allocation([5e-4], [1e-4])) == pytest.approx(1.0, abs=1e-12)


def test_out_of_box_warns():
    model = normalize_costs(SCHOOL, 1e-2)
    with pytest.warns(CostDomainWarning):
        total_cost(model, Allocation(np.full(44, 1e-2), np.full(44, 1e-4)))


def unit_model():
    return CostModel(phi_terms=(((1.0, -1.0),),), psi_terms=(((1.0, -1.0),),),
                     phi_minus=[0.0], psi_minus=[0.0], delta_hat=10.0, lam=1.0)


def test_r_plus_hand_value():
    val, g = r_plus_logspace(unit_model(), [0.0], [0.0])
    assert val == pytest.approx(math.log(2.0), rel=1e-15)
    np.testing.assert_allclose(g, [-0.5, -0.5], rtol=1e-15)


def random_model(rng, n):
    blo = rng.uniform(1e-4, 1e-3, n)
    dlo = rng.uniform(1e-4, 1e-3, n)
    b = RateBounds(blo, blo * rng.uniform(2, 20, n), dlo, dlo * rng.uniform(2, 20, n), 10.0)
    return b, normalize_costs(b, float(rng.uniform(1e-3, 2.0)))


def random_point(rng, bounds):
    b = np.log(rng.uniform(bounds.beta_lo, bounds.beta_hi))
    d = np.log(bounds.delta_hat - rng.uniform(bounds.delta_lo, bounds.delta_hi))
    return b, d


def mp_r_plus_gradient(model, x):
    """Central differences of ``log R_plus`` at 50 digits with a 1e-20 step."""
    mp.mp.dps = 50
    n = model.n

    def f(y):
        total = mp.mpf(0)
        for i in range(n):
            for c, a in model.phi_terms[i]:
                total += mp.mpf(c) * mp.exp(mp.mpf(a) * y[i])
            for c, a in model.psi_terms[i]:
                total += mp.mpf(c) * mp.exp(mp.mpf(a) * y[n + i])
        return mp.log(total)

    y = [mp.mpf(float(v)) for v in x]
    h = mp.mpf("1e-20")
    out = []
    for j in range(len(y)):
        up, dn = list(y), list(y)
        up[j] += h
        dn[j] -= h
        out.append(float((f(up) - f(dn)) / (2 * h)))
    return np.array(out)


def test_r_plus_gradient_vs_finite_differences(rng):
    for _ in range(20):
        bounds, model = random_model(rng, int(rng.integers(1, 6)))
        b, d = random_point(rng, bounds)
        _, g = r_plus_logspace(model, b, d)
        np.testing.assert_allclose(g, mp_r_plus_gradient(model, np.concatenate([b, d])), rtol=1e-8)


def test_cost_logspace_agrees_with_total_cost(rng):
    for _ in range(10):
        bounds, model = random_model(rng, 4)
        b, d = random_point(rng, bounds)
        alloc = Allocation(np.exp(b), bounds.delta_hat - np.exp(d))
        R, g = cost_logspace(model, b, d)
        assert R == pytest.approx(total_cost(model, alloc), rel=1e-9, abs=1e-9)
        # the posynomial part is R + R_minus
        assert math.log(R + model.r_minus) == pytest.approx(r_plus_logspace(model, b, d)[0], rel=1e-12)
        # moving the base point only changes rounding
        R_off, _ = cost_logspace(model, b - 0.1, d + 0.05, offsets=(np.full(4, 0.1), np.full(4, -0.05)))
        assert R_off == pytest.approx(R, rel=1e-10, abs=1e-10)
        fd = np.empty(8)
        x = np.concatenate([b, d])
        for j in range(8):
            up, dn = x.copy(), x.copy()
            up[j] += 1e-6
            dn[j] -= 1e-6
            fd[j] = (cost_logspace(model, up[:4], up[4:])[0] - cost_logspace(model, dn[:4], dn[4:])[0]) / 2e-6
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)


def test_custom_cost_config():
    b = RateBounds.uniform(1, 1e-3, 1e-2, 1e-4, 1e-3, 10.0)
    cfg = {"custom": {"phi_terms": [[[2.0, -1.0]]], "psi_terms": [[[1.0, -1.0], [0.5, -2.0]]],
                      "phi_minus": [1.0], "psi_minus": [0.0]}}
    model = cost_model_from_config(cfg, b)
    a = Allocation([2e-3], [5e-4])
    dt = 10.0 - 5e-4
    want = (2.0 / 2e-3 - 1.0) + (1.0 / dt + 0.5 / dt ** 2)
    assert total_cost(model, a) == pytest.approx(want, rel=1e-12)
    assert cost_model_from_config({"lambda": 0.5}, b).lam == 0.5


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_r_plus_midpoint_convexity(seed):
    rng = np.random.default_rng(seed)
    bounds, model = random_model(rng, int(rng.integers(1, 5)))
    p = np.concatenate(random_point(rng, bounds))
    q = np.concatenate(random_point(rng, bounds))
    n = bounds.n
    f = lambda x: r_plus_logspace(model, x[:n], x[n:])[0]
    assert f(0.5 * (p + q)) <= 0.5 * (f(p) + f(q)) + 1e-10


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cost_is_bounded_and_monotone_in_box(seed):
    rng = np.random.default_rng(seed)
    bounds, model = random_model(rng, 3)
    beta = rng.uniform(bounds.beta_lo, bounds.beta_hi)
    delta = rng.uniform(bounds.delta_lo, bounds.delta_hi)
    phi, psi = node_costs(model, Allocation(beta, delta))
    assert np.all((phi >= -1e-12) & (phi <= 1 + 1e-12))
    assert np.all((psi >= -1e-12) & (psi <= 1 + 1e-12))
    phi2, psi2 = node_costs(model, Allocation(0.5 * (beta + bounds.beta_lo), 0.5 * (delta + bounds.delta_hi)))
    assert np.all(phi2 >= phi - 1e-12) and np.all(psi2 >= psi - 1e-12)
