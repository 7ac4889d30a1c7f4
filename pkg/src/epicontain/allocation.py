"""Certified resource allocation in log coordinates.

Rates are searched through ``b = log(beta)`` and ``d = log(delta_hat - delta)``.
In these coordinates the log of the bounded objective and the cost are both
convex, so the budget-constrained, performance-constrained and feasibility
problems are convex programs over a box.  The solver works in the box
rescaled to ``[0, 1]^(2n)``, which is a diagonal preconditioning of the log
coordinates.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .bounds import Allocation, BoundTrajectory, RateBounds, propagate_bound, propagate_with_sensitivity
from .contacts import TemporalNetwork, WeightedStaticGraph
from .costs import CostModel, anchored_costs, cost_logspace, node_costs, r_plus_logspace, total_cost
from .objectives import ObjectiveSpec, evaluate, sample_times, value_and_sample_gradient
from .optim import SolverOptions, augmented_lagrangian, pg_norm, restore_feasibility

log = logging.getLogger(__name__)

__all__ = [
    "LogBox",
    "SolveReport",
    "SolverOptions",
    "InfeasibleBudgetError",
    "LogObjective",
    "solve_feasibility",
    "solve_budget_constrained",
    "solve_performance_constrained",
    "solve_static_baseline",
    "verify_allocation",
    "static_decay_rate",
    "investment_rows",
]

FEASIBLE, INFEASIBLE, MAX_ITER = "feasible", "infeasible", "max_iter"


class InfeasibleBudgetError(ValueError):
    """``R_bar + R_minus <= 0``: the budget constraint has no log form."""


@dataclass(frozen=True)
class LogBox:
    """The box of log coordinates and its affine map onto ``[0, 1]^(2n)``.

    Rates are recovered from unit-box points relative to the corner
    ``(beta_lo, delta_hi)``: ``delta = delta_hi - (delta_hat - delta_hi) expm1(w z)``
    keeps full relative precision even though ``delta`` is tiny next to
    ``delta_hat``.
    """

    lo: np.ndarray
    hi: np.ndarray
    delta_hat: float
    beta_lo: np.ndarray
    delta_hi: np.ndarray
    w: np.ndarray

    @classmethod
    def from_bounds(cls, bounds: RateBounds) -> "LogBox":
        dh = bounds.delta_hat
        lo = np.concatenate([np.log(bounds.beta_lo), np.log(dh - bounds.delta_hi)])
        hi = np.concatenate([np.log(bounds.beta_hi), np.log(dh - bounds.delta_lo)])
        # widths from ratios: hi - lo would lose most digits of the tiny delta range
        w = np.concatenate([np.log(bounds.beta_hi / bounds.beta_lo),
                            np.log1p((bounds.delta_hi - bounds.delta_lo) / (dh - bounds.delta_hi))])
        return cls(lo, hi, dh, np.asarray(bounds.beta_lo, float), np.asarray(bounds.delta_hi, float), w)

    @property
    def n(self) -> int:
        return self.lo.size // 2

    @property
    def width(self) -> np.ndarray:
        return self.w

    def to_x(self, z):
        return self.lo + self.width * z

    def to_z(self, x):
        w = self.width
        return np.divide(x - self.lo, w, out=np.zeros_like(self.lo), where=w > 0)

    def rates(self, x) -> Allocation:
        """Solution map ``beta = exp(b)``, ``delta = delta_hat - exp(d)``."""
        n = self.n
        return Allocation(np.exp(x[:n]), self.delta_hat - np.exp(x[n:]))

    def rates_z(self, z) -> tuple[Allocation, np.ndarray]:
        """Rates at a unit-box point, and ``delta_hat - delta`` for the chain rule."""
        n, w = self.n, self.width
        u = w * z
        beta = self.beta_lo * np.exp(u[:n])
        room = self.delta_hat - self.delta_hi
        delta = self.delta_hi - room * np.expm1(u[n:])
        return Allocation(beta, delta), room * np.exp(u[n:])

    def cost(self, cost: CostModel, z) -> tuple[float, np.ndarray]:
        """Total cost and its gradient with respect to ``z``."""
        n, w = self.n, self.width
        u = w * z
        if cost.phi_ref is None or cost.psi_ref is None:
            R, g = cost_logspace(cost, self.lo[:n], self.lo[n:], offsets=(u[:n], u[n:]))
            return R, g * w
        # log ratios to the cost references; exactly -w (1 - z) when the
        # references sit at the zero-cost corner, as for normalized costs
        b_hi = self.beta_lo * np.exp(w[:n])
        ref_b, ref_d = cost.phi_ref, cost.psi_ref
        at_b = np.isclose(ref_b, b_hi, rtol=1e-13, atol=0)
        lb = np.where(at_b, -w[:n] * (1 - z[:n]), np.log(self.beta_lo / ref_b) + u[:n])
        d_lo = self.delta_hi - (self.delta_hat - self.delta_hi) * np.expm1(w[n:])
        at_d = np.isclose(ref_d, d_lo, rtol=1e-13, atol=0)
        off = np.log1p((ref_d - self.delta_hi) / (self.delta_hat - ref_d))
        ld = np.where(at_d, -w[n:] * (1 - z[n:]), off + u[n:])
        phi, psi, dphi, dpsi = anchored_costs(cost, lb, ld)
        return float(phi.sum() + psi.sum()), np.concatenate([dphi, dpsi]) * w

    def logspace(self, alloc: Allocation) -> np.ndarray:
        return np.concatenate([np.log(alloc.beta), np.log(self.delta_hat - alloc.delta)])

    @property
    def nominal_z(self) -> np.ndarray:
        """``(beta_hi, delta_lo)``: the zero-cost corner."""
        return np.ones(2 * self.n)

    @property
    def protected_z(self) -> np.ndarray:
        """``(beta_lo, delta_hi)``: the full-protection corner."""
        return np.zeros(2 * self.n)


@dataclass
class SolveReport:
    allocation: Allocation
    logspace_point: tuple[np.ndarray, np.ndarray]
    guaranteed_J: float | None
    cost_used: float
    status: str
    stationarity: float
    constraint_residuals: dict
    iterations: int
    mode: str = ""
    objective_value: float | None = None
    multiplier: float | None = None
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "status": self.status,
            "guaranteed_J": self.guaranteed_J,
            "cost_used": self.cost_used,
            "objective_value": self.objective_value,
            "stationarity": self.stationarity,
            "constraint_residuals": self.constraint_residuals,
            "iterations": self.iterations,
            "multiplier": self.multiplier,
            "message": self.message,
            "beta": self.allocation.beta.tolist(),
            "delta": self.allocation.delta.tolist(),
            "b": self.logspace_point[0].tolist(),
            "d_tilde": self.logspace_point[1].tolist(),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


class LogObjective:
    """``f = log J(pbar(beta, delta))`` as a function of unit-box points."""

    def __init__(self, net: TemporalNetwork, p0, objective: ObjectiveSpec, box: LogBox,
                 tol: float = 1e-13):
        self.net = net
        self.p0 = np.asarray(p0, dtype=float)
        self.objective = objective
        self.box = box
        self.times = sample_times(objective)
        self.tol = tol
        self.evaluations = 0

    def J(self, alloc: Allocation) -> float:
        traj = propagate_bound(self.net, alloc, self.p0, self.times, self.tol)
        return evaluate(self.objective, traj)

    def value(self, z) -> float:
        self.evaluations += 1
        F = self.J(self.box.rates_z(z)[0])
        return math.log(F) if F > 0 else -math.inf

    def value_grad(self, z):
        self.evaluations += 1
        alloc, room = self.box.rates_z(z)
        traj, sens = propagate_with_sensitivity(self.net, alloc, self.p0, self.times, self.tol)
        F, G = value_and_sample_gradient(self.objective, traj)
        if F <= 0:
            return -math.inf, np.zeros_like(z)
        dF = np.einsum("ki,kij->j", G, sens.d)
        n = self.box.n
        g = np.empty_like(z, dtype=float)
        g[:n] = dF[:n] * alloc.beta / F
        g[n:] = -dF[n:] * room / F
        return math.log(F), g * self.box.width


def _validate_sizes(net, p0, cost: CostModel, bounds: RateBounds):
    n = net.n
    if bounds.n != n or cost.n != n or np.asarray(p0).shape != (n,):
        raise ValueError(f"network has {n} nodes; bounds/cost/p0 sizes disagree")
    if not math.isclose(cost.delta_hat, bounds.delta_hat):
        raise ValueError("cost model and bounds use different delta_hat")


def _residuals(cost, box, z, R_bar=None, f=None, J_bar=None) -> dict:
    out = {}
    if R_bar is not None:
        x = box.to_x(z)
        R, _ = box.cost(cost, z)
        rp, _ = r_plus_logspace(cost, x[:box.n], x[box.n:])
        out["budget"] = R - R_bar
        out["budget_log"] = rp - math.log(R_bar + cost.r_minus)
    if J_bar is not None:
        out["performance_log"] = f - math.log(J_bar)
    return out


def _finish(mode, cost, box, z, status, stat, iters, residuals, fobj: LogObjective | None,
            objective_value=None, multiplier=None, message="") -> SolveReport:
    alloc, _ = box.rates_z(z)
    x = box.to_x(z)
    n = box.n
    J = fobj.J(alloc) if fobj is not None else None
    R, _ = box.cost(cost, z)
    return SolveReport(alloc, (x[:n].copy(), x[n:].copy()), J, float(R), status, float(stat),
                       residuals, int(iters), mode, objective_value, multiplier, message)


def _log_unit_stationarity(box, grad_z, z):
    """Projected-gradient norm measured in the original log coordinates."""
    w = np.where(box.width > 0, box.width, 1.0)
    x = box.to_x(z)
    step = np.clip(x - grad_z / w, box.lo, box.hi) - x
    return float(np.abs(step).max())


def _start_point(box, z0):
    if z0 is None:
        return np.full(2 * box.n, 0.5)
    return np.clip(np.asarray(z0, dtype=float), 0.0, 1.0)


def _report_from(res, z, mode, cost, box, fobj, obj, cons, R_bar=None, J_bar=None):
    f, g = obj(z)
    _, Jc = cons(z)
    mu = res.multipliers
    gl = g + Jc.T @ mu
    stat = pg_norm(z, gl, np.zeros_like(z), np.ones_like(z))
    fval = fobj.value(z) if J_bar is not None else None
    residuals = _residuals(cost, box, z, R_bar=R_bar, f=fval, J_bar=J_bar)
    residuals["stationarity_log_units"] = _log_unit_stationarity(box, gl, z)
    status = FEASIBLE if (res.converged or res.stopped_early) else MAX_ITER
    return _finish(mode, cost, box, z, status, stat, res.iterations, residuals, fobj, f,
                   float(mu[0]) if mu.size else None,
                   "" if status == FEASIBLE else "iteration limit reached; best iterate returned")


def solve_budget_constrained(net, p0, objective, cost: CostModel, bounds: RateBounds,
                             R_bar: float, opts: SolverOptions | None = None,
                             z0=None) -> SolveReport:
    """Minimize the certified objective bound subject to ``R(beta, delta) <= R_bar``.

    The budget is imposed in its cost-unit form ``R <= R_bar``, whose feasible
    set is the same as ``r_plus <= log(R_bar + R_minus)`` and which is better
    scaled for the solver.  ``z0`` is an optional start in the unit box.
    """
    opts = opts or SolverOptions()
    _validate_sizes(net, p0, cost, bounds)
    if R_bar + cost.r_minus <= 0:
        raise InfeasibleBudgetError("R_bar + R_minus must be positive")
    box = LogBox.from_bounds(bounds)
    fobj = LogObjective(net, p0, objective, box, opts.propagation_tol)
    n = box.n
    mode = "budget"

    def cons(z):
        R, g = box.cost(cost, z)
        return np.array([R - R_bar]), g[None, :]

    def cons_v(z):
        return np.array([box.cost(cost, z)[0] - R_bar])

    def corner(z, status, msg):
        f = fobj.value(z)
        return _finish(mode, cost, box, z, status, 0.0, 0,
                       _residuals(cost, box, z, R_bar=R_bar), fobj, f, 0.0, msg)

    if R_bar < 0:
        return corner(box.nominal_z, INFEASIBLE, "negative budget")
    if cons_v(box.protected_z)[0] <= 0:
        return corner(box.protected_z, FEASIBLE, "budget covers full protection")
    if R_bar == 0:
        return corner(box.nominal_z, FEASIBLE, "zero-cost corner is the only feasible point")
    if fobj.value(box.nominal_z) == -math.inf:
        return corner(box.nominal_z, FEASIBLE, "objective vanishes without intervention")

    res = augmented_lagrangian(fobj.value_grad, cons, _start_point(box, z0), np.zeros(2 * n),
                               np.ones(2 * n), opts, fobj.value, cons_v)
    z, _ = restore_feasibility(res.z, box.nominal_z, cons_v)
    return _report_from(res, z, mode, cost, box, fobj, fobj.value_grad, cons, R_bar=R_bar)


def solve_performance_constrained(net, p0, objective, cost: CostModel, bounds: RateBounds,
                                  J_bar: float, opts: SolverOptions | None = None,
                                  z0=None) -> SolveReport:
    """Minimize the cost subject to the certified bound ``J <= J_bar``."""
    opts = opts or SolverOptions()
    _validate_sizes(net, p0, cost, bounds)
    if not J_bar > 0:
        raise ValueError("J_bar must be positive")
    box = LogBox.from_bounds(bounds)
    fobj = LogObjective(net, p0, objective, box, opts.propagation_tol)
    n = box.n
    logJ = math.log(J_bar)
    mode = "performance"

    def obj_v(z):
        return box.cost(cost, z)[0]

    def cons(z):
        f, g = fobj.value_grad(z)
        return np.array([f - logJ]), g[None, :]

    def cons_v(z):
        return np.array([fobj.value(z) - logJ])

    def corner(z, f, status, mu, msg):
        return _finish(mode, cost, box, z, status, 0.0 if status == FEASIBLE else math.nan, 0,
                       _residuals(cost, box, z, f=f, J_bar=J_bar), fobj, obj_v(z), mu, msg)

    f_nom = fobj.value(box.nominal_z)
    if f_nom <= logJ:
        return corner(box.nominal_z, f_nom, FEASIBLE, 0.0, "performance target met without intervention")
    f_full = fobj.value(box.protected_z)
    if f_full > logJ:
        return corner(box.protected_z, f_full, INFEASIBLE, None, "full protection cannot reach J_bar")

    res = augmented_lagrangian(lambda z: box.cost(cost, z), cons, _start_point(box, z0),
                               np.zeros(2 * n), np.ones(2 * n), opts, obj_v, cons_v)
    z = res.z
    if f_full < logJ:
        z, _ = restore_feasibility(z, box.protected_z, cons_v)
    return _report_from(res, z, mode, cost, box, fobj, lambda z: box.cost(cost, z), cons,
                        J_bar=J_bar)


def solve_feasibility(net, p0, objective, cost: CostModel, bounds: RateBounds, J_bar: float,
                      R_bar: float, opts: SolverOptions | None = None) -> SolveReport:
    """Find rates with certified ``J <= J_bar`` and ``R <= R_bar`` inside the box.

    The budget-constrained program is run and stopped as soon as a point meets
    both constraints.  If it converges without one, its optimum exceeds
    ``log J_bar`` and by convexity no feasible point exists.
    """
    opts = opts or SolverOptions()
    _validate_sizes(net, p0, cost, bounds)
    if not J_bar > 0:
        raise ValueError("J_bar must be positive")
    if R_bar + cost.r_minus <= 0:
        raise InfeasibleBudgetError("R_bar + R_minus must be positive")
    box = LogBox.from_bounds(bounds)
    fobj = LogObjective(net, p0, objective, box, opts.propagation_tol)
    logJ = math.log(J_bar)

    def ok(z):
        return box.cost(cost, z)[0] <= R_bar and fobj.value(z) <= logJ

    run = replace(opts, early_exit=ok)
    rep = solve_budget_constrained(net, p0, objective, cost, bounds, R_bar, run)
    z = box.to_z(np.concatenate(rep.logspace_point))
    f = math.log(rep.guaranteed_J) if rep.guaranteed_J and rep.guaranteed_J > 0 else -math.inf
    rep.mode = "feasibility"
    rep.constraint_residuals.update(_residuals(cost, box, z, f=f, J_bar=J_bar))
    if rep.status == INFEASIBLE:
        return rep
    if f <= logJ + opts.tol_residual and rep.cost_used <= R_bar + opts.tol_residual:
        rep.status = FEASIBLE
        rep.message = "certificate found"
    elif rep.status == FEASIBLE:
        rep.status = INFEASIBLE
        rep.message = "minimum certified bound under the budget exceeds J_bar"
    return rep


# -- time-aggregated static baseline ----------------------------------------

def static_decay_rate(weights, alloc: Allocation) -> float:
    """Largest real eigenvalue of ``diag(beta) W - diag(delta)``."""
    W = np.asarray(weights, dtype=float)
    sb = np.sqrt(alloc.beta)
    S = sb[:, None] * W * sb[None, :] - np.diag(alloc.delta)
    return float(np.linalg.eigvalsh(S)[-1])


def _components(W):
    from scipy.sparse.csgraph import connected_components

    k, labels = connected_components(W > 0, directed=False)
    return [np.flatnonzero(labels == c) for c in range(k)]


def solve_static_baseline(agg: WeightedStaticGraph, cost: CostModel, bounds: RateBounds,
                          R_bar: float, opts: SolverOptions | None = None) -> SolveReport:
    """Budget-constrained minimization of the decay rate on an aggregated graph.

    The decay rate is the dominant eigenvalue of ``diag(beta) W - diag(delta)``.
    Since ``diag(beta) W + diag(delta_hat - delta)`` is nonnegative with
    log-convex entries in ``(b, d)``, its Perron root is log-convex, and the
    decay rate (Perron root minus ``delta_hat``) is convex in ``(b, d)``.  This
    is the same program as the Perron-Frobenius geometric program with the
    auxiliary eigenvector eliminated.  For a disconnected graph the rate is the
    maximum over components, handled with an epigraph variable.

    The returned report has ``guaranteed_J=None``; evaluate the allocation on
    the temporal bound with :func:`verify_allocation`.
    """
    opts = opts or SolverOptions()
    W = np.asarray(agg.weights, dtype=float)
    n = agg.n
    if bounds.n != n or cost.n != n:
        raise ValueError("graph, bounds and cost sizes disagree")
    if R_bar + cost.r_minus <= 0:
        raise InfeasibleBudgetError("R_bar + R_minus must be positive")
    box = LogBox.from_bounds(bounds)
    w = box.width
    comps = _components(W)
    # decay rates are ~1e-3; rescale so the solver tolerance is meaningful
    scale = 1.0 / float(max(bounds.beta_hi.max() * max(np.abs(W).sum(axis=1).max(), 1.0),
                            bounds.delta_hi.max()))
    mode = "static-baseline"

    def comp_rate(z, idx, grad):
        alloc, room = box.rates_z(z[:2 * n])
        sb = np.sqrt(alloc.beta[idx])
        Wc = W[np.ix_(idx, idx)]
        S = sb[:, None] * Wc * sb[None, :] - np.diag(alloc.delta[idx])
        vals, vecs = np.linalg.eigh(S)
        lam = vals[-1]
        if not grad:
            return lam, None
        y = vecs[:, -1]
        gz = np.zeros(2 * n)
        # d lam / d b_i = y_i sqrt(beta_i) (W B^1/2 y)_i ; d lam / d d_i = y_i^2 (delta_hat - delta_i)
        gz[idx] = y * sb * (Wc @ (sb * y))
        gz[n + idx] = y * y * room[idx]
        return lam, gz * w

    def rate(z):
        return max(comp_rate(z, idx, False)[0] for idx in comps)

    def budget(z):
        R, g = box.cost(cost, z[:2 * n])
        return R - R_bar, g

    if len(comps) == 1:
        dim = 2 * n
        lo, hi = np.zeros(dim), np.ones(dim)

        def obj(z):
            lam, gz = comp_rate(z, comps[0], True)
            return lam * scale, gz * scale

        def obj_v(z):
            return comp_rate(z, comps[0], False)[0] * scale

        def cons(z):
            c, g = budget(z)
            return np.array([c]), g[None, :]

        def cons_v(z):
            return np.array([budget(z)[0]])

        z_feas = box.nominal_z
        z0 = np.full(dim, 0.5)
    else:
        # epigraph: minimize s subject to rate_c(z) * scale <= s for every component
        dim = 2 * n + 1
        lo = np.concatenate([np.zeros(2 * n), [-np.inf]])
        hi = np.concatenate([np.ones(2 * n), [np.inf]])

        def obj(z):
            g = np.zeros(dim)
            g[-1] = 1.0
            return z[-1], g

        def obj_v(z):
            return z[-1]

        def cons(z):
            vals, rows = [], []
            for idx in comps:
                lam, gz = comp_rate(z, idx, True)
                vals.append(lam * scale - z[-1])
                rows.append(np.concatenate([gz * scale, [-1.0]]))
            c, g = budget(z)
            vals.append(c)
            rows.append(np.concatenate([g, [0.0]]))
            return np.array(vals), np.array(rows)

        def cons_v(z):
            vals = [comp_rate(z, idx, False)[0] * scale - z[-1] for idx in comps]
            vals.append(budget(z)[0])
            return np.array(vals)

        z_feas = np.concatenate([box.nominal_z, [rate(box.nominal_z) * scale + 1.0]])
        z_mid = np.full(2 * n, 0.5)
        z0 = np.concatenate([z_mid, [rate(z_mid) * scale]])

    def corner(z, status, msg, mu):
        return _finish(mode, cost, box, z, status, 0.0, 0, _residuals(cost, box, z, R_bar=R_bar),
                       None, rate(z), mu, msg)

    if budget(box.protected_z)[0] <= 0:
        return corner(box.protected_z, FEASIBLE, "budget covers full protection", 0.0)
    if R_bar <= 0:
        return corner(box.nominal_z, FEASIBLE if R_bar == 0 else INFEASIBLE,
                      "zero-cost corner is the only feasible point", None)

    res = augmented_lagrangian(obj, cons, z0, lo, hi, opts, obj_v, cons_v)
    z, _ = restore_feasibility(res.z, z_feas, cons_v)
    _, g = obj(z)
    _, Jc = cons(z)
    gl = g + Jc.T @ res.multipliers
    stat = pg_norm(z, gl, lo, hi)
    zr = z[:2 * n]
    residuals = _residuals(cost, box, zr, R_bar=R_bar)
    residuals["stationarity_log_units"] = _log_unit_stationarity(box, gl[:2 * n], zr)
    status = FEASIBLE if res.converged else MAX_ITER
    return _finish(mode, cost, box, zr, status, stat, res.iterations, residuals, None, rate(zr),
                   float(res.multipliers[-1]),
                   "" if status == FEASIBLE else "iteration limit reached; best iterate returned")


def verify_allocation(net, p0, objective, cost: CostModel, alloc: Allocation,
                      bounds: RateBounds | None = None) -> tuple[float, float, bool]:
    """Recompute ``(certified J bound, total cost, in_box)`` for any allocation."""
    traj = propagate_bound(net, alloc, p0, sample_times(objective))
    J = evaluate(objective, traj)
    bounds = bounds or cost.bounds
    in_box = bool(bounds.contains(alloc)) if bounds is not None else True
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        R = total_cost(cost, alloc)
    return J, R, in_box


def investment_rows(cost: CostModel, alloc: Allocation, labels: Sequence[str]):
    """Rows ``(node, label, beta, delta, phi_cost, psi_cost)`` per node."""
    phi, psi = node_costs(cost, alloc)
    for i in range(alloc.n):
        yield i, labels[i], float(alloc.beta[i]), float(alloc.delta[i]), float(phi[i]), float(psi[i])
