"""Box-constrained smooth convex minimization with a few convex inequalities.

Inner solver: spectral projected gradient (Barzilai-Borwein steps with a
nonmonotone Armijo search) or SciPy's L-BFGS-B.  Inequalities ``c(z) <= 0``
are handled by an augmented Lagrangian outer loop.  Near the solution the
achievable decrease of the objective falls below its evaluation noise, so
the last digits of stationarity come from a few Newton steps on the KKT
system that are accepted on a residual merit instead of on the objective.
A final restoration step slides the point toward a known strictly feasible
point until every constraint holds exactly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

__all__ = ["SolverOptions", "OptResult", "spg", "lbfgsb", "augmented_lagrangian", "kkt_polish",
           "restore_feasibility", "pg_norm"]


@dataclass
class SolverOptions:
    tol_stationarity: float = 1e-7
    tol_residual: float = 1e-9
    max_iter: int = 10_000
    memory: int = 10
    armijo: float = 1e-4
    rho0: float = 10.0
    rho_growth: float = 10.0
    rho_max: float = 1e10
    max_outer: int = 60
    polish_steps: int = 6
    step_min: float = 1e-12
    step_max: float = 1e12
    inner: str = "lbfgsb"
    propagation_tol: float = 1e-13
    early_exit: Callable[[np.ndarray], bool] | None = field(default=None, repr=False)


@dataclass
class OptResult:
    z: np.ndarray
    value: float
    multipliers: np.ndarray
    constraints: np.ndarray
    stationarity: float
    iterations: int
    converged: bool
    stopped_early: bool = False


def _proj(z, lo, hi):
    return np.minimum(np.maximum(z, lo), hi)


def pg_norm(z, g, lo, hi) -> float:
    """Infinity norm of the projected-gradient step ``P(z - g) - z``."""
    return float(np.abs(_proj(z - g, lo, hi) - z).max()) if z.size else 0.0


def spg(fun, z0, lo, hi, tol, max_iter, opts: SolverOptions, value_only=None):
    """Minimize ``fun`` over the box ``[lo, hi]``.

    ``fun(z)`` returns ``(value, gradient)``; ``value_only(z)`` (optional)
    returns just the value and is used inside the line search.
    Returns ``(z, value, gradient, pg_norm, iterations)``.
    """
    vfun = value_only or (lambda z: fun(z)[0])
    z = _proj(np.asarray(z0, dtype=float), lo, hi)
    f, g = fun(z)
    recent = [f]
    pgn = pg_norm(z, g, lo, hi)
    alpha = 1.0 / max(pgn, 1e-12)
    it = 0
    while pgn > tol and it < max_iter:
        it += 1
        d = _proj(z - alpha * g, lo, hi) - z
        gd = float(g @ d)
        if gd >= 0:
            # numerical floor reached; the direction no longer descends
            break
        fmax = max(recent)
        lam = 1.0
        while True:
            z_new = z + lam * d
            f_new = vfun(z_new)
            if f_new <= fmax + opts.armijo * lam * gd:
                break
            # safeguarded quadratic interpolation
            denom = 2.0 * (f_new - f - lam * gd)
            lam_q = -gd * lam * lam / denom if denom > 0 else 0.5 * lam
            lam = min(max(lam_q, 0.1 * lam), 0.5 * lam)
            if lam < 1e-16:
                break
        if lam < 1e-16:
            break
        f_new, g_new = fun(z_new)
        s = z_new - z
        y = g_new - g
        sy = float(s @ y)
        alpha = float(s @ s) / sy if sy > 0 else opts.step_max
        alpha = min(max(alpha, opts.step_min), opts.step_max)
        z, f, g = z_new, f_new, g_new
        recent.append(f)
        if len(recent) > opts.memory:
            recent.pop(0)
        pgn = pg_norm(z, g, lo, hi)
        if opts.early_exit is not None and opts.early_exit(z):
            break
    return z, f, g, pgn, it


def lbfgsb(fun, z0, lo, hi, tol, max_iter, opts: SolverOptions, value_only=None):
    """Same contract as :func:`spg`, using SciPy's L-BFGS-B."""
    from scipy.optimize import minimize

    bounds = list(zip(np.where(np.isfinite(lo), lo, None), np.where(np.isfinite(hi), hi, None)))
    res = minimize(fun, _proj(np.asarray(z0, dtype=float), lo, hi), jac=True, method="L-BFGS-B",
                   bounds=bounds,
                   options={"maxiter": max(int(max_iter), 1), "gtol": tol, "ftol": 0.0,
                            "maxcor": 30, "maxls": 40})
    z = _proj(res.x, lo, hi)
    f, g = fun(z)
    return z, f, g, pg_norm(z, g, lo, hi), int(res.nit)


def augmented_lagrangian(obj, cons, z0, lo, hi, opts: SolverOptions,
                         obj_value=None, cons_value=None) -> OptResult:
    """Minimize ``obj`` subject to ``cons(z) <= 0`` and ``lo <= z <= hi``.

    ``obj(z) -> (value, grad)``; ``cons(z) -> (values (m,), jacobian (m, d))``.
    The optional ``*_value`` callables skip derivative work in line searches.
    """
    ov = obj_value or (lambda z: obj(z)[0])
    cv = cons_value or (lambda z: cons(z)[0])
    z = _proj(np.asarray(z0, dtype=float), lo, hi)
    m = len(cv(z))
    mu = np.zeros(m)
    rho = opts.rho0
    total_it = 0
    inner_tol = max(opts.tol_stationarity, 1e-2)
    prev_viol = np.inf
    converged = False
    early = False

    stalls = 0
    for outer in range(opts.max_outer):
        def L(zz, mu=mu, rho=rho):
            f, gf = obj(zz)
            c, J = cons(zz)
            shifted = np.maximum(0.0, mu + rho * c)
            val = f + (shifted @ shifted - mu @ mu) / (2 * rho)
            return val, gf + J.T @ shifted

        def Lv(zz, mu=mu, rho=rho):
            shifted = np.maximum(0.0, mu + rho * cv(zz))
            return ov(zz) + (shifted @ shifted - mu @ mu) / (2 * rho)

        inner = lbfgsb if opts.inner == "lbfgsb" else spg
        z, _, _, pgn, it = inner(L, z, lo, hi, inner_tol, opts.max_iter - total_it, opts, Lv)
        total_it += it
        c = cv(z)
        mu = np.maximum(0.0, mu + rho * c)
        viol = float(np.abs(np.maximum(c, -mu / rho)).max()) if m else 0.0
        log.debug("outer %d: pg=%.2e viol=%.2e rho=%.1e mu=%s it=%d", outer, pgn, viol, rho, mu, total_it)
        if opts.early_exit is not None and opts.early_exit(z):
            early = True
            break
        if pgn <= opts.tol_stationarity and viol <= opts.tol_residual:
            converged = True
            break
        if total_it >= opts.max_iter:
            break
        # the inner solver stops moving once decreases drop below the noise floor
        stalls = stalls + 1 if it <= 2 and pgn > inner_tol else 0
        if stalls >= 2:
            break
        if viol > opts.tol_residual and viol > 0.25 * prev_viol and rho < opts.rho_max:
            rho *= opts.rho_growth
        prev_viol = viol
        inner_tol = max(opts.tol_stationarity, min(0.1 * inner_tol, max(viol, pgn)))

    if not (converged or early) and opts.polish_steps > 0 and total_it < opts.max_iter:
        z, mu, converged, used = kkt_polish(obj, cons, z, mu, lo, hi, opts)
        total_it += used

    f, gf = obj(z)
    c, J = cons(z)
    stat = pg_norm(z, gf + J.T @ mu, lo, hi)
    return OptResult(z, f, mu, c, stat, total_it, converged, early)


def kkt_polish(obj, cons, z, mu, lo, hi, opts: SolverOptions):
    """Newton steps on the KKT conditions of the free variables and active constraints.

    The Hessian of the Lagrangian is formed by forward differences of its
    gradient.  A step is kept when it reduces
    ``max(pg / tol_stationarity, violation / tol_residual)``.
    Returns ``(z, mu, converged, evaluations)``.
    """
    z = np.asarray(z, dtype=float).copy()
    mu = np.asarray(mu, dtype=float).copy()
    evals = 0

    def state(zz, mm):
        f, g = obj(zz)
        c, J = cons(zz)
        gl = g + J.T @ mm
        viol = float(np.abs(np.maximum(c, -mm)).max()) if c.size else 0.0
        merit = max(pg_norm(zz, gl, lo, hi) / opts.tol_stationarity, viol / opts.tol_residual)
        return gl, c, J, merit

    gl, c, J, merit = state(z, mu)
    for _ in range(opts.polish_steps):
        if merit <= 1.0:
            return z, mu, True, evals
        pinned = ((z <= lo) & (gl > 0)) | ((z >= hi) & (gl < 0))
        free = np.flatnonzero(~pinned)
        act = np.flatnonzero((mu > 0) | (c > -opts.tol_residual))
        H = np.empty((free.size, free.size))
        for k, j in enumerate(free):
            h = 1e-6 * max(1.0, abs(z[j]))
            if z[j] + h > hi[j]:
                h = -h
            zz = z.copy()
            zz[j] += h
            f2, g2 = obj(zz)
            _, J2 = cons(zz)
            H[:, k] = ((g2 + J2.T @ mu)[free] - gl[free]) / h
        evals += free.size
        H = 0.5 * (H + H.T)
        A = J[np.ix_(act, free)]
        K = np.block([[H, A.T], [A, np.zeros((act.size, act.size))]])
        rhs = -np.concatenate([gl[free], c[act]])
        sol = np.linalg.lstsq(K, rhs, rcond=1e-12)[0]
        dz = np.zeros_like(z)
        dz[free] = sol[:free.size]
        dmu = np.zeros_like(mu)
        dmu[act] = sol[free.size:]
        t, accepted = 1.0, False
        for _ in range(12):
            z_new = _proj(z + t * dz, lo, hi)
            mu_new = np.maximum(0.0, mu + t * dmu)
            out = state(z_new, mu_new)
            evals += 1
            if out[3] < merit:
                z, mu = z_new, mu_new
                gl, c, J, merit = out
                accepted = True
                break
            t *= 0.5
        log.debug("polish: merit=%.3g accepted=%s free=%d", merit, accepted, free.size)
        if not accepted:
            break
    return z, mu, merit <= 1.0, evals


def restore_feasibility(z, z_feasible, cons_value, tol: float = 0.0, iters: int = 200):
    """Move ``z`` along the segment to ``z_feasible`` until ``max(cons) <= tol``.

    Each constraint is convex, so along the segment the feasible parameters
    form an interval containing 1; the smallest feasible parameter is found by
    bisection.  Returns ``(z_restored, t)``.
    """
    point = lambda t: (1.0 - t) * z + t * z_feasible
    if np.max(cons_value(z)) <= tol:
        return z, 0.0
    if np.max(cons_value(z_feasible)) > tol:
        raise ValueError("reference point is not feasible")
    lo_t, hi_t = 0.0, 1.0
    # start near 0: after a converged solve the violation is tiny
    t = 1e-12
    while t < 1.0:
        if np.max(cons_value(point(t))) <= tol:
            hi_t = t
            break
        lo_t = t
        t *= 16.0
    for _ in range(iters):
        mid = 0.5 * (lo_t + hi_t)
        if mid <= lo_t or mid >= hi_t:
            break
        if np.max(cons_value(point(mid))) <= tol:
            hi_t = mid
        else:
            lo_t = mid
        if hi_t - lo_t <= 1e-3 * hi_t:
            break
    return point(hi_t), hi_t
