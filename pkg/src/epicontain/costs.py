"""Intervention costs as posynomial parts minus nonnegative constants.

Each node carries ``phi_i(beta) = sum_k c_k beta^a_k - phi_minus_i`` and
``psi_i(delta) = sum_k c_k (delta_hat - delta)^a_k - psi_minus_i``.  The
posynomial parts summed over nodes give ``R_plus``; the constants give
``R_minus``; the total cost is ``R = R_plus - R_minus``.

Single-term nodes are evaluated as ``m * expm1(a log x + log(c / m))`` which
stays accurate when ``R_plus`` and ``R_minus`` are both huge and nearly
cancel (the recovery costs of the school preset are of order 1e7 each).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .bounds import Allocation, RateBounds

__all__ = [
    "CostModel",
    "DegenerateBoundsError",
    "CostDomainWarning",
    "normalize_costs",
    "total_cost",
    "node_costs",
    "r_plus_logspace",
    "cost_logspace",
    "anchored_costs",
    "r_minus",
    "cost_model_from_config",
]


class DegenerateBoundsError(ValueError):
    pass


class CostDomainWarning(UserWarning):
    pass


Terms = tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class CostModel:
    """Per-node cost decomposition.

    Parameters
    ----------
    phi_terms, psi_terms : sequence (per node) of ``(coefficient, exponent)`` pairs
        Posynomial parts in ``beta_i`` and in ``delta_hat - delta_i``.
    phi_minus, psi_minus : (n,) arrays of nonnegative constants
    delta_hat : float
    lam : float, optional
        Shape parameter of the power-law family, kept for reporting.
    bounds : RateBounds, optional
        Used only to warn about out-of-box evaluations.
    phi_ref, psi_ref : (n,) arrays, optional
        Rates at which the single-term parts vanish.  When given, node costs
        are evaluated as ``minus * expm1(a log(x / x_ref))``, which is exact at
        the reference and keeps full accuracy where the posynomial and the
        constant are both large.
    """

    phi_terms: tuple[Terms, ...]
    psi_terms: tuple[Terms, ...]
    phi_minus: np.ndarray
    psi_minus: np.ndarray
    delta_hat: float
    lam: float | None = None
    bounds: RateBounds | None = None
    phi_ref: np.ndarray | None = None
    psi_ref: np.ndarray | None = None

    def __post_init__(self):
        pt = tuple(tuple((float(c), float(a)) for c, a in node) for node in self.phi_terms)
        st = tuple(tuple((float(c), float(a)) for c, a in node) for node in self.psi_terms)
        if len(pt) != len(st):
            raise ValueError("phi and psi need one term list per node")
        for node in pt + st:
            if not node or any(c <= 0 for c, _ in node):
                raise ValueError("every node needs at least one positive-coefficient term")
        pm = np.asarray(self.phi_minus, dtype=float).copy()
        sm = np.asarray(self.psi_minus, dtype=float).copy()
        if pm.shape != (len(pt),) or sm.shape != (len(pt),):
            raise ValueError("phi_minus / psi_minus must have one entry per node")
        if np.any(pm < 0) or np.any(sm < 0):
            raise ValueError("phi_minus and psi_minus must be nonnegative")
        if self.lam is not None and not self.lam > 0:
            raise ValueError("lambda must be positive")
        for name, terms in (("phi_ref", pt), ("psi_ref", st)):
            ref = getattr(self, name)
            if ref is None:
                continue
            ref = np.asarray(ref, dtype=float).copy()
            if ref.shape != (len(pt),) or any(len(t) != 1 for t in terms):
                raise ValueError(f"{name} needs one entry per single-term node")
            ref.setflags(write=False)
            object.__setattr__(self, name, ref)
        if self.psi_ref is not None and np.any(self.psi_ref >= self.delta_hat):
            raise ValueError("psi_ref must lie below delta_hat")
        pm.setflags(write=False)
        sm.setflags(write=False)
        object.__setattr__(self, "phi_terms", pt)
        object.__setattr__(self, "psi_terms", st)
        object.__setattr__(self, "phi_minus", pm)
        object.__setattr__(self, "psi_minus", sm)
        object.__setattr__(self, "delta_hat", float(self.delta_hat))

    @property
    def n(self) -> int:
        return len(self.phi_terms)

    @property
    def r_minus(self) -> float:
        return float(self.phi_minus.sum() + self.psi_minus.sum())

    def to_dict(self) -> dict:
        return {
            "delta_hat": self.delta_hat,
            "lambda": self.lam,
            "phi_terms": [list(map(list, t)) for t in self.phi_terms],
            "psi_terms": [list(map(list, t)) for t in self.psi_terms],
            "phi_minus": self.phi_minus.tolist(),
            "psi_minus": self.psi_minus.tolist(),
            "phi_ref": None if self.phi_ref is None else self.phi_ref.tolist(),
            "psi_ref": None if self.psi_ref is None else self.psi_ref.tolist(),
        }


def r_minus(model: CostModel) -> float:
    return model.r_minus


def normalize_costs(bounds: RateBounds, lam: float) -> CostModel:
    """Power-law costs ``c1 + c2 / beta^lam`` and ``c3 + c4 / (delta_hat - delta)^lam``.

    The constants make ``phi(beta_lo) = 1``, ``phi(beta_hi) = 0``,
    ``psi(delta_lo) = 0`` and ``psi(delta_hi) = 1`` for every node.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    blo, bhi = bounds.beta_lo, bounds.beta_hi
    dlo, dhi = bounds.delta_lo, bounds.delta_hi
    dh = bounds.delta_hat
    if np.any(blo == bhi) or np.any(dlo == dhi):
        raise DegenerateBoundsError("lower and upper rate bounds coincide for some node")
    # beta_lo^-lam - beta_hi^-lam, written to avoid cancellation
    gap_b = bhi ** (-lam) * np.expm1(lam * np.log(bhi / blo))
    c2 = 1.0 / gap_b
    phi_minus = c2 * bhi ** (-lam)
    tlo, thi = dh - dhi, dh - dlo  # delta_tilde range
    gap_d = thi ** (-lam) * np.expm1(lam * np.log1p((dhi - dlo) / tlo))
    c4 = 1.0 / gap_d
    psi_minus = c4 * thi ** (-lam)
    return CostModel(
        phi_terms=tuple(((float(c), -lam),) for c in c2),
        psi_terms=tuple(((float(c), -lam),) for c in c4),
        phi_minus=phi_minus,
        psi_minus=psi_minus,
        delta_hat=dh,
        lam=lam,
        bounds=bounds,
        phi_ref=bhi,
        psi_ref=dlo,
    )


def exponents(model: CostModel) -> tuple[np.ndarray, np.ndarray]:
    """Exponents of single-term nodes (only meaningful when the references are set)."""
    return (np.array([t[0][1] for t in model.phi_terms]),
            np.array([t[0][1] for t in model.psi_terms]))


def anchored_costs(model: CostModel, log_beta_ratio, log_room_ratio):
    """Node costs from ``log(beta / phi_ref)`` and ``log((dhat - delta) / (dhat - psi_ref))``.

    Returns ``(phi, psi, dphi, dpsi)`` with the derivatives taken with respect
    to the two log ratios.
    """
    a_phi, a_psi = exponents(model)
    ep = a_phi * np.asarray(log_beta_ratio, dtype=float)
    es = a_psi * np.asarray(log_room_ratio, dtype=float)
    phi = model.phi_minus * np.expm1(ep)
    psi = model.psi_minus * np.expm1(es)
    return phi, psi, model.phi_minus * np.exp(ep) * a_phi, model.psi_minus * np.exp(es) * a_psi


def _part(terms: Terms, minus: float, logx: float, du: float = 0.0) -> tuple[float, float, float]:
    """``(posynomial value, value - minus, d value / d log x)`` at ``log x + du``.

    Keeping the offset ``du`` separate means the rounding of ``logx`` is the
    same at every call, so the result is smooth in ``du``.
    """
    if len(terms) == 1:
        c, a = terms[0]
        if minus > 0:
            e = (a * logx + math.log(c / minus)) + a * du
            pos = minus * math.exp(e)
            return pos, minus * math.expm1(e), a * pos
        pos = c * math.exp(a * logx) * math.exp(a * du)
        return pos, pos, a * pos
    vals = [c * math.exp(a * logx) * math.exp(a * du) for c, a in terms]
    pos = sum(vals)
    return pos, pos - minus, sum(a * v for (_, a), v in zip(terms, vals))


def cost_logspace(model: CostModel, b, d_tilde, offsets=None):
    """Total cost ``R`` at ``beta = exp(b)``, ``delta = delta_hat - exp(d_tilde)`` with gradient.

    With ``offsets=(ub, ud)`` the cost is taken at ``(b + ub, d_tilde + ud)``
    without forming the sums, which keeps it smooth under small offsets.
    """
    b = np.asarray(b, dtype=float)
    dt = np.asarray(d_tilde, dtype=float)
    n = model.n
    ub, ud = (np.zeros(n), np.zeros(n)) if offsets is None else map(np.asarray, offsets)
    grad = np.empty(2 * n)
    total = 0.0
    for i in range(n):
        _, net_p, g_p = _part(model.phi_terms[i], model.phi_minus[i], b[i], ub[i])
        _, net_s, g_s = _part(model.psi_terms[i], model.psi_minus[i], dt[i], ud[i])
        total += net_p + net_s
        grad[i] = g_p
        grad[n + i] = g_s
    return total, grad


def node_costs(model: CostModel, alloc: Allocation) -> tuple[np.ndarray, np.ndarray]:
    """Per-node ``phi_i(beta_i)`` and ``psi_i(delta_i)``."""
    if alloc.n != model.n:
        raise ValueError("allocation and cost model sizes differ")
    if np.any(alloc.delta >= model.delta_hat):
        raise ValueError("recovery rate must stay below delta_hat")
    if model.phi_ref is not None and model.psi_ref is not None:
        dh, ref = model.delta_hat, model.psi_ref
        phi, psi, _, _ = anchored_costs(model, np.log(alloc.beta / model.phi_ref),
                                        np.log1p((ref - alloc.delta) / (dh - ref)))
        return phi, psi
    lb = np.log(alloc.beta)
    ld = np.log(model.delta_hat - alloc.delta)
    phi = np.array([_part(model.phi_terms[i], model.phi_minus[i], lb[i])[1] for i in range(model.n)])
    psi = np.array([_part(model.psi_terms[i], model.psi_minus[i], ld[i])[1] for i in range(model.n)])
    return phi, psi


def total_cost(model: CostModel, alloc: Allocation) -> float:
    """``R(beta, delta) = sum_i phi_i(beta_i) + psi_i(delta_i)``.

    Out-of-box allocations are evaluated anyway, with a :class:`CostDomainWarning`.
    """
    if model.bounds is not None and not model.bounds.contains(alloc):
        warnings.warn("allocation lies outside the rate bounds", CostDomainWarning, stacklevel=2)
    phi, psi = node_costs(model, alloc)
    return float(phi.sum() + psi.sum())


def r_plus_logspace(model: CostModel, b, d_tilde) -> tuple[float, np.ndarray]:
    """``log R_plus(exp(b), delta_hat - exp(d_tilde))`` and its gradient.

    This is a log-sum-exp of affine functions of ``(b, d_tilde)``, hence convex
    on all of R^2n.
    """
    b = np.asarray(b, dtype=float)
    dt = np.asarray(d_tilde, dtype=float)
    n = model.n
    exps, coefs, owner, slope = [], [], [], []
    for i in range(n):
        for c, a in model.phi_terms[i]:
            exps.append(a * b[i]); coefs.append(c); owner.append(i); slope.append(a)
        for c, a in model.psi_terms[i]:
            exps.append(a * dt[i]); coefs.append(c); owner.append(n + i); slope.append(a)
    z = np.array(exps) + np.log(coefs)
    val = float(logsumexp(z))
    w = np.exp(z - val)
    grad = np.zeros(2 * n)
    np.add.at(grad, np.array(owner), w * np.array(slope))
    return val, grad


def cost_model_from_config(cfg: dict, bounds: RateBounds) -> CostModel:
    """Power-law family from ``lambda``, or explicit term lists under ``custom``.

    ``custom`` holds ``phi_terms``, ``psi_terms`` (per node lists of
    ``[coefficient, exponent]``), ``phi_minus`` and ``psi_minus``.
    """
    custom = cfg.get("custom")
    if custom is None:
        return normalize_costs(bounds, float(cfg.get("lambda", 1e-2)))
    return CostModel(
        phi_terms=tuple(tuple(map(tuple, t)) for t in custom["phi_terms"]),
        psi_terms=tuple(tuple(map(tuple, t)) for t in custom["psi_terms"]),
        phi_minus=np.asarray(custom["phi_minus"], dtype=float),
        psi_minus=np.asarray(custom["psi_minus"], dtype=float),
        delta_hat=bounds.delta_hat,
        lam=cfg.get("lambda"),
        bounds=bounds,
    )
