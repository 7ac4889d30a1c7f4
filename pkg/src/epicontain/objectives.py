"""Performance functionals built from posynomials with nonnegative exponents.

An objective is an expression tree.  Leaves are finite posynomials: sums of
monomials ``c * prod p_i(t)^a`` over finitely many (node, time) samples.
Internal nodes combine children by sum, product, positive power and max.
Every such tree is nondecreasing in each sample, which is what lets an upper
bound on the trajectory certify an upper bound on the objective.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from .bounds import BoundTrajectory, SensitivityBlock

__all__ = [
    "MonomialTerm",
    "Posynomial",
    "Sum",
    "Product",
    "Power",
    "Max",
    "ObjectiveSpec",
    "QuadratureSpec",
    "MissingSampleError",
    "make_terminal_lq",
    "make_integral",
    "sample_times",
    "referenced_nodes",
    "evaluate",
    "value_and_sample_gradient",
    "gradient",
    "objective_from_config",
    "objective_to_config",
]


class MissingSampleError(KeyError):
    pass


@dataclass(frozen=True)
class MonomialTerm:
    coefficient: float
    factors: tuple[tuple[int, float, float], ...]

    def __post_init__(self):
        if not self.coefficient > 0:
            raise ValueError("monomial coefficient must be positive")
        facs = tuple((int(i), float(t), float(a)) for i, t, a in self.factors)
        for i, t, a in facs:
            if a < 0:
                raise ValueError("exponents must be nonnegative")
            if i < 0 or t < 0:
                raise ValueError("node index and sample time must be nonnegative")
        object.__setattr__(self, "coefficient", float(self.coefficient))
        object.__setattr__(self, "factors", facs)


@dataclass(frozen=True)
class Posynomial:
    terms: tuple[MonomialTerm, ...] = ()


@dataclass(frozen=True)
class Sum:
    children: tuple["ObjectiveSpec", ...]


@dataclass(frozen=True)
class Product:
    children: tuple["ObjectiveSpec", ...]


@dataclass(frozen=True)
class Power:
    child: "ObjectiveSpec"
    exponent: float

    def __post_init__(self):
        if not self.exponent > 0:
            raise ValueError("power exponent must be positive")


@dataclass(frozen=True)
class Max:
    children: tuple["ObjectiveSpec", ...]

    def __post_init__(self):
        if not self.children:
            raise ValueError("max needs at least one branch")


ObjectiveSpec = Union[Posynomial, Sum, Product, Power, Max]


@dataclass(frozen=True)
class QuadratureSpec:
    """Weight samples ``weights[l] = w(l h)`` for ``l = 0..k-1`` with ``h = T / k``."""

    weights: np.ndarray
    horizon: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[0] < 1:
            raise ValueError("weights must have shape (k, n) with k >= 1")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        object.__setattr__(self, "weights", w)

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def step(self) -> float:
        return self.horizon / self.k

    @classmethod
    def from_function(cls, w: Callable[[float], Sequence[float]], horizon: float,
                      k: int) -> "QuadratureSpec":
        h = horizon / k
        return cls(np.array([w(ell * h) for ell in range(k)], dtype=float), horizon)


def make_terminal_lq(weights, q: float, t: float) -> ObjectiveSpec:
    """Weighted l_q norm ``(sum_i (w_i p_i(t))^q)^(1/q)``.

    Zero weights drop the node from the sum; at least one weight must be positive.
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or np.any(w < 0) or not np.any(w > 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be nonnegative with at least one positive entry")
    if not q > 0:
        raise ValueError("q must be positive")
    if t < 0:
        raise ValueError("t must be nonnegative")
    terms = tuple(MonomialTerm(float(wi) ** q, ((i, t, q),)) for i, wi in enumerate(w) if wi > 0)
    poly = Posynomial(terms)
    return poly if q == 1 else Power(poly, 1.0 / q)


def make_integral(quad: QuadratureSpec) -> ObjectiveSpec:
    """Left-endpoint Riemann sum ``sum_{l<k} h w(lh)^T p(lh)`` of ``int w^T p dt``."""
    h = quad.step
    terms = []
    for ell, row in enumerate(quad.weights):
        t = ell * h
        for i, wi in enumerate(row):
            if wi > 0:
                terms.append(MonomialTerm(h * wi, ((i, t, 1.0),)))
    return Posynomial(tuple(terms))


def _walk(spec):
    yield spec
    if isinstance(spec, (Sum, Product, Max)):
        for c in spec.children:
            yield from _walk(c)
    elif isinstance(spec, Power):
        yield from _walk(spec.child)


def _factors(spec):
    for node in _walk(spec):
        if isinstance(node, Posynomial):
            for term in node.terms:
                yield from term.factors


def sample_times(spec: ObjectiveSpec) -> np.ndarray:
    """Sorted union of the sample times the objective reads."""
    return np.array(sorted({t for _, t, _ in _factors(spec)}), dtype=float)


def referenced_nodes(spec: ObjectiveSpec) -> set[int]:
    return {i for i, _, _ in _factors(spec)}


def _time_index(spec, traj: BoundTrajectory) -> dict[float, int]:
    idx = {float(t): k for k, t in enumerate(traj.sample_times)}
    n = traj.values.shape[1]
    for i, t, _ in _factors(spec):
        if t not in idx:
            raise MissingSampleError(f"trajectory has no sample at t={t}")
        if i >= n:
            raise MissingSampleError(f"node {i} out of range for {n} nodes")
    return idx


def _eval(spec, P, idx, want_grad):
    """Return ``(value, dvalue/dP)``; the gradient has the shape of ``P`` or is None."""
    if isinstance(spec, Posynomial):
        total = 0.0
        G = np.zeros_like(P) if want_grad else None
        for term in spec.terms:
            bases = [P[idx[t], i] for i, t, _ in term.factors]
            val = term.coefficient
            for (_, _, a), v in zip(term.factors, bases):
                val *= v ** a
            total += val
            if want_grad:
                for j, (i, t, a) in enumerate(term.factors):
                    v = bases[j]
                    if a == 0 or (v == 0 and a != 1):
                        # a < 1 at a zero base has no finite derivative; use 0
                        continue
                    d = term.coefficient * a * (v ** (a - 1) if a != 1 else 1.0)
                    for jj, ((_, _, aa), vv) in enumerate(zip(term.factors, bases)):
                        if jj != j:
                            d *= vv ** aa
                    G[idx[t], i] += d
        return total, G
    if isinstance(spec, Sum):
        parts = [_eval(c, P, idx, want_grad) for c in spec.children]
        val = sum(v for v, _ in parts)
        G = sum(g for _, g in parts) if want_grad and parts else (np.zeros_like(P) if want_grad else None)
        return val, G
    if isinstance(spec, Product):
        parts = [_eval(c, P, idx, want_grad) for c in spec.children]
        vals = [v for v, _ in parts]
        val = float(np.prod(vals)) if vals else 1.0
        if not want_grad:
            return val, None
        G = np.zeros_like(P)
        for j, (_, g) in enumerate(parts):
            others = float(np.prod(vals[:j] + vals[j + 1:])) if len(vals) > 1 else 1.0
            G += others * g
        return val, G
    if isinstance(spec, Power):
        v, g = _eval(spec.child, P, idx, want_grad)
        a = spec.exponent
        val = v ** a
        if not want_grad:
            return val, None
        scale = a * v ** (a - 1) if v > 0 else (0.0 if a < 1 else (1.0 if a == 1 else 0.0))
        return val, scale * g
    if isinstance(spec, Max):
        parts = [_eval(c, P, idx, want_grad) for c in spec.children]
        vals = [v for v, _ in parts]
        k = int(np.argmax(vals))  # lowest branch index wins ties
        return vals[k], parts[k][1]
    raise TypeError(f"not an objective node: {type(spec).__name__}")


def evaluate(spec: ObjectiveSpec, traj: BoundTrajectory) -> float:
    """Value of the objective on a sampled trajectory."""
    idx = _time_index(spec, traj)
    val, _ = _eval(spec, np.asarray(traj.values, dtype=float), idx, False)
    return float(val)


def value_and_sample_gradient(spec: ObjectiveSpec, traj: BoundTrajectory):
    """Value and its derivative with respect to every trajectory sample (shape ``(K, n)``).

    At a tie between ``max`` branches the lowest-index branch supplies the
    (sub)gradient.
    """
    idx = _time_index(spec, traj)
    val, G = _eval(spec, np.asarray(traj.values, dtype=float), idx, True)
    return float(val), G


def gradient(spec: ObjectiveSpec, traj: BoundTrajectory, sens: SensitivityBlock) -> np.ndarray:
    """Derivative of the objective with respect to ``(beta, delta)`` (length ``2n``)."""
    if not np.array_equal(traj.sample_times, sens.sample_times):
        raise ValueError("trajectory and sensitivities are sampled at different times")
    _, G = value_and_sample_gradient(spec, traj)
    return np.einsum("ki,kij->j", G, sens.d)


# -- configuration -----------------------------------------------------------

def _resolve_time(t, horizon):
    if isinstance(t, str):
        if t.upper() == "T":
            return float(horizon)
        raise ValueError(f"unknown time token {t!r}")
    return float(t)


def _node_from_dict(d: Mapping, horizon: float):
    op = d.get("op", "posynomial")
    if op == "posynomial":
        terms = tuple(
            MonomialTerm(float(term["coefficient"]),
                         tuple((int(i), _resolve_time(t, horizon), float(a))
                               for i, t, a in term["factors"]))
            for term in d.get("terms", []))
        return Posynomial(terms)
    if op in ("sum", "product", "max"):
        kids = tuple(_node_from_dict(c, horizon) for c in d["children"])
        return {"sum": Sum, "product": Product, "max": Max}[op](kids)
    if op == "power":
        return Power(_node_from_dict(d["child"], horizon), float(d["exponent"]))
    raise ValueError(f"unknown objective op {op!r}")


def objective_from_config(cfg: Mapping, n: int, horizon: float) -> ObjectiveSpec:
    """Build an objective from its JSON form.

    ``kind`` is one of ``terminal_lq`` (``weights``, ``q``, ``t``),
    ``integral`` (``weights`` as one per-node vector or a ``(k, n)`` table,
    plus ``k``) or ``custom_posynomial`` (``tree``: nested
    ``{"op": ..., ...}`` nodes, or ``terms`` for a flat posynomial).
    Node weights may also be given as ``{"ones_from": i}``, meaning weight 1
    on nodes ``i..n-1`` and 0 before.
    """
    kind = cfg.get("kind")

    def weights_of(w):
        if isinstance(w, Mapping) and "ones_from" in w:
            out = np.zeros(n)
            out[int(w["ones_from"]):] = 1.0
            return out
        if w is None:
            return np.ones(n)
        arr = np.asarray(w, dtype=float)
        return np.full(n, float(arr)) if arr.ndim == 0 else arr

    if kind == "terminal_lq":
        return make_terminal_lq(weights_of(cfg.get("weights")), float(cfg.get("q", 1.0)),
                                _resolve_time(cfg.get("t", "T"), horizon))
    if kind == "integral":
        k = int(cfg.get("k", 100))
        w = weights_of(cfg.get("weights"))
        table = np.tile(w, (k, 1)) if w.ndim == 1 else w
        return make_integral(QuadratureSpec(table, horizon))
    if kind == "custom_posynomial":
        if "tree" in cfg:
            return _node_from_dict(cfg["tree"], horizon)
        return _node_from_dict({"op": "posynomial", "terms": cfg["terms"]}, horizon)
    raise ValueError(f"unknown objective kind {kind!r}")


def objective_to_config(spec: ObjectiveSpec) -> dict:
    """Tree form accepted by ``objective_from_config(kind='custom_posynomial')``."""
    def node(s):
        if isinstance(s, Posynomial):
            return {"op": "posynomial",
                    "terms": [{"coefficient": t.coefficient, "factors": [list(f) for f in t.factors]}
                              for t in s.terms]}
        if isinstance(s, Power):
            return {"op": "power", "exponent": s.exponent, "child": node(s.child)}
        name = {Sum: "sum", Product: "product", Max: "max"}[type(s)]
        return {"op": name, "children": [node(c) for c in s.children]}
    return {"kind": "custom_posynomial", "tree": node(spec)}
