"""Config-driven runs: ``python -m epicontain <command> [options]``.

Commands
--------
ingest     build the temporal network, write its summary and snapshot table
solve      run one allocation program (budget, performance, feasibility,
           static-baseline) and write the report and per-node investments
simulate   Monte Carlo estimate of the objective under an allocation
oracle     exact master-equation marginals for small networks
verify     recompute the certified bound and the cost of an allocation

A run reads a JSON config (``--config``) or a bundled preset (``--preset``),
applies ``--set key.path=value`` overrides and the dedicated flags, and writes
its outputs plus ``manifest.json`` into the output directory.  The directory
comes from ``--output-dir``, else ``$EPICONTAIN_OUTPUT_DIR``, else the config.

Exit codes: 0 success, 2 bad config or input, 3 infeasible, 4 iteration limit.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import platform
import sys
from dataclasses import fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .allocation import (FEASIBLE, INFEASIBLE, MAX_ITER, SolveReport, SolverOptions,
                         investment_rows, solve_budget_constrained, solve_feasibility,
                         solve_performance_constrained, solve_static_baseline, verify_allocation)
from .bounds import Allocation, RateBounds, propagate_bound
from .contacts import (ContactParseError, EmptyLogError, EmptyNetworkError, SynthesisConfigError,
                       aggregate_static, build_temporal_network, labels_in_classes,
                       network_summary, read_contacts, restrict_day, restrict_time,
                       synthesize_school_like, write_snapshot_csv)
from .costs import DegenerateBoundsError, cost_model_from_config
from .objectives import objective_from_config
from .stochastic import (StateSpaceTooLargeError, master_equation_marginals,
                         mc_estimate_objective, write_marginals_csv)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_MAX_ITER = 0, 2, 3, 4
OUTPUT_ENV = "EPICONTAIN_OUTPUT_DIR"
MODES = ("budget", "performance", "feasibility", "static-baseline")
_STATUS_EXIT = {FEASIBLE: EXIT_OK, INFEASIBLE: EXIT_INFEASIBLE, MAX_ITER: EXIT_MAX_ITER}


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "network": {"source": "synthetic", "n": 44, "T": 31110.0, "params": {}, "seed": 0},
    "bounds": {"beta_lo": 5e-4, "beta_hi": 5e-3, "delta_lo": 1e-4, "delta_hi": 1e-3,
               "delta_hat": 10.0},
    "cost": {"lambda": 1e-2},
    "objective": {"kind": "terminal_lq", "weights": {"ones_from": 11}, "q": 1},
    "p0": {"value": 0.01, "seeded": 11, "seeded_value": 1.0},
    "budget": 44.0,
    "target_J": None,
    "solver": {},
    "simulation": {"trials": 10000},
    "oracle": {"times": 11},
    "output_dir": "runs",
    "seed": 0,
}


# -- configuration ------------------------------------------------------------

def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_preset(name: str) -> dict:
    try:
        text = resources.files("epicontain.presets").joinpath(f"{name}.json").read_text("utf-8")
    except FileNotFoundError:
        raise ConfigError(f"unknown preset {name!r}") from None
    return json.loads(text)


def _set_path(cfg: dict, dotted: str, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        nxt = node.get(k)
        if not isinstance(nxt, dict):
            nxt = node[k] = {}
        node = nxt
    node[keys[-1]] = value


def _parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def resolve_config(args) -> dict:
    """Defaults, then preset or file, then ``--set`` overrides, then flags."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if getattr(args, "preset", None):
        cfg = _merge(cfg, load_preset(args.preset))
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            loaded = json.loads(path.read_text("utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        # a manifest carries the resolved config under "config"
        cfg = _merge(cfg, loaded.get("config", loaded) if "manifest_version" in loaded else loaded)
    for item in getattr(args, "set", None) or []:
        _set_path(cfg, *_parse_override(item))
    for flag, key in (("budget", "budget"), ("target_j", "target_J"), ("seed", "seed")):
        if getattr(args, flag, None) is not None:
            cfg[key] = getattr(args, flag)
    if getattr(args, "trials", None) is not None:
        cfg.setdefault("simulation", {})["trials"] = args.trials
    out = getattr(args, "output_dir", None) or os.environ.get(OUTPUT_ENV) or cfg.get("output_dir")
    cfg["output_dir"] = str(out)
    return cfg


def build_network(cfg: dict):
    spec = cfg.get("network") or {}
    source = spec.get("source", "dataset")
    if source == "synthetic":
        try:
            return synthesize_school_like(int(spec.get("n", 44)), float(spec.get("T", 31100.0)),
                                          spec.get("params") or {}, int(spec.get("seed", 0)))
        except SynthesisConfigError as exc:
            raise ConfigError(str(exc)) from None
    if source != "dataset":
        raise ConfigError(f"network.source must be 'dataset' or 'synthetic', not {source!r}")
    path = spec.get("path")
    if not path:
        raise ConfigError("network.path is required for a dataset source")
    if not Path(path).is_file():
        raise ConfigError(f"dataset not found: {path}")
    try:
        events = read_contacts(path, float(spec.get("resolution", 20)))
        if spec.get("day") is not None:
            events = restrict_day(events, int(spec["day"]))
        if spec.get("t_min") is not None or spec.get("t_max") is not None:
            events = restrict_time(events, spec.get("t_min"), spec.get("t_max"))
        keep = None
        if spec.get("classes"):
            keep = labels_in_classes(events, spec["classes"])
        if spec.get("nodes"):
            keep = set(map(str, spec["nodes"])) if keep is None else keep & set(map(str, spec["nodes"]))
        return build_temporal_network(events, keep, spec.get("horizon"),
                                      spec.get("node_order", "sorted"))
    except (ContactParseError, EmptyLogError, EmptyNetworkError) as exc:
        raise ConfigError(f"cannot build network from {path}: {exc}") from None


def build_bounds(cfg: dict, n: int) -> RateBounds:
    b = cfg.get("bounds") or {}
    try:
        args = [np.broadcast_to(np.asarray(b[k], dtype=float), (n,)).copy()
                for k in ("beta_lo", "beta_hi", "delta_lo", "delta_hi")]
        return RateBounds(*args, float(b["delta_hat"]))
    except KeyError as exc:
        raise ConfigError(f"bounds.{exc.args[0]} is missing") from None
    except ValueError as exc:
        raise ConfigError(f"invalid bounds: {exc}") from None


def build_p0(cfg: dict, n: int) -> np.ndarray:
    spec = cfg.get("p0", 0.01)
    if isinstance(spec, (int, float)):
        p0 = np.full(n, float(spec))
    elif isinstance(spec, list):
        p0 = np.asarray(spec, dtype=float)
    else:
        p0 = np.full(n, float(spec.get("value", 0.01)))
        k = int(spec.get("seeded", 0))
        p0[:k] = float(spec.get("seeded_value", 1.0))
    if p0.shape != (n,) or np.any(p0 < 0) or np.any(p0 > 1):
        raise ConfigError(f"p0 must give {n} values in [0, 1]")
    return p0


def solver_options(cfg: dict) -> SolverOptions:
    names = {f.name for f in fields(SolverOptions)} - {"early_exit"}
    given = cfg.get("solver") or {}
    unknown = set(given) - names
    if unknown:
        raise ConfigError(f"unknown solver options: {sorted(unknown)}")
    return SolverOptions(**given)


class Problem:
    """Everything a command needs, built once from a resolved config."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.net = build_network(cfg)
        n = self.net.n
        self.bounds = build_bounds(cfg, n)
        try:
            self.cost = cost_model_from_config(cfg.get("cost") or {}, self.bounds)
            self.objective = objective_from_config(cfg.get("objective") or {}, n, self.net.horizon)
        except (DegenerateBoundsError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"invalid cost or objective: {exc}") from None
        self.p0 = build_p0(cfg, n)
        self.opts = solver_options(cfg)


# -- outputs ------------------------------------------------------------------

def _versions() -> dict:
    import numba
    import scipy

    return {"epicontain": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__}


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, default=_json_default) + "\n", encoding="utf-8")


def _outdir(cfg: dict) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, cfg: dict, artifacts: list[str], extra=None) -> None:
    payload = {"manifest_version": 1, "command": command, "config": cfg,
               "seeds": {"run": cfg.get("seed"), "network": (cfg.get("network") or {}).get("seed")},
               "versions": _versions(), "artifacts": sorted(artifacts)}
    if extra:
        payload.update(extra)
    _write_json(out / "manifest.json", payload)


def write_investments(path: Path, prob: Problem, alloc: Allocation) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "label", "beta", "delta", "phi_cost", "psi_cost"])
        for row in investment_rows(prob.cost, alloc, prob.net.node_labels):
            w.writerow([row[0], row[1], *(repr(v) for v in row[2:])])


def read_allocation(path: str, n: int) -> Allocation:
    try:
        data = json.loads(Path(path).read_text("utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"allocation file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"allocation file {path} is not valid JSON: {exc}") from None
    if "report" in data:
        data = data["report"]
    try:
        alloc = Allocation(np.asarray(data["beta"], dtype=float), np.asarray(data["delta"], dtype=float))
    except KeyError as exc:
        raise ConfigError(f"allocation file lacks {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ConfigError(f"invalid allocation: {exc}") from None
    if alloc.n != n:
        raise ConfigError(f"allocation has {alloc.n} nodes, network has {n}")
    return alloc


def _allocation_for(allocation: str | None, prob: Problem) -> Allocation:
    if allocation in (None, "nominal"):
        return prob.bounds.nominal()
    if allocation == "full":
        return prob.bounds.full_protection()
    return read_allocation(allocation, prob.net.n)


# -- commands -----------------------------------------------------------------

def cmd_ingest(cfg: dict) -> int:
    net = build_network(cfg)
    out = _outdir(cfg)
    summary = network_summary(net)
    _write_json(out / "network_summary.json", summary)
    with (out / "snapshots.csv").open("w", newline="", encoding="utf-8") as fh:
        write_snapshot_csv(net, fh)
    write_manifest(out, "ingest", cfg, ["network_summary.json", "snapshots.csv"])
    print(f"n={summary['n']} T={summary['T']:g} snapshots={summary['snapshots']} "
          f"aggregate_edges={summary['aggregate_edges']}")
    return EXIT_OK


def _solve_one(prob: Problem, mode: str, budget=None) -> SolveReport:
    cfg = prob.cfg
    R_bar = cfg.get("budget") if budget is None else budget
    J_bar = cfg.get("target_J")
    if mode in ("budget", "feasibility", "static-baseline") and R_bar is None:
        raise ConfigError(f"mode {mode} needs a budget")
    if mode in ("performance", "feasibility") and J_bar is None:
        raise ConfigError(f"mode {mode} needs target_J")
    args = (prob.net, prob.p0, prob.objective, prob.cost, prob.bounds)
    try:
        if mode == "budget":
            return solve_budget_constrained(*args, float(R_bar), prob.opts)
        if mode == "performance":
            return solve_performance_constrained(*args, float(J_bar), prob.opts)
        if mode == "feasibility":
            return solve_feasibility(*args, float(J_bar), float(R_bar), prob.opts)
        rep = solve_static_baseline(aggregate_static(prob.net), prob.cost, prob.bounds,
                                    float(R_bar), prob.opts)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    # the baseline is certified only through the temporal bound
    rep.guaranteed_J, _, _ = verify_allocation(prob.net, prob.p0, prob.objective, prob.cost,
                                               rep.allocation, prob.bounds)
    return rep


def cmd_solve(cfg: dict, mode: str, sweep=None) -> int:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    prob = Problem(cfg)
    out = _outdir(cfg)
    rep = _solve_one(prob, mode)
    _write_json(out / "report.json", rep.to_dict())
    write_investments(out / "investments.csv", prob, rep.allocation)
    artifacts = ["report.json", "investments.csv"]
    if sweep:
        with (out / "sweep.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["budget", "guaranteed_J", "cost_used", "status"])
            for b in sweep:
                r = _solve_one(prob, mode, b)
                w.writerow([b, repr(r.guaranteed_J), repr(r.cost_used), r.status])
        artifacts.append("sweep.csv")
    write_manifest(out, f"solve --mode {mode}", cfg, artifacts)
    print(f"guaranteed_J={rep.guaranteed_J!r} cost_used={rep.cost_used!r} status={rep.status}")
    return _STATUS_EXIT[rep.status]


def cmd_simulate(cfg: dict, allocation: str | None) -> int:
    prob = Problem(cfg)
    alloc = _allocation_for(allocation, prob)
    sim = cfg.get("simulation") or {}
    trials = int(sim.get("trials", 10000))
    seed = int(sim.get("seed", cfg.get("seed", 0)))
    if trials < 100:
        raise ConfigError("simulation.trials must be at least 100")
    est = mc_estimate_objective(prob.net, alloc, prob.p0, prob.objective, trials, seed)
    J_bound, _, _ = verify_allocation(prob.net, prob.p0, prob.objective, prob.cost, alloc, prob.bounds)
    payload = {"estimate": est.to_dict(), "certified_bound": J_bound,
               "within_bound": bool(est.mean <= J_bound + 3 * est.std_error)}
    out = _outdir(cfg)
    _write_json(out / "simulation.json", payload)
    write_manifest(out, "simulate", cfg, ["simulation.json"], {"allocation_file": allocation})
    print(json.dumps(payload, default=_json_default))
    return EXIT_OK


def cmd_oracle(cfg: dict, allocation: str | None) -> int:
    prob = Problem(cfg)
    alloc = _allocation_for(allocation, prob)
    k = int((cfg.get("oracle") or {}).get("times", 11))
    ts = np.linspace(0.0, prob.net.horizon, max(k, 2))
    try:
        marg = master_equation_marginals(prob.net, alloc, prob.p0, ts)
    except StateSpaceTooLargeError as exc:
        raise ConfigError(str(exc)) from None
    bound = propagate_bound(prob.net, alloc, prob.p0, ts)
    out = _outdir(cfg)
    with (out / "marginals.csv").open("w", newline="", encoding="utf-8") as fh:
        write_marginals_csv(marg, fh, prob.net.node_labels)
    payload = {"sample_times": ts, "marginals": marg.values, "bound": bound.values,
               "min_slack": float((bound.values - marg.values).min())}
    _write_json(out / "oracle.json", payload)
    write_manifest(out, "oracle", cfg, ["marginals.csv", "oracle.json"], {"allocation_file": allocation})
    print(f"min_slack={payload['min_slack']!r}")
    return EXIT_OK


def cmd_verify(cfg: dict, allocation: str | None) -> int:
    prob = Problem(cfg)
    alloc = _allocation_for(allocation, prob)
    J, R, in_box = verify_allocation(prob.net, prob.p0, prob.objective, prob.cost, alloc, prob.bounds)
    payload = {"guaranteed_J": J, "cost_used": R, "in_box": in_box}
    out = _outdir(cfg)
    _write_json(out / "verify.json", payload)
    write_manifest(out, "verify", cfg, ["verify.json"], {"allocation_file": allocation})
    print(json.dumps(payload))
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", help="JSON config or manifest file")
    src.add_argument("--preset", help="bundled preset name, e.g. school-grade3")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (dotted path, JSON value); repeatable")
    p.add_argument("--output-dir", help=f"output directory (overrides ${OUTPUT_ENV})")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m epicontain",
                                     description="Certified epidemic containment on temporal networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build the network and dump its snapshots")
    _common(p)

    p = sub.add_parser("solve", help="solve an allocation program")
    _common(p)
    p.add_argument("--mode", choices=MODES, default="budget")
    p.add_argument("--budget", type=float)
    p.add_argument("--target-j", type=float, dest="target_j")
    p.add_argument("--sweep", help="comma-separated budgets; writes sweep.csv")

    for name, text in (("simulate", "Monte Carlo estimate of the objective"),
                       ("oracle", "exact master-equation marginals (n <= 14)"),
                       ("verify", "certified bound and cost of an allocation")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--allocation",
                       help="report.json or {beta, delta} file; 'nominal' or 'full' for a corner")
        if name == "simulate":
            p.add_argument("--trials", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "ingest":
            return cmd_ingest(cfg)
        if args.command == "solve":
            sweep = [float(x) for x in args.sweep.split(",")] if args.sweep else None
            return cmd_solve(cfg, args.mode, sweep)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.allocation)
        if args.command == "oracle":
            return cmd_oracle(cfg, args.allocation)
        return cmd_verify(cfg, args.allocation)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
