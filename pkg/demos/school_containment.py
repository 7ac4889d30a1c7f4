"""
Containing an outbreak in a primary-school contact network
==========================================================

Eleven pupils of two third-grade classes start infected; everyone else carries
a 1% chance.  We spend a budget of one unit per pupil on lowering infection
rates and raising recovery rates so that the expected number of infected
pupils outside the seed group at the end of the school day is as small as the
certified bound allows.

The real contact log is used when ``data/primaryschool.csv`` exists (see
``fetch_dataset.py``); otherwise a calibrated synthetic network of the same
size stands in.  Tables are written to ``runs/demo-school/``.
"""
import csv
from pathlib import Path

import numpy as np

from epicontain import cli
from epicontain.allocation import (investment_rows, solve_budget_constrained,
                                   solve_static_baseline, verify_allocation)
from epicontain.contacts import aggregate_static, network_summary
from epicontain.stochastic import mc_estimate_objective

ROOT = Path(__file__).resolve().parents[1]
DATASET = ROOT / "data" / "primaryschool.csv"
OUT = ROOT / "runs" / "demo-school"
OUT.mkdir(parents=True, exist_ok=True)

# %%
# Build the instance from the bundled preset
if DATASET.is_file():
    cfg = cli._merge(cli.DEFAULT_CONFIG, cli.load_preset("school-grade3"))
    cfg["network"]["path"] = str(DATASET)
else:
    cfg = cli._merge(cli.DEFAULT_CONFIG, cli.load_preset("school-grade3-synthetic"))
prob = cli.Problem(cfg)
net = prob.net
summary = network_summary(net)
print(f"network: n={summary['n']}  T={summary['T']:g} s  snapshots={summary['snapshots']}  "
      f"aggregate edges={summary['aggregate_edges']}")

# %%
# With no intervention the linear bound is useless: it grows without limit
unprotected, _, _ = verify_allocation(net, prob.p0, prob.objective, prob.cost,
                                      prob.bounds.nominal(), prob.bounds)
print(f"unprotected bound      J <= {unprotected:.3g}")

# %%
# Optimal allocation on the temporal network, budget R = n
rep = solve_budget_constrained(net, prob.p0, prob.objective, prob.cost, prob.bounds,
                               cfg["budget"], prob.opts)
print(f"temporal allocation    J <= {rep.guaranteed_J:.4g}   cost {rep.cost_used:.4g}   "
      f"({rep.status}, {rep.iterations} iterations)")

# %%
# Baseline: minimize the decay rate on the time-aggregated static graph, then
# certify that allocation on the real temporal dynamics
base = solve_static_baseline(aggregate_static(net), prob.cost, prob.bounds, cfg["budget"], prob.opts)
J_base, R_base, _ = verify_allocation(net, prob.p0, prob.objective, prob.cost, base.allocation,
                                      prob.bounds)
print(f"static baseline        J <= {J_base:.4g}   cost {R_base:.4g}")
print(f"improvement factor     {J_base / rep.guaranteed_J:.1f}")

# %%
# Where does the money go?  Split between the seed pupils and everyone else
rows = list(investment_rows(prob.cost, rep.allocation, net.node_labels))
phi = np.array([r[4] for r in rows])
psi = np.array([r[5] for r in rows])
seed = np.zeros(net.n, bool)
seed[:11] = True
print(f"seed pupils:  transmission {phi[seed].sum():6.2f}   recovery {psi[seed].sum():6.2f}")
print(f"other pupils: transmission {phi[~seed].sum():6.2f}   recovery {psi[~seed].sum():6.2f}")
with (OUT / "investments.csv").open("w", newline="") as fh:
    w = csv.writer(fh)
    w.writerow(["node", "label", "beta", "delta", "phi_cost", "psi_cost"])
    w.writerows(rows)

# %%
# The certificate is conservative: the simulated epidemic stays well below it
est = mc_estimate_objective(net, rep.allocation, prob.p0, prob.objective, 10_000, seed=1)
print(f"Monte Carlo            J  = {est.mean:.4g} +- {est.std_error:.2g}  (10^4 runs)")

# %%
# Trade-off curve: certified bound versus budget
with (OUT / "budget_sweep.csv").open("w", newline="") as fh:
    w = csv.writer(fh)
    w.writerow(["budget", "guaranteed_J"])
    for R in (0, 11, 22, 33, 44, 66, 88):
        r = solve_budget_constrained(net, prob.p0, prob.objective, prob.cost, prob.bounds,
                                     float(R), prob.opts)
        w.writerow([R, repr(r.guaranteed_J)])
        print(f"budget {R:3d}: J <= {r.guaranteed_J:.3g}")
print("tables written to", OUT)
