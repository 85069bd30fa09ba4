"""How much of the high-speed tail survives curation?

Samples 2,500 random Mountain Car policies, scores them with the
occupancy-based (OPC) and action-based (APC) criteria, keeps the top 5%
of each and compares the speed-task returns that were kept.

    python demos/curation_tail.py [seed]
"""

import sys

import numpy as np

from opc.pipeline import build_config, collect, curate_apc, curate_opc, evaluate_returns, generate_bank

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = build_config("desk", overrides={"seed": seed})

bank = generate_bank("mc", cfg.count, seed)
archive = collect(bank, "none", cfg.curation_episodes, seed)
print(f"{bank.count} policies, {len(archive)} reward-free trajectories")

_, opc = curate_opc(bank, archive, cfg)
_, apc = curate_apc(bank, archive, cfg)
returns = evaluate_returns(bank, "speed", seed)

print(f"{'':>12} {'kept':>5} {'median':>9} {'p99':>9} {'max':>9}")
for name, ids in [("population", np.arange(bank.count)), ("OPC top 5%", opc.ids), ("APC top 5%", apc.ids)]:
    r = returns[ids]
    print(f"{name:>12} {len(ids):>5} {np.median(r):>9.4f} {np.percentile(r, 99):>9.4f} {r.max():>9.4f}")

overlap = len(np.intersect1d(opc.ids, apc.ids))
print(f"the two curated sets share {overlap} policies")
