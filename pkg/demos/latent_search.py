"""Compress curated policies into a 2-D latent space, then search it.

A shortened run of the whole pipeline on Mountain Car: curate with OPC,
train the autoencoder on the occupancy loss, and run warm-started PGPE on
the standard task. Expect several minutes on one core.

    python demos/latent_search.py
"""

import time

import numpy as np

from opc.pipeline import (
    build_config,
    collect,
    curate_opc,
    evaluate_returns,
    generate_bank,
    optimize,
    train_autoencoder,
)

cfg = build_config("desk", overrides={"task": "standard", "trajectories_per_policy": 4, "opt_seeds": "0-4"})

t = time.perf_counter()
bank = generate_bank("mc", cfg.count, 0)
_, curated = curate_opc(bank, collect(bank, "none", cfg.curation_episodes, 0), cfg)
kept = evaluate_returns(bank, "standard", 0, ids=curated.ids)
print(f"curated {len(curated)} policies; {np.sum(kept >= 90)} of them already score >= 90 "
      f"({time.perf_counter() - t:.0f}s)")

t = time.perf_counter()
archive = collect(bank, "none", cfg.train_episodes, 0, ids=curated.ids)
result = train_autoencoder(bank, curated.ids, archive, cfg, 0)
losses = [r.loss for r in result.log]
print(f"autoencoder: {result.outer_iterations} outer iterations, loss {np.mean(losses[:10]):.4g} -> "
      f"{np.mean(losses[-10:]):.4g} ({time.perf_counter() - t:.0f}s)")

camp = optimize(result.model, cfg, range(5))
print("warm-start best returns:", " ".join(f"{r:.1f}" for r in camp.warm_returns))
print("episodes  mean return  95% CI")
for e, m, c in list(zip(camp.episodes, camp.mean, camp.ci95))[::4]:
    print(f"{e:>8}  {m:>11.2f}  {c:>6.2f}")
print("seeds reaching 90 within 300 episodes:", int(camp.reached(90, 300).sum()), "of", len(camp.seeds))
