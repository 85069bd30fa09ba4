"""Print a coarse reward map of a small latent space.

Trains a 2-D autoencoder on a few hundred random policies (a quick,
low-fidelity setting) and evaluates decoded policies on a grid, drawing
speed-task returns as characters shaded by rank.

    python demos/latent_map.py
"""

import numpy as np

from opc.compression import grid_eval, grid_points
from opc.envs import make_env
from opc.pipeline import build_config, collect, curate_opc, generate_bank, train_autoencoder
from opc.policy import PolicyArch, StateNormalizer

cfg = build_config("desk", overrides={"count": 400, "percentile": 0.05, "task": "speed",
                                      "trajectories_per_policy": 2, "train_episodes": 2, "inner_iterations": 4})
bank = generate_bank("mc", cfg.count, 1)
_, curated = curate_opc(bank, collect(bank, "none", cfg.curation_episodes, 1), cfg)
archive = collect(bank, "none", cfg.train_episodes, 1, ids=curated.ids)
model = train_autoencoder(bank, curated.ids, archive, cfg, 1).model

env = make_env("mc")
arch, norm = PolicyArch.for_env(env.spec), StateNormalizer.from_spec(env.spec)
per_dim = 15
pts = grid_points(2, -3.0, 3.0, per_dim)
rewards = grid_eval(model, arch, norm, env, "speed", pts, 1, 0).reshape(per_dim, per_dim)

shades = " .:-=+*#%@"
# shade by rank: returns are heavy-tailed, so a linear scale shows only the peak
ranks = np.argsort(np.argsort(rewards, axis=None)).reshape(rewards.shape)
scaled = ranks / (rewards.size - 1)
print(f"speed return rank over z in [-3, 3]^2 (min {rewards.min():.3f}, max {rewards.max():.3f})")
for row in scaled:
    print("".join(shades[min(int(v * len(shades)), len(shades) - 1)] * 2 for v in row))
