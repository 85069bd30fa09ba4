"""Acceptance criteria 1-11, each at its stated tolerance and time limit.

Every test records one PASS/FAIL line (printed live and again in the
terminal summary) before asserting.
"""

import math
import subprocess
import sys
import time

import numpy as np

from opc import diffmath as dm
from opc.compression import AutoencoderModel, loss_and_grad
from opc.curation import opc_scores_discrete
from opc.density import GmmDensity, mc_kl, uniform_mixture
from opc.envs import MountainCar, rollout_batch
from opc.occupancy_loss import (
    BatchContext,
    knn_indices,
    knn_kl_loss,
    log_importance_weights,
    particle_log_weights,
    self_normalize,
)
from opc.pgpe import gradient_estimate, init_state, pgpe_step, preset, score_mu
from opc.pipeline import (
    build_config,
    collect,
    curate_apc,
    curate_opc,
    evaluate_returns,
    generate_bank,
    optimize,
    train_autoencoder,
)
from opc.policy import PolicyArch, PolicyPopulation, StateNormalizer, param_count, sample_params, traj_log_prob
from opc.store import file_sha256

MC = PolicyArch(2, 1)
MC_NORM = StateNormalizer.from_spec(MountainCar.spec)


def mc_batch(arch, thetas, per_policy, horizon=None, seed=0):
    trajs, owners = [], []
    for i, th in enumerate(thetas):
        seeds = [seed * 1000 + i * 100 + e for e in range(per_policy)]
        t, _ = rollout_batch(PolicyPopulation(arch, np.repeat(th[None], per_policy, 0), MC_NORM), MountainCar(),
                             "none", seeds, horizon=horizon)
        trajs += t
        owners += [i] * per_policy
    return trajs, owners


def test_c01_entropy_decomposition(verdict):
    t0 = time.perf_counter()
    d = np.random.default_rng(0).dirichlet(np.ones(20), size=50)
    scores, mix = opc_scores_discrete(d)
    h_mix = -np.sum(mix * np.log(mix))
    err = abs(h_mix - scores.mean())
    dt = time.perf_counter() - t0
    assert verdict(1, err < 1e-10 and dt < 1, f"|H(m) - mean score| = {err:.2e} (tol 1e-10), {dt:.2f}s")


def test_c02_component_mixture_bound(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = -np.inf
    for trial in range(100):
        m = (5, 20, 100)[trial % 3]
        comps = []
        for _ in range(m):
            k = int(rng.integers(1, 5))
            comps.append(GmmDensity(rng.dirichlet(np.ones(k)), rng.normal(0, 3, (k, 2)), rng.uniform(0.05, 2, (k, 2))))
        mix = uniform_mixture(comps)
        p = comps[int(rng.integers(m))]
        worst = max(worst, mc_kl(p, mix, p.sample(50_000, rng)) - math.log(m))
    dt = time.perf_counter() - t0
    ok = worst <= 0.05 and dt < 30
    assert verdict(2, ok, f"max over 100 trials of KL - ln M = {worst:.4f} (tol 0.05), {dt:.1f}s")


def test_c03_knn_estimator_calibration(verdict):
    t0 = time.perf_counter()
    est = []
    for seed in range(10):
        x = np.random.default_rng(seed).standard_normal(5000)
        lw = -0.5 * (x - 0.5) ** 2 + 0.5 * x**2
        est.append(knn_kl_loss(knn_indices(x[:, None], 30), 30, log_weights=lw).item())
    dt = time.perf_counter() - t0
    mean = float(np.mean(est))
    ok = abs(mean - 0.125) <= 0.05 and dt < 10
    assert verdict(3, ok, f"mean estimate {mean:.4f} vs 0.125 (tol 0.05), {dt:.1f}s")


def test_c04_log_space_weights(verdict):
    t0 = time.perf_counter()
    arch = PolicyArch(2, 1, (4,))
    worst = 0.0
    for seed in range(5):
        thetas = sample_params(arch, 10 + seed, count=3) * 0.4
        recon = sample_params(arch, 20 + seed, count=3) * 0.4
        trajs, owners = mc_batch(arch, thetas, 2, horizon=2, seed=seed)
        ctx = BatchContext(arch, MC_NORM, thetas, trajs, owners, k=2)
        lam = log_importance_weights(ctx, [dm.tensor(r) for r in recon]).data
        for j, t in enumerate(trajs):
            num = sum(math.exp(traj_log_prob(arch, r, t, MC_NORM).item()) for r in recon)
            den = sum(math.exp(traj_log_prob(arch, th, t, MC_NORM).item()) for th in thetas)
            worst = max(worst, abs(lam[j] - math.log(num / den)))
    thetas, recon = sample_params(MC, 2, count=5), sample_params(MC, 3, count=5)
    trajs, owners = mc_batch(MC, thetas, 2)
    ctx = BatchContext(MC, MC_NORM, thetas, trajs, owners, k=30)
    lam = log_importance_weights(ctx, [dm.tensor(r) for r in recon])
    w = self_normalize(particle_log_weights(ctx, lam)).data
    finite = bool(np.all(np.isfinite(lam.data)) and np.all(np.isfinite(w)))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and finite and max(len(t) for t in trajs) == 999 and dt < 5
    assert verdict(4, ok, f"horizon-2 max |log-space - linear| = {worst:.1e} (tol 1e-12), "
                          f"horizon-999 weights finite: {finite}, {dt:.1f}s")


def test_c05_end_to_end_gradient(verdict):
    t0 = time.perf_counter()
    arch = PolicyArch(2, 1, (3,))
    assert arch.param_count <= 60
    thetas = sample_params(arch, 11, count=2)
    trajs, owners = mc_batch(arch, thetas, 2, horizon=5, seed=11)
    model = AutoencoderModel.initialize(thetas, 2, seed=2)
    ctx = BatchContext(arch, MC_NORM, thetas, trajs, owners, k=3)
    _, grads = loss_and_grad(model, ctx)
    h, worst = 1e-5, 0.0
    for p, g in zip(model.params, grads):
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss_and_grad(model, ctx)[0]
            p[idx] = old - h
            down = loss_and_grad(model, ctx)[0]
            p[idx] = old
            fd[idx] = (up - down) / (2 * h)
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-8))
    dt = time.perf_counter() - t0
    ok = worst < 1e-3 and dt < 30
    assert verdict(5, ok, f"n = {arch.param_count}, {model.param_count} AE parameters, "
                          f"max per-tensor relative error {worst:.1e} (tol 1e-3), {dt:.1f}s")


def test_c06_architecture_fidelity(verdict):
    counts = [param_count(PolicyArch(i, a)) for i, a in ((2, 1), (6, 2), (11, 3))]
    assert verdict(6, counts == [1218, 1412, 1638], f"param counts {counts} (expected [1218, 1412, 1638])")


def test_c07_curation_keeps_the_high_reward_tail(verdict):
    t0 = time.perf_counter()
    max_wins = p99_wins = 0
    rows = []
    for seed in range(10):
        cfg = build_config("desk", overrides={"seed": seed})
        bank = generate_bank("mc", 2500, seed)
        archive = collect(bank, "none", cfg.curation_episodes, seed)
        _, opc = curate_opc(bank, archive, cfg)
        _, apc = curate_apc(bank, archive, cfg)
        ret = evaluate_returns(bank, "speed", seed)
        o, a = ret[opc.ids], ret[apc.ids]
        max_wins += o.max() >= a.max()
        p99_wins += np.percentile(o, 99) >= np.percentile(a, 99)
        rows.append(f"{o.max():.3g}/{a.max():.3g}")
    dt = time.perf_counter() - t0
    ok = max_wins >= 7 and p99_wins >= 7 and dt < 900
    assert verdict(7, ok, f"OPC >= APC on max in {max_wins}/10 and on p99 in {p99_wins}/10 seeds "
                          f"(need 7), {dt:.0f}s; max OPC/APC per seed: {' '.join(rows)}")


def test_c08_pgpe_sanity(verdict):
    t0 = time.perf_counter()
    cfg = preset("mc-standard")
    hits = 0
    for seed in range(10):
        state = init_state([0.0], cfg)
        for _ in range(500):
            state, _, _ = pgpe_step(state, lambda z, s: -((z[:, 0] - 3.0) ** 2), cfg, seed)
            if abs(state.mu[0] - 3.0) < 0.3:
                hits += 1
                break
    rng = np.random.default_rng(8)
    mu, sigma = np.array([0.0]), np.array([1.0])
    z = rng.standard_normal((100_000, 1))
    g = score_mu(z, mu, sigma)[:, 0] * z[:, 0]
    z_score = abs(g.mean() - 1.0) / (g.std(ddof=1) / math.sqrt(len(g)))
    diffs = []
    for _ in range(20_000):
        zz = rng.standard_normal((8, 1))
        r = zz[:, 0] + 0.3 * zz[:, 0] ** 2
        diffs.append(gradient_estimate(zz, r, mu, sigma, "none")[0][0] - gradient_estimate(zz, r, mu, sigma)[0][0])
    diffs = np.array(diffs)
    base_z = abs(diffs.mean()) / (diffs.std(ddof=1) / math.sqrt(len(diffs)))
    dt = time.perf_counter() - t0
    ok = hits >= 9 and z_score < 3 and base_z < 3 and dt < 60
    assert verdict(8, ok, f"bandit converged in {hits}/10 seeds (need 9); unbiasedness {z_score:.2f} SE, "
                          f"baseline shift {base_z:.2f} SE (tol 3), {dt:.1f}s")


def test_c09_pipeline_efficacy(verdict):
    t0 = time.perf_counter()
    cfg = build_config("desk", overrides={"task": "standard", "trajectories_per_policy": 4})
    bank = generate_bank("mc", 2500, 0)
    archive = collect(bank, "none", cfg.curation_episodes, 0)
    _, curated = curate_opc(bank, archive, cfg)
    train_archive = collect(bank, "none", cfg.train_episodes, 0, ids=curated.ids)
    model = train_autoencoder(bank, curated.ids, train_archive, cfg, 0).model
    camp = optimize(model, cfg, range(10))
    reached = camp.reached(90, 300)
    dt = time.perf_counter() - t0
    ok = reached.sum() >= 6 and dt < 3600
    best = " ".join(f"{v:.1f}" for v in camp.returns[:, camp.episodes <= 300].max(axis=1))
    assert verdict(9, ok, f"mean return >= 90 within 300 episodes in {reached.sum()}/10 seeds (need 6), "
                          f"{dt:.0f}s; best curve value per seed: {best}")


def run_stages(out):
    base = ["--preset", "smoke", "--threads", "1", "--seed", "5", "--out", str(out)]
    stages = [["gen"], ["rollout"], ["curate", "--method", "opc"], ["curate", "--method", "apc"],
              ["rollout", "--ids-from", str(out / "curated-opc.opcc")],
              ["train-ae", "--curated", str(out / "curated-opc.opcc")],
              ["optimize", "--task", "standard"], ["grid-eval", "--task", "speed"], ["report", "--task", "speed"]]
    for stage in stages:
        proc = subprocess.run([sys.executable, "-m", "opc", *stage, *base], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
    return {p.name: file_sha256(p) for p in sorted(out.iterdir()) if not p.name.startswith("manifest")}


def test_c10_reproducibility(verdict, tmp_path):
    a = run_stages(tmp_path / "a")
    b = run_stages(tmp_path / "b")
    differ = sorted(k for k in a if a[k] != b.get(k))
    ok = not differ and a.keys() == b.keys() and len(a) >= 12
    assert verdict(10, ok, f"{len(a)} payload artifacts over 9 stages, byte-identical: {not differ}"
                           + (f" (differ: {differ})" if differ else ""))


def test_c11_reacher_bring_up(verdict):
    t0 = time.perf_counter()
    bank = generate_bank("reacher", 1000, 0)
    rates = {task: float(np.mean(evaluate_returns(bank, task, 0) > 0))
             for task in ("speed", "clockwise", "c-clockwise", "radial")}
    dt = time.perf_counter() - t0
    ok = min(rates.values()) >= 0.01 and dt < 300
    shown = ", ".join(f"{k} {v:.1%}" for k, v in rates.items())
    assert verdict(11, ok, f"share of 1000 random policies crossing each threshold (gain 1.0): {shown} "
                           f"(need 1%), {dt:.0f}s")
