"""PGPE over latent codes: a diagonal Gaussian hyper-policy trained with Adam.

The decoder is a black box. Each step draws ``N`` codes, rolls each decoded
policy out once (deterministically) and follows the score-function gradient
of the expected return. ``sigma`` is kept in log space so Adam cannot push
it negative.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .envs import rollout_batch
from .optim import Adam
from .policy import PolicyArch, PolicyPopulation, StateNormalizer

__all__ = [
    "HyperPolicyState",
    "PgpeConfig",
    "PRESETS",
    "Campaign",
    "SIGMA_FLOOR",
    "init_state",
    "score_mu",
    "score_log_sigma",
    "gradient_estimate",
    "pgpe_step",
    "warm_start",
    "warm_start_size",
    "run",
    "run_campaign",
    "make_evaluator",
    "write_curves_csv",
    "preset",
]

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-4
EVAL_SEED_BASE = 10_000


@dataclass(frozen=True)
class PgpeConfig:
    population_size: int = 8
    lr_center: float = 0.11
    lr_std: float = 0.1
    init_sigma: float = 1.0
    decay: float = 0.999
    beta1: float = 0.1
    beta2: float = 0.999
    eps: float = 1e-8
    budget: int = 300  # episodes, warm start included
    baseline: str = "mean"  # or "none"
    # curve points: "center" scores the mean code on fixed evaluation episodes outside the
    # budget; "population" is the mean return of the update's own samples
    curve: str = "center"
    eval_episodes: int = 5

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if min(self.lr_center, self.lr_std, self.init_sigma, self.decay) <= 0:
            raise ValueError("rates, decay and init_sigma must be positive")
        if self.baseline not in ("mean", "none"):
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.curve not in ("center", "population") or self.eval_episodes < 1:
            raise ValueError("curve must be 'center' or 'population' with eval_episodes >= 1")


PRESETS: dict[str, PgpeConfig] = {
    "mc-standard": PgpeConfig(lr_center=0.11, lr_std=0.1, init_sigma=1.0),
    "mc-left": PgpeConfig(lr_center=0.11, lr_std=0.1, init_sigma=1.0),
    "mc-speed": PgpeConfig(lr_center=0.02, lr_std=0.01, init_sigma=1.0),
    "mc-height": PgpeConfig(lr_center=0.01, lr_std=0.1, init_sigma=0.1),
    "reacher": PgpeConfig(lr_center=0.1, lr_std=0.05, init_sigma=1.0),
    "hopper": PgpeConfig(lr_center=0.11, lr_std=0.1, init_sigma=1.0),
    "mc-warm": PgpeConfig(lr_center=0.01, lr_std=0.05, init_sigma=0.1),
    "reacher-warm": PgpeConfig(lr_center=0.1, lr_std=0.05, init_sigma=1.0),
    "hopper-warm": PgpeConfig(lr_center=0.1, lr_std=0.05, init_sigma=1.0),
}


@dataclass
class HyperPolicyState:
    mu: np.ndarray
    log_sigma: np.ndarray
    opt: Adam
    step: int = 0

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)


def init_state(mu, config: PgpeConfig) -> HyperPolicyState:
    mu = np.array(mu, dtype=np.float64).reshape(-1)
    log_sigma = np.full(mu.shape, math.log(max(config.init_sigma, SIGMA_FLOOR)))
    opt = Adam([mu.shape, mu.shape], lr=[config.lr_center, config.lr_std], beta1=config.beta1,
               beta2=config.beta2, eps=config.eps)
    return HyperPolicyState(mu, log_sigma, opt)


def score_mu(z, mu, sigma):
    """``d log N(z; mu, sigma^2) / d mu``."""
    return (np.asarray(z) - mu) / sigma**2


def score_log_sigma(z, mu, sigma):
    """``d log N(z; mu, sigma^2) / d log sigma``."""
    return ((np.asarray(z) - mu) / sigma) ** 2 - 1.0


def gradient_estimate(z, returns, mu, sigma, baseline: str = "mean"):
    """Score-function ascent direction ``(g_mu, g_log_sigma)`` from one population."""
    r = np.asarray(returns, dtype=np.float64)
    if baseline == "mean":
        # leave-one-out mean: each sample's baseline excludes its own return, so no bias
        n = r.size
        r = (r - r.mean()) * (n / (n - 1))
    g_mu = np.mean(r[:, None] * score_mu(z, mu, sigma), axis=0)
    g_ls = np.mean(r[:, None] * score_log_sigma(z, mu, sigma), axis=0)
    return g_mu, g_ls


def pgpe_step(state: HyperPolicyState, evaluate, config: PgpeConfig, seed: int):
    """One update from ``N`` fresh samples; returns ``(state, z, returns)``.

    ``evaluate(z_batch, episode_seeds)`` returns one return per code.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, state.step]))
    sigma = state.sigma
    z = state.mu + sigma * rng.standard_normal((config.population_size, state.mu.size))
    ep_seeds = rng.integers(0, 2**31 - 1, size=config.population_size)
    returns = np.asarray(evaluate(z, ep_seeds), dtype=np.float64)
    bad = ~np.isfinite(returns)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise FloatingPointError(f"non-finite return for population member {i}, z={z[i].tolist()}")
    g_mu, g_ls = gradient_estimate(z, returns, state.mu, sigma, config.baseline)
    state.opt.step([state.mu, state.log_sigma], [-g_mu, -g_ls])
    np.maximum(state.log_sigma, math.log(SIGMA_FLOOR), out=state.log_sigma)
    state.opt.scale_lr(config.decay)
    state.step += 1
    return state, z, returns


def warm_start_size(latent_dim: int) -> int:
    """Warm-start sample size, linear in the latent dimension (3 -> 40, 5 -> 56, 8 -> 80)."""
    return 16 + 8 * latent_dim


def warm_start(evaluate, latent_dim: int, n_samples: int, seed: int, codes=None):
    """Best of ``n_samples`` codes; returns ``(z, return, episodes_used)``.

    Codes come from N(0, I), or are drawn without replacement from ``codes``
    (e.g. the encoded dataset) when given. Ties go to the lowest index.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5753]))
    if codes is None:
        z = rng.standard_normal((n_samples, latent_dim))
    else:
        codes = np.atleast_2d(codes)
        z = codes[rng.choice(len(codes), size=min(n_samples, len(codes)), replace=False)]
    ep_seeds = rng.integers(0, 2**31 - 1, size=len(z))
    returns = np.asarray(evaluate(z, ep_seeds), dtype=np.float64)
    best = int(np.argmax(returns))
    return z[best].copy(), float(returns[best]), len(z)


@dataclass
class Campaign:
    """Per-seed learning curves on a shared episode axis."""

    seeds: list[int]
    episodes: np.ndarray  # (S,) cumulative episodes after each update
    returns: np.ndarray  # (n_seeds, S) curve value after each update
    warm_returns: list[float] = field(default_factory=list)

    @property
    def mean(self) -> np.ndarray:
        return self.returns.mean(axis=0)

    @property
    def ci95(self) -> np.ndarray:
        """Half-width of the normal-approximation 95% interval (0 for one seed)."""
        n = len(self.seeds)
        if n < 2:
            log.warning("a single seed gives a degenerate (zero-width) confidence interval")
            return np.zeros(self.returns.shape[1])
        return 1.96 * self.returns.std(axis=0, ddof=1) / math.sqrt(n)

    def reached(self, threshold: float, within: int) -> np.ndarray:
        """Per seed: did some update within ``within`` episodes score ``>= threshold``?"""
        mask = self.episodes <= within
        return np.any(self.returns[:, mask] >= threshold, axis=1)


def run(config: PgpeConfig, evaluate, latent_dim: int, seed: int, warm_samples: int = 0, codes=None,
        init_mu=None):
    """One optimisation run until the episode budget is spent.

    Returns ``(episodes, returns, state, warm_return)``. Warm-start episodes
    count against the budget; evaluation episodes of the centre do not.
    """
    used, warm_ret = 0, float("nan")
    mu = np.zeros(latent_dim) if init_mu is None else init_mu
    if warm_samples:
        mu, warm_ret, used = warm_start(evaluate, latent_dim, warm_samples, seed, codes)
    state = init_state(mu, config)
    eval_seeds = [EVAL_SEED_BASE + i for i in range(config.eval_episodes)]
    eps, rets = [], []
    while used + config.population_size <= config.budget:
        state, _, r = pgpe_step(state, evaluate, config, seed)
        used += config.population_size
        eps.append(used)
        if config.curve == "center":
            center = np.repeat(state.mu[None], len(eval_seeds), axis=0)
            rets.append(float(np.mean(evaluate(center, eval_seeds))))
        else:
            rets.append(float(r.mean()))
    return np.array(eps), np.array(rets), state, warm_ret


def run_campaign(config: PgpeConfig, evaluate, latent_dim: int, seeds, warm_samples: int = 0, codes=None,
                 init_mu=None) -> Campaign:
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("at least one seed is required")
    curves, warm, axis = [], [], None
    for s in seeds:
        eps, rets, _, wr = run(config, evaluate, latent_dim, s, warm_samples, codes, init_mu)
        axis = eps
        curves.append(rets)
        warm.append(wr)
    return Campaign(seeds, axis, np.array(curves), warm)


def make_evaluator(arch: PolicyArch, normalizer: StateNormalizer, env, task, decode=None):
    """``evaluate(z, seeds)``: decode each code and roll it out once, deterministically.

    With ``decode=None`` codes are policy parameters themselves (parameter-space PGPE).
    """

    def evaluate(z, seeds):
        thetas = np.atleast_2d(z) if decode is None else decode(np.atleast_2d(z))
        _, returns = rollout_batch(PolicyPopulation(arch, thetas, normalizer), env, task, seeds)
        return returns

    return evaluate


def write_curves_csv(path, campaign: Campaign) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "episode", "return"])
        for s, curve in zip(campaign.seeds, campaign.returns):
            for e, r in zip(campaign.episodes.tolist(), curve.tolist()):
                w.writerow([s, e, repr(r)])


def preset(name: str, **overrides) -> PgpeConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown PGPE preset {name!r}; available: {sorted(PRESETS)}")
    return replace(PRESETS[name], **{k: v for k, v in overrides.items() if v is not None})
