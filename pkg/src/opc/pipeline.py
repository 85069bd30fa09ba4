"""Stage functions shared by the command line and the end-to-end tests.

Every stage is a pure function of its inputs and seed: episode seeds are
derived from ``(seed, policy id, episode index)``, never from batch order.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, fields

import numpy as np

from . import compression, curation, density, pgpe
from .envs import make_env, rollout_batch
from .policy import PolicyArch, PolicyPopulation, StateNormalizer, sample_params
from .store import PolicyBank, TrajectoryArchive

__all__ = [
    "RunConfig",
    "PRESETS",
    "ConfigError",
    "load_config_file",
    "build_config",
    "episode_seeds",
    "generate_bank",
    "collect",
    "evaluate_returns",
    "fit_occupancies",
    "curate_opc",
    "curate_apc",
    "curate",
    "train_autoencoder",
    "optimize",
    "parse_seeds",
]

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    env: str = "mc"
    task: str = "standard"
    count: int = 2500
    seed: int = 0
    percentile: float = 0.05
    method: str = "opc"
    curation_episodes: int = 2
    train_episodes: int = 20
    n_components: int = 4
    stride: int = 4
    particles: int = 2000
    m_ref: int = 50
    k_n: int = 10
    probe_states: int = 256
    latent_dim: int = 2
    loss: str = "OPC"
    batch_size: int = 5
    inner_iterations: int = 10
    k_nn: int = 30
    learning_rate: float = 1e-3
    trajectories_per_policy: int = 20
    outer_iterations: int = 0  # 0: coverage-derived
    pgpe_preset: str = "mc-warm"
    budget: int = 300
    warm_start: bool = True
    warm_samples: int = 0  # 0: 16 + 8 * latent_dim
    warm_from_dataset: bool = False
    curve: str = "center"
    eval_episodes: int = 5
    opt_seeds: str = "0-9"
    grid_per_dim: int = 11
    grid_low: float = -3.0
    grid_high: float = 3.0
    grid_episodes: int = 1
    hist_bins: int = 20
    threads: int = 1

    def __post_init__(self):
        if self.env not in ("mc", "reacher"):
            raise ConfigError(f"env must be 'mc' or 'reacher', got {self.env!r}")
        if not 0 < self.percentile <= 1:
            raise ConfigError("percentile must lie in (0, 1]")
        if self.method not in ("opc", "apc"):
            raise ConfigError(f"method must be 'opc' or 'apc', got {self.method!r}")
        if self.loss.upper() not in ("OPC", "APC"):
            raise ConfigError(f"loss must be OPC or APC, got {self.loss!r}")
        if self.pgpe_preset not in pgpe.PRESETS:
            raise ConfigError(f"unknown PGPE preset {self.pgpe_preset!r}; available: {sorted(pgpe.PRESETS)}")
        if self.count < 1 or self.latent_dim < 1 or self.threads < 1:
            raise ConfigError("count, latent_dim and threads must be positive")

    def train_config(self) -> compression.TrainConfig:
        return compression.TrainConfig(
            batch_size=self.batch_size, inner_iterations=self.inner_iterations, k_nn=self.k_nn,
            learning_rate=self.learning_rate, loss=self.loss.upper(),
            trajectories_per_policy=self.trajectories_per_policy, probe_states=self.probe_states,
            outer_iterations=self.outer_iterations or None)

    def pgpe_config(self) -> pgpe.PgpeConfig:
        return dataclasses.replace(pgpe.PRESETS[self.pgpe_preset], budget=self.budget, curve=self.curve,
                                   eval_episodes=self.eval_episodes)


PRESETS: dict[str, dict] = {
    "desk": {},
    "full": {"count": 50000},
    "smoke": {"count": 200, "curation_episodes": 1, "train_episodes": 2, "trajectories_per_policy": 2,
              "outer_iterations": 3, "inner_iterations": 2, "particles": 500, "m_ref": 10, "opt_seeds": "0",
              "budget": 48, "grid_per_dim": 3},
}


def _coerce(name: str, value: str):
    kind = {f.name: f.type for f in fields(RunConfig)}.get(name)
    if kind is None:
        raise ConfigError(f"unknown config key {name!r}")
    try:
        if kind == "bool":
            low = value.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(value)
            return low in ("1", "true", "yes", "on")
        return {"int": int, "float": float, "str": str}[kind](value.strip())
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot read {value!r} as {kind}") from None


def load_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = open(path).read()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = _coerce(key.replace("-", "_"), value)
    return out


def build_config(preset: str = "desk", file: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Preset defaults, then the config file, then explicit overrides."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; available: {sorted(PRESETS)}")
    values = dict(PRESETS[preset])
    if file:
        values.update(load_config_file(file))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = _coerce(k, v) if isinstance(v, str) else v
    try:
        return RunConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def parse_seeds(text: str) -> list[int]:
    """``"0-9"`` or ``"1,4,7"`` (ranges allowed inside lists)."""
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if "-" in part[1:]:
            a, b = part.split("-", 1)
            out += list(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise ConfigError(f"no seeds in {text!r}")
    return out


# ------------------------------------------------------------------ stages


def _env_bits(env_name: str):
    env = make_env(env_name)
    return env, PolicyArch.for_env(env.spec), StateNormalizer.from_spec(env.spec)


def episode_seeds(seed: int, policy_ids, episodes: int) -> np.ndarray:
    """``(len(ids), episodes)`` episode seeds, a function of (seed, id, episode) only."""
    return np.array([[np.random.SeedSequence([seed, int(p), e]).generate_state(1)[0] for e in range(episodes)]
                     for p in policy_ids], dtype=np.int64)


def generate_bank(env_name: str, count: int, seed: int) -> PolicyBank:
    env, arch, _ = _env_bits(env_name)
    return PolicyBank(arch, sample_params(arch, seed, count), seed, env_name)


def collect(bank: PolicyBank, task: str, episodes: int, seed: int, ids=None, chunk: int = 2500
            ) -> TrajectoryArchive:
    """Deterministic rollouts, ``episodes`` per policy, into an archive."""
    env, arch, norm = _env_bits(bank.env)
    ids = np.arange(bank.count) if ids is None else np.asarray(ids, dtype=np.int64)
    seeds = episode_seeds(seed, ids, episodes)
    owner = np.repeat(ids, episodes)
    flat = seeds.reshape(-1)
    trajs = []
    for s in range(0, len(flat), chunk):
        pop = PolicyPopulation(arch, bank.thetas[owner[s : s + chunk]], norm)
        t, _ = rollout_batch(pop, env, task, flat[s : s + chunk])
        trajs += t
    return TrajectoryArchive.from_trajectories(bank.env, owner, trajs, {"task": task, "seed": seed})


def evaluate_returns(bank: PolicyBank, task: str, seed: int, ids=None, chunk: int = 2500) -> np.ndarray:
    """One deterministic episode return per policy."""
    env, arch, norm = _env_bits(bank.env)
    ids = np.arange(bank.count) if ids is None else np.asarray(ids, dtype=np.int64)
    seeds = episode_seeds(seed, ids, 1)[:, 0]
    out = []
    for s in range(0, len(ids), chunk):
        pop = PolicyPopulation(arch, bank.thetas[ids[s : s + chunk]], norm)
        out.append(rollout_batch(pop, env, task, seeds[s : s + chunk])[1])
    return np.concatenate(out)


def _policy_states(archive: TrajectoryArchive, ids, stride: int):
    by_owner: dict[int, list] = {int(i): [] for i in ids}
    for j, pid in enumerate(archive.policy_ids.tolist()):
        if pid in by_owner:
            a, b = archive.state_offsets[j], archive.state_offsets[j + 1]
            by_owner[pid].append(density.downsample(archive.states[a:b], stride))
    missing = [i for i, v in by_owner.items() if not v]
    if missing:
        raise KeyError(f"no trajectories for policies {missing[:5]}")
    return [np.concatenate(by_owner[int(i)]) for i in ids]


def fit_occupancies(archive: TrajectoryArchive, ids, cfg: RunConfig, batch: int = 256):
    """One diagonal GMM per policy on its downsampled visited states."""
    sets = _policy_states(archive, ids, cfg.stride)
    models = []
    for s in range(0, len(sets), batch):
        seeds = [np.random.SeedSequence([cfg.seed, int(i), 0x474D]) for i in ids[s : s + batch]]
        m, _ = density.fit_gmm_batch(sets[s : s + batch], cfg.n_components, seeds)
        models += m
    return models


def curate_opc(bank: PolicyBank, archive: TrajectoryArchive, cfg: RunConfig):
    ids = np.arange(bank.count)
    gmms = fit_occupancies(archive, ids, cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x4F5043]))
    ref = np.sort(rng.choice(len(ids), size=min(cfg.m_ref, len(ids)), replace=False))
    mixture = density.uniform_mixture([gmms[i] for i in ref])
    particles = [g.sample(cfg.particles, np.random.default_rng(np.random.SeedSequence([cfg.seed, int(i), 0x5054])))
                 for i, g in zip(ids, gmms)]
    table = curation.score_opc(list(gmms), mixture, particles, ids=ids)
    table.meta.update({"m_ref": len(ref), "particles": cfg.particles, "n_components": cfg.n_components})
    return table, curation.threshold(table, cfg.percentile)


def curate_apc(bank: PolicyBank, archive: TrajectoryArchive, cfg: RunConfig):
    _, arch, norm = _env_bits(bank.env)
    trajs = [archive.trajectory(j) for j in range(len(archive))]
    probe = curation.sample_probe_states(trajs, cfg.probe_states, cfg.seed)
    table = curation.score_apc(arch, bank.thetas, probe, cfg.k_n, norm, ids=np.arange(bank.count))
    return table, curation.threshold(table, cfg.percentile)


def curate(bank, archive, cfg: RunConfig):
    table, data = (curate_opc if cfg.method == "opc" else curate_apc)(bank, archive, cfg)
    data.provenance.update({"seed": cfg.seed, "population": bank.count})
    return table, data


def train_autoencoder(bank: PolicyBank, curated_ids, archive: TrajectoryArchive, cfg: RunConfig, seed: int,
                      checkpoint=None):
    _, arch, norm = _env_bits(bank.env)
    ids = np.asarray(curated_ids, dtype=np.int64)
    thetas = bank.thetas[ids]
    trajs = [archive.for_policy(int(i)) for i in ids]
    model = compression.AutoencoderModel.initialize(thetas, cfg.latent_dim, seed)
    return compression.train(model, arch, norm, thetas, trajs, cfg.train_config(), seed, ids=ids,
                             checkpoint=checkpoint)


def optimize(model: compression.AutoencoderModel | None, cfg: RunConfig, seeds, codes=None) -> pgpe.Campaign:
    """WS-PGPE (or plain PGPE) in latent space; ``model=None`` searches parameter space."""
    env, arch, norm = _env_bits(cfg.env)
    evaluate = pgpe.make_evaluator(arch, norm, env, cfg.task, None if model is None else model.decode)
    dim = arch.param_count if model is None else model.k
    warm = 0
    if cfg.warm_start and model is not None:
        warm = cfg.warm_samples or pgpe.warm_start_size(model.k)
    return pgpe.run_campaign(cfg.pgpe_config(), evaluate, dim, seeds, warm,
                             codes if cfg.warm_from_dataset else None)
