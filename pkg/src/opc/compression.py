"""Autoencoder over policy weight space and its mini-batch training loop.

Encoder ``n -> 25 -> 10 -> k`` and decoder ``k -> 10 -> 25 -> n``, ELU on
hidden layers, linear outputs. Weights are standardised per index with the
curated dataset's statistics before encoding and restored after decoding.

Training samples ``P`` policies uniformly at random, reuses their stored
trajectories for ``I`` consecutive Adam steps and recomputes the importance
weights at each of them.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffmath as dm
from .envs import rollout_batch
from .occupancy_loss import BatchContext, NumericalError, action_matching_loss, opc_loss
from .optim import Adam
from .policy import PolicyArch, PolicyPopulation, StateNormalizer

__all__ = [
    "AutoencoderModel",
    "TrainConfig",
    "TrainResult",
    "LossRecord",
    "ae_param_count",
    "coverage_iterations",
    "train",
    "loss_and_grad",
    "with_overrides",
    "grid_points",
    "grid_eval",
    "write_loss_csv",
    "write_grid_csv",
    "STD_FLOOR",
]

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8
HIDDEN = (25, 10)


def _layer_dims(n: int, k: int, hidden=HIDDEN) -> list[tuple[int, int]]:
    enc = [n, *hidden, k]
    dec = [k, *reversed(hidden), n]
    return list(zip(enc[:-1], enc[1:])) + list(zip(dec[:-1], dec[1:]))


def ae_param_count(n: int, k: int, hidden=HIDDEN) -> int:
    return sum(a * b + b for a, b in _layer_dims(n, k, hidden))


class AutoencoderModel:
    """Weights are a flat list ``[W0, b0, W1, b1, ...]``; the first half encodes."""

    def __init__(self, n: int, k: int, params, mean, std, hidden=HIDDEN):
        self.n, self.k, self.hidden = int(n), int(k), tuple(hidden)
        self.params = [np.array(p, dtype=np.float64) for p in params]
        self.mean = np.array(mean, dtype=np.float64)
        self.std = np.maximum(np.array(std, dtype=np.float64), STD_FLOOR)
        dims = _layer_dims(self.n, self.k, self.hidden)
        expected = [s for a, b in dims for s in ((a, b), (b,))]
        got = [p.shape for p in self.params]
        if got != expected:
            raise dm.ShapeError("autoencoder", got, expected)
        if self.mean.shape != (self.n,) or self.std.shape != (self.n,):
            raise dm.ShapeError("standardisation", self.mean.shape, (self.n,))

    @classmethod
    def initialize(cls, thetas, k: int, seed: int, hidden=HIDDEN) -> AutoencoderModel:
        """Kaiming-uniform (fan-in) weights, zero biases, stats from ``thetas``."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        n = thetas.shape[1]
        rng = np.random.default_rng(seed)
        params = []
        for a, b in _layer_dims(n, k, hidden):
            bound = math.sqrt(6.0 / a)
            params += [rng.uniform(-bound, bound, size=(a, b)), np.zeros(b)]
        return cls(n, k, params, thetas.mean(axis=0), thetas.std(axis=0), hidden)

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> AutoencoderModel:
        return AutoencoderModel(self.n, self.k, self.params, self.mean, self.std, self.hidden)

    def standardize(self, thetas):
        return (np.asarray(thetas, dtype=np.float64) - self.mean) / self.std

    def destandardize(self, x):
        return np.asarray(x, dtype=np.float64) * self.std + self.mean

    # numpy forward ---------------------------------------------------------

    def _run(self, h, layers):
        last = layers[-1]
        for i in layers:
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i != last:
                h = np.where(h < 0, np.expm1(np.minimum(h, 0.0)), h)
        return h

    def encode(self, thetas) -> np.ndarray:
        thetas = np.asarray(thetas, dtype=np.float64)
        if thetas.shape[-1] != self.n:
            raise dm.ShapeError("encode", thetas.shape, (self.n,))
        return self._run(self.standardize(thetas), range(self.n_layers // 2))

    def decode(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.k:
            raise dm.ShapeError("decode", z.shape, (self.k,))
        return self.destandardize(self._run(z, range(self.n_layers // 2, self.n_layers)))

    # differentiable forward ------------------------------------------------

    def _run_tensor(self, h, weights, layers):
        last = layers[-1]
        for i in layers:
            h = h @ weights[2 * i] + weights[2 * i + 1]
            if i != last:
                h = dm.elu(h)
        return h

    def reconstruct_tensor(self, weights, thetas) -> dm.Tensor:
        """``decode(encode(thetas))`` on the tape, differentiable in ``weights``."""
        half = self.n_layers // 2
        z = self._run_tensor(dm.as_tensor(self.standardize(thetas)), weights, list(range(half)))
        out = self._run_tensor(z, weights, list(range(half, self.n_layers)))
        return out * self.std + self.mean

    def decode_tensor(self, weights, z) -> dm.Tensor:
        out = self._run_tensor(dm.as_tensor(z), weights, list(range(self.n_layers // 2, self.n_layers)))
        return out * self.std + self.mean


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 5
    inner_iterations: int = 10
    k_nn: int = 30
    learning_rate: float = 1e-3
    loss: str = "OPC"
    trajectories_per_policy: int = 20
    confidence: float = 0.99
    n_max: int = 4000
    probe_states: int = 256
    tanh_jacobian: bool = True
    outer_iterations: int | None = None  # None: derived from coverage

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.inner_iterations < 1:
            raise ValueError("inner_iterations must be >= 1")
        if self.loss.upper() not in ("OPC", "APC"):
            raise ValueError(f"loss must be OPC or APC, got {self.loss!r}")


@dataclass
class LossRecord:
    outer: int
    inner: int
    loss: float
    batch: tuple[int, ...]


@dataclass
class TrainResult:
    model: AutoencoderModel
    log: list[LossRecord] = field(default_factory=list)
    outer_iterations: int = 0


def coverage_iterations(dataset_size: int, batch_size: int, confidence: float) -> int:
    """Smallest ``T`` with ``(1 - P/|D|)^T <= 1 - confidence``."""
    if not 0 < batch_size <= dataset_size:
        raise ValueError("need 0 < P <= |D|")
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    if batch_size == dataset_size:
        return 1
    miss = 1.0 - batch_size / dataset_size
    t = max(1, math.ceil(math.log(1.0 - confidence) / math.log(miss)))
    while t > 1 and miss ** (t - 1) <= 1.0 - confidence:
        t -= 1
    while miss**t > 1.0 - confidence:
        t += 1
    return t


def _batch_loss(model, weights, ctx, kind, probe):
    recon = model.reconstruct_tensor(weights, ctx.thetas)
    rows = [recon[i] for i in range(ctx.n_policies)]
    if kind == "OPC":
        return opc_loss(ctx, rows)
    return action_matching_loss(ctx.arch, ctx.thetas, rows, probe, ctx.normalizer)


def loss_and_grad(model: AutoencoderModel, ctx: BatchContext, kind: str = "OPC", probe=None):
    """Loss of one batch and its gradient w.r.t. every autoencoder weight."""
    weights = [dm.tensor(p, requires_grad=True) for p in model.params]
    loss = _batch_loss(model, weights, ctx, kind.upper(), probe)
    if not np.isfinite(loss.data):
        raise NumericalError(f"non-finite loss on batch {ctx.policy_ids.tolist()}")
    return float(loss.data), dm.grad(loss, weights)


def train(model: AutoencoderModel, arch: PolicyArch, normalizer: StateNormalizer, thetas, trajectories,
          config: TrainConfig, seed: int, ids=None, checkpoint=None) -> TrainResult:
    """Train ``model`` in place on the dataset ``thetas`` (one row per policy).

    ``trajectories[i]`` lists the stored trajectories of policy ``i``; the
    first ``config.trajectories_per_policy`` are used. ``checkpoint(model,
    outer)`` is called after every outer iteration. A non-finite loss raises
    :class:`NumericalError`, leaving the model at its last finite state.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    d = len(thetas)
    ids = np.arange(d) if ids is None else np.asarray(ids)
    if len(trajectories) != d:
        raise ValueError("one trajectory list per dataset policy is required")
    short = [int(ids[i]) for i in range(d) if len(trajectories[i]) < config.trajectories_per_policy]
    if short:
        raise ValueError(f"policies {short[:5]} have fewer than {config.trajectories_per_policy} trajectories")
    kind = config.loss.upper()
    p = min(config.batch_size, d)
    outer = config.outer_iterations or coverage_iterations(d, p, config.confidence)
    rng = np.random.default_rng(seed)
    opt = Adam([w.shape for w in model.params], lr=config.learning_rate)
    result = TrainResult(model, outer_iterations=outer)
    m = config.trajectories_per_policy
    for it in range(outer):
        pick = np.sort(rng.choice(d, size=p, replace=False))
        trajs = [t for i in pick for t in trajectories[i][:m]]
        owners = np.repeat(np.arange(p), m)
        ctx = BatchContext(arch, normalizer, thetas[pick], trajs, owners, k=config.k_nn, n_max=config.n_max,
                           tanh_jacobian=config.tanh_jacobian, policy_ids=ids[pick])
        probe = None
        if kind == "APC":
            pool = ctx.particles.states
            probe = pool[rng.choice(len(pool), size=min(config.probe_states, len(pool)), replace=False)]
        for inner in range(config.inner_iterations):
            value, grads = loss_and_grad(model, ctx, kind, probe)
            opt.step(model.params, grads)
            result.log.append(LossRecord(it, inner, value, tuple(int(i) for i in ids[pick])))
        if checkpoint is not None:
            checkpoint(model, it)
        if it % 10 == 0:
            log.info("outer %d/%d loss %.5g", it + 1, outer, result.log[-1].loss)
    return result


def write_loss_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "outer", "inner", "loss", "batch_ids"])
        for s, r in enumerate(records):
            w.writerow([s, r.outer, r.inner, repr(r.loss), " ".join(map(str, r.batch))])


# ---------------------------------------------------------- latent grids


def grid_points(k: int, lo: float = -3.0, hi: float = 3.0, per_dim: int = 11, dims=(0, 1)) -> np.ndarray:
    """A uniform latent grid; for ``k > 3`` a 2-D slice over ``dims`` with the rest at 0."""
    axis = np.linspace(lo, hi, per_dim) if per_dim > 1 else np.array([(lo + hi) / 2])
    if k <= 3:
        return np.array(list(itertools.product(axis, repeat=k)), dtype=np.float64).reshape(-1, k)
    pts = np.zeros((per_dim * per_dim, k))
    pts[:, list(dims)] = np.array(list(itertools.product(axis, repeat=2)))
    return pts


def grid_eval(model: AutoencoderModel, arch: PolicyArch, normalizer: StateNormalizer, env, task, points,
              episodes: int = 1, seed: int = 0) -> np.ndarray:
    """Mean deterministic return of the decoded policy at every latent point."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    thetas = model.decode(points)
    reps = np.repeat(thetas, episodes, axis=0)
    seeds = [seed + e for _ in range(len(points)) for e in range(episodes)]
    _, returns = rollout_batch(PolicyPopulation(arch, reps, normalizer), env, task, seeds)
    return returns.reshape(len(points), episodes).mean(axis=1)


def write_grid_csv(path, points, returns) -> None:
    points = np.atleast_2d(points)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"z{i}" for i in range(points.shape[1])] + ["mean_return"])
        for z, r in zip(points.tolist(), np.asarray(returns).tolist()):
            w.writerow([repr(v) for v in z] + [repr(r)])


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
