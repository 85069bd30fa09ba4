"""Gaussian MLP policies stored as flat parameter vectors.

Layout of a flat vector, row-major, in order: hidden weights and biases,
then a mean head and a log-std head (both ``hidden[-1] -> act_dim``). The
deterministic action is ``tanh(mean)``; the stochastic one squashes a
Gaussian draw around the mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import log, pi

import numpy as np

from . import diffmath as dm
from .envs import CmpSpec, Trajectory

__all__ = [
    "PolicyArch",
    "StateNormalizer",
    "PolicyPopulation",
    "param_count",
    "sample_params",
    "unflatten",
    "flatten",
    "log_std_clamp",
    "forward_batch",
    "action_distribution",
    "act",
    "traj_log_prob",
    "traj_log_probs",
    "PackedTrajectories",
    "LOG_STD_MIN",
    "LOG_STD_MAX",
    "ATANH_CLAMP",
]

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
ATANH_CLAMP = 1.0 - 1e-6
WEIGHT_RANGE = 2.5
_HALF_LOG_2PI = 0.5 * log(2 * pi)


@dataclass(frozen=True)
class PolicyArch:
    obs_dim: int
    act_dim: int
    hidden: tuple[int, ...] = (32, 32)

    @property
    def layers(self) -> list[tuple[str, tuple[int, ...]]]:
        """(name, shape) of each parameter block in flat-vector order."""
        out = []
        fan_in = self.obs_dim
        for i, h in enumerate(self.hidden):
            out += [(f"w{i}", (fan_in, h)), (f"b{i}", (h,))]
            fan_in = h
        out += [("w_mean", (fan_in, self.act_dim)), ("b_mean", (self.act_dim,))]
        out += [("w_logstd", (fan_in, self.act_dim)), ("b_logstd", (self.act_dim,))]
        return out

    @property
    def offsets(self) -> dict[str, tuple[int, int, tuple[int, ...]]]:
        table, start = {}, 0
        for name, shape in self.layers:
            stop = start + int(np.prod(shape))
            table[name] = (start, stop, shape)
            start = stop
        return table

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layers)

    @classmethod
    def for_env(cls, spec: CmpSpec, hidden: tuple[int, ...] = (32, 32)) -> PolicyArch:
        return cls(spec.state_dim, spec.action_dim, tuple(hidden))


def param_count(arch: PolicyArch) -> int:
    return arch.param_count


@dataclass(frozen=True)
class StateNormalizer:
    """Fixed affine map of the state box onto ``[-1, 1]`` per dimension."""

    center: tuple[float, ...]
    half_range: tuple[float, ...]

    def __post_init__(self):
        if any(h <= 0 for h in self.half_range):
            raise ValueError("half_range must be positive")

    @classmethod
    def from_spec(cls, spec: CmpSpec) -> StateNormalizer:
        lo, hi = np.asarray(spec.state_low, float), np.asarray(spec.state_high, float)
        return cls(tuple((lo + hi) / 2), tuple((hi - lo) / 2))

    @classmethod
    def identity(cls, dim: int) -> StateNormalizer:
        return cls((0.0,) * dim, (1.0,) * dim)

    def __call__(self, states) -> np.ndarray:
        return (np.asarray(states, dtype=np.float64) - np.asarray(self.center)) / np.asarray(self.half_range)


def sample_params(arch: PolicyArch, seed: int, count: int | None = None) -> np.ndarray:
    """i.i.d. Uniform(-2.5, 2.5) weights; shape ``(P,)`` or ``(count, P)``."""
    rng = np.random.default_rng(seed)
    shape = (arch.param_count,) if count is None else (count, arch.param_count)
    return rng.uniform(-WEIGHT_RANGE, WEIGHT_RANGE, size=shape)


def unflatten(arch: PolicyArch, theta):
    """Split a flat vector (numpy array or tensor) into named blocks.

    A leading batch axis on a numpy ``theta`` is kept.
    """
    if isinstance(theta, dm.Tensor):
        if theta.shape != (arch.param_count,):
            raise dm.ShapeError("unflatten", theta.shape, (arch.param_count,))
        return {k: theta[a:b].reshape(s) for k, (a, b, s) in arch.offsets.items()}
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape[-1] != arch.param_count:
        raise ValueError(f"parameter vector has length {theta.shape[-1]}, arch needs {arch.param_count}")
    lead = theta.shape[:-1]
    return {k: theta[..., a:b].reshape(lead + s) for k, (a, b, s) in arch.offsets.items()}


def flatten(arch: PolicyArch, blocks: dict) -> np.ndarray:
    return np.concatenate([np.asarray(blocks[name]).reshape(-1) for name, _ in arch.layers])


def log_std_clamp(raw):
    if isinstance(raw, dm.Tensor):
        return dm.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    return np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)


def _elu(x):
    return np.where(x < 0, np.expm1(np.minimum(x, 0.0)), x)


def forward_batch(arch: PolicyArch, thetas, x):
    """Mean and clamped log-std heads for a batch of policies.

    ``thetas`` is ``(B, P)`` and ``x`` normalised states of shape ``(B, S, d)``
    (or ``(S, d)`` shared by every policy). Returns two ``(B, S, a)`` arrays.
    """
    blocks = unflatten(arch, np.atleast_2d(thetas))
    h = np.asarray(x, dtype=np.float64)
    for i in range(len(arch.hidden)):
        h = _elu(np.matmul(h, blocks[f"w{i}"]) + blocks[f"b{i}"][:, None, :])
    mean = np.matmul(h, blocks["w_mean"]) + blocks["b_mean"][:, None, :]
    raw = np.matmul(h, blocks["w_logstd"]) + blocks["b_logstd"][:, None, :]
    return mean, log_std_clamp(raw)


def action_distribution(arch: PolicyArch, theta, x):
    """Differentiable pre-squash ``(mean, log_std)`` of one policy at states ``x``."""
    blocks = unflatten(arch, theta)
    h = dm.as_tensor(x)
    for i in range(len(arch.hidden)):
        h = dm.elu(h @ blocks[f"w{i}"] + blocks[f"b{i}"])
    mean = h @ blocks["w_mean"] + blocks["b_mean"]
    log_std = log_std_clamp(h @ blocks["w_logstd"] + blocks["b_logstd"])
    return mean, log_std


def _sample_actions(mean, log_std, rngs, deterministic):
    if deterministic:
        return np.tanh(mean)
    noise = np.stack([r.standard_normal(mean.shape[1:]) for r in rngs])
    return np.clip(np.tanh(mean + np.exp(log_std) * noise), -1.0, 1.0)


def act(arch: PolicyArch, params, state, normalizer: StateNormalizer, deterministic: bool = True,
        rng: np.random.Generator | None = None) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    if state.shape[-1] != arch.obs_dim:
        raise ValueError(f"state has {state.shape[-1]} dims, policy expects {arch.obs_dim}")
    mean, log_std = forward_batch(arch, params, normalizer(state).reshape(1, -1, arch.obs_dim))
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_std))):
        raise FloatingPointError("policy network produced a non-finite output")
    if deterministic:
        out = np.tanh(mean[0])
    else:
        rng = rng if rng is not None else np.random.default_rng()
        noise = rng.standard_normal(mean[0].shape)
        out = np.clip(np.tanh(mean[0] + np.exp(log_std[0]) * noise), -1.0, 1.0)
    return out.reshape(state.shape[:-1] + (arch.act_dim,))


class PolicyPopulation:
    """Row ``b`` of the observation batch is acted on by ``thetas[b]``.

    Instances are the ``policy_fn`` argument of :func:`opc.envs.rollout_batch`.
    """

    def __init__(self, arch: PolicyArch, thetas, normalizer: StateNormalizer):
        self.arch = arch
        self.thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        self.normalizer = normalizer

    def __call__(self, obs, rngs, deterministic=True):
        x = self.normalizer(obs)[:, None, :]
        mean, log_std = forward_batch(self.arch, self.thetas, x)
        mean, log_std = mean[:, 0], log_std[:, 0]
        bad = ~np.all(np.isfinite(mean), axis=-1)
        if bad.any():
            raise FloatingPointError(f"policy {int(np.flatnonzero(bad)[0])} produced a non-finite output")
        return _sample_actions(mean, log_std, rngs, deterministic)


def _presquash(actions):
    a = np.clip(np.asarray(actions, dtype=np.float64), -ATANH_CLAMP, ATANH_CLAMP)
    return np.arctanh(a), np.log1p(-a * a)


def step_log_probs(arch, theta, states, actions, normalizer, tanh_jacobian=True) -> dm.Tensor:
    """Per-step ``log pi(a_t | s_t)`` as an ``(S,)`` tensor."""
    u, log_jac = _presquash(actions)
    mean, log_std = action_distribution(arch, theta, normalizer(states))
    z = (u - mean) * dm.exp(-log_std)
    per_dim = -0.5 * z * z - log_std - _HALF_LOG_2PI
    lp = dm.sum(per_dim, axis=-1)
    if tanh_jacobian:
        lp = lp - log_jac.sum(axis=-1)
    return lp


def traj_log_prob(arch: PolicyArch, theta, trajectory: Trajectory, normalizer: StateNormalizer,
                  tanh_jacobian: bool = True) -> dm.Tensor:
    """``sum_t log pi(a_t | s_t)`` over one trajectory, differentiable in ``theta``."""
    theta = dm.as_tensor(theta)
    return dm.sum(step_log_probs(arch, theta, trajectory.states[:-1], trajectory.actions, normalizer,
                                 tanh_jacobian))


class PackedTrajectories:
    """Trajectories concatenated for one-shot likelihood evaluation."""

    def __init__(self, trajectories):
        self.count = len(trajectories)
        self.states = np.concatenate([t.states[:-1] for t in trajectories])
        self.actions = np.concatenate([t.actions for t in trajectories])
        self.segment = np.repeat(np.arange(self.count), [len(t) for t in trajectories])


def traj_log_probs(arch: PolicyArch, theta, trajectories, normalizer: StateNormalizer,
                   tanh_jacobian: bool = True) -> dm.Tensor:
    """Log-likelihood of every trajectory under one policy, shape ``(J,)``."""
    packed = trajectories if isinstance(trajectories, PackedTrajectories) else PackedTrajectories(trajectories)
    lp = step_log_probs(arch, dm.as_tensor(theta), packed.states, packed.actions, normalizer, tanh_jacobian)
    return dm.segment_sum(lp, packed.segment, packed.count)
