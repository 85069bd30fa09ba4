"""Mixture-occupancy KL between an original and a reconstructed policy batch.

Particles are the states visited by the original batch. Each trajectory
gets a log importance weight: the log-sum-exp of its likelihood under the
reconstructed policies minus the same under the originals. Every particle
inherits the weight of its trajectory, and the weights are self-normalised
over particles. The importance-sampling k-NN estimator then turns
neighbourhood weight mass into a KL estimate.

The neighbour table and the particle coordinates are data: only the weights
carry gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .envs import Trajectory
from .policy import PackedTrajectories, PolicyArch, StateNormalizer, action_distribution, traj_log_probs

__all__ = [
    "BatchContext",
    "WeightedParticles",
    "NumericalError",
    "knn_indices",
    "log_importance_weights",
    "particle_log_weights",
    "self_normalize",
    "log_self_normalize",
    "knn_kl_loss",
    "gaussian_kl",
    "action_matching_loss",
    "opc_loss",
    "N_MAX",
]

N_MAX = 4000


class NumericalError(FloatingPointError):
    pass


def knn_indices(points, k: int, chunk: int = 128) -> np.ndarray:
    """Exact ``k`` nearest neighbours of every row (itself excluded).

    Euclidean distance; equal distances resolve to the lower index.
    """
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < N, got k={k}, N={n}")
    out = np.empty((n, k), dtype=np.int64)
    for s in range(0, n, chunk):
        rows = np.arange(s, min(s + chunk, n))
        diff = x[rows, None, :] - x[None, :, :]
        d = np.einsum("rnd,rnd->rn", diff, diff)
        d[np.arange(len(rows)), rows] = np.inf
        part = np.argpartition(d, k - 1, axis=1)[:, :k]
        dk = np.take_along_axis(d, part, axis=1)
        kth = dk.max(axis=1)
        tied = (d <= kth[:, None]).sum(axis=1) > k
        # (distance, index) order inside the k smallest
        order = np.lexsort((part, dk), axis=1)
        out[rows] = np.take_along_axis(part, order, axis=1)
        for r in np.flatnonzero(tied):
            out[rows[r]] = np.argsort(d[r], kind="stable")[:k]
    return out


def _subsample_rows(lengths, n_max):
    """Evenly spaced per-trajectory picks so the total stays within ``n_max``."""
    total = int(np.sum(lengths))
    if total <= n_max:
        return [np.arange(n) for n in lengths]
    frac = n_max / total
    return [np.unique(np.linspace(0, n - 1, max(1, int(n * frac))).round().astype(int)) for n in lengths]


@dataclass
class WeightedParticles:
    states: np.ndarray  # (N, d) raw states
    traj_index: np.ndarray  # (N,) trajectory owning each particle
    neighbors: np.ndarray  # (N, k)


class BatchContext:
    """Everything about a policy mini-batch that stays fixed across inner steps.

    Holds the original parameters, their trajectories, the cached original
    log-likelihood table ``ell[i, j]`` and the neighbour table over the
    (possibly subsampled) original particles.
    """

    def __init__(self, arch: PolicyArch, normalizer: StateNormalizer, thetas, trajectories: list[Trajectory],
                 owners, k: int = 30, n_max: int = N_MAX, tanh_jacobian: bool = True, policy_ids=None):
        self.arch = arch
        self.normalizer = normalizer
        self.thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        self.trajectories = list(trajectories)
        self.owners = np.asarray(owners, dtype=np.int64)
        self.policy_ids = np.arange(len(self.thetas)) if policy_ids is None else np.asarray(policy_ids)
        self.k = k
        self.tanh_jacobian = tanh_jacobian
        if len(self.owners) != len(self.trajectories):
            raise ValueError("one owner index per trajectory is required")
        if self.owners.min() < 0 or self.owners.max() >= len(self.thetas):
            raise ValueError("trajectory owner index outside the policy batch")
        self.packed = PackedTrajectories(self.trajectories)
        self.ell = np.stack([
            traj_log_probs(arch, th, self.packed, normalizer, tanh_jacobian).data for th in self.thetas
        ])
        self.log_denominator = dm._lse_array(self.ell, axis=0)
        picks = _subsample_rows([len(t.states) for t in self.trajectories], n_max)
        states = np.concatenate([t.states[p] for t, p in zip(self.trajectories, picks)])
        tidx = np.concatenate([np.full(len(p), j) for j, p in enumerate(picks)])
        self.particles = WeightedParticles(states, tidx, knn_indices(normalizer(states), k))

    @property
    def n_policies(self) -> int:
        return len(self.thetas)

    @property
    def n_trajectories(self) -> int:
        return len(self.trajectories)

    def recon_log_likelihoods(self, recon) -> dm.Tensor:
        """``(P, J)`` table of trajectory log-likelihoods under ``recon``."""
        rows = [traj_log_probs(self.arch, recon[i], self.packed, self.normalizer, self.tanh_jacobian)
                for i in range(self.n_policies)]
        return dm.concat([dm.reshape(r, (1, -1)) for r in rows], axis=0)


def log_importance_weights(ctx: BatchContext, recon=None, recon_ell: dm.Tensor | None = None) -> dm.Tensor:
    """Per-trajectory ``lambda_j = LSE_i ell'_ij - LSE_i ell_ij``.

    ``recon`` is a ``(P, n)`` tensor (or list of ``(n,)`` tensors) of
    reconstructed parameters; alternatively pass the likelihood table
    ``recon_ell`` directly.
    """
    if recon_ell is None:
        if len(recon) != ctx.n_policies:
            raise ValueError(f"{len(recon)} reconstructed policies for a batch of {ctx.n_policies}")
        recon_ell = ctx.recon_log_likelihoods(recon)
    lam = dm.logsumexp(recon_ell, axis=0) - ctx.log_denominator
    bad = ~np.isfinite(lam.data)
    if bad.any():
        j = int(np.flatnonzero(bad)[0])
        raise NumericalError(f"non-finite importance weight for trajectory {j} (policy {ctx.owners[j]})")
    return lam


def log_self_normalize(log_w) -> dm.Tensor:
    log_w = dm.as_tensor(log_w)
    return log_w - dm.logsumexp(log_w)


def self_normalize(log_w) -> dm.Tensor:
    """``w_j = exp(lambda_j - LSE_k lambda_k)``."""
    return dm.exp(log_self_normalize(log_w))


def particle_log_weights(ctx: BatchContext, lam: dm.Tensor) -> dm.Tensor:
    """Unnormalised per-particle log-weights, each inherited from its trajectory."""
    return dm.gather(lam, ctx.particles.traj_index)


def knn_kl_loss(neighbors, k: int | None = None, weights=None, log_weights=None) -> dm.Tensor:
    """``mean_i log((k/N) / sum_{j in N_i} w_j)`` with ``w`` self-normalised over particles.

    Give either ``weights`` or (preferably) ``log_weights``; neither needs to
    be normalised beforehand. In the log route the normaliser is kept apart,
    as ``log N - LSE_j log w_j``, so equal weights cancel exactly and the
    loss of a perfect reconstruction is exactly zero.
    """
    neighbors = np.asarray(neighbors, dtype=np.int64)
    n, kk = neighbors.shape
    k = kk if k is None else k
    if kk != k:
        raise ValueError("neighbour table width must equal k")
    if not 1 <= k < n:
        raise ValueError(f"need N > k >= 1, got N={n}, k={k}")
    if log_weights is not None:
        lw = dm.as_tensor(log_weights)
        # constant shift: the loss is shift invariant and equal weights become exact zeros
        lw = lw - float(np.max(lw.data))
        mass = dm.logsumexp(dm.gather(lw, neighbors), axis=1)
        total = dm.logsumexp(lw)
    else:
        w = dm.as_tensor(weights)
        mass = dm.log(dm.sum(dm.gather(w, neighbors), axis=1))
        total = dm.log(dm.sum(w))
    return dm.mean(np.log(k) - mass) - (np.log(n) - total)


def opc_loss(ctx: BatchContext, recon=None, recon_ell=None) -> dm.Tensor:
    """The full reconstructed-vs-original occupancy KL estimate for one batch."""
    lam = log_importance_weights(ctx, recon, recon_ell)
    return knn_kl_loss(ctx.particles.neighbors, ctx.k, log_weights=particle_log_weights(ctx, lam))


# ------------------------------------------------------------ action matching


def gaussian_kl(mean_p, log_std_p, mean_q, log_std_q) -> dm.Tensor:
    """Elementwise KL between diagonal Gaussians (tensors or arrays)."""
    return (log_std_q - log_std_p
            + 0.5 * (dm.exp(2.0 * (log_std_p - log_std_q)) + (mean_p - mean_q) * (mean_p - mean_q)
                     * dm.exp(-2.0 * log_std_q))
            - 0.5)


def action_matching_loss(arch: PolicyArch, thetas, recon, probe_states, normalizer: StateNormalizer) -> dm.Tensor:
    """Mean over (policy, state) of KL(pi_original || pi_reconstructed)."""
    probe_states = np.atleast_2d(probe_states)
    if len(probe_states) == 0:
        raise ValueError("probe_states must be non-empty")
    x = normalizer(probe_states)
    terms = []
    for i, theta in enumerate(np.atleast_2d(thetas)):
        mp, lp = action_distribution(arch, theta, x)
        mq, lq = action_distribution(arch, recon[i], x)
        terms.append(dm.reshape(dm.mean(dm.sum(gaussian_kl(mp, lp, mq, lq), axis=-1)), (1,)))
    return dm.mean(dm.concat(terms))
