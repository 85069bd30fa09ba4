"""Uniqueness scores for a random policy population and top-percentile selection.

Two scores are provided: the occupancy-based score (entropy of the policy's
state occupancy plus its KL to the population mixture) and the action-space
novelty score (mean action-distribution KL to the nearest neighbours).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .density import GmmDensity, gmm_log_pdf
from .policy import PolicyArch, StateNormalizer, forward_batch

__all__ = [
    "ScoreTable",
    "CuratedDataset",
    "score_opc",
    "score_apc",
    "pairwise_action_kl",
    "pairwise_action_kl_fast",
    "threshold",
    "minmax_normalize",
    "discrete_entropy",
    "discrete_kl",
    "opc_scores_discrete",
    "sample_probe_states",
    "write_scores_csv",
]

log = logging.getLogger(__name__)


@dataclass
class ScoreTable:
    ids: np.ndarray
    scores: np.ndarray
    method: str
    entropy: np.ndarray | None = None
    kl: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.ids.shape != self.scores.shape:
            raise ValueError("ids and scores must align")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("duplicate policy ids in score table")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def min(self) -> float:
        return float(self.scores.min())

    @property
    def max(self) -> float:
        return float(self.scores.max())

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.ids.tolist(), self.scores.tolist()))


@dataclass
class CuratedDataset:
    ids: np.ndarray
    percentile: float
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)


# ------------------------------------------------------------- exact (discrete)


def discrete_entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def discrete_kl(p, q) -> float:
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


def opc_scores_discrete(dists) -> tuple[np.ndarray, np.ndarray]:
    """Exact per-policy scores for discrete occupancies ``(M, S)``.

    Returns ``(scores, mixture)``; ``scores.mean()`` is the mixture entropy.
    """
    d = np.asarray(dists, dtype=np.float64)
    mix = d.mean(axis=0)
    scores = np.array([discrete_entropy(di) + discrete_kl(di, mix) for di in d])
    return scores, mix


# ------------------------------------------------------------------- OPC score


def score_opc(policy_gmms: dict[int, GmmDensity] | list, mixture_gmm: GmmDensity, particle_sets,
              ids=None) -> ScoreTable:
    """``H(d_i) + KL(d_i || d_mix)`` per policy by Monte-Carlo integration.

    ``particle_sets[i]`` must be drawn from ``policy_gmms[i]``.
    """
    if isinstance(policy_gmms, dict):
        ids = list(policy_gmms) if ids is None else list(ids)
        missing = [i for i in ids if i not in policy_gmms]
        if missing:
            raise KeyError(f"no fitted GMM for policies {missing[:5]}")
        gmms = [policy_gmms[i] for i in ids]
    else:
        gmms = list(policy_gmms)
        ids = list(range(len(gmms))) if ids is None else list(ids)
        if len(gmms) != len(ids):
            raise KeyError("number of GMMs does not match number of policy ids")
    if len(particle_sets) != len(gmms):
        raise ValueError("one particle set per policy is required")
    own = [gmm_log_pdf(g, parts) for g, parts in zip(gmms, particle_sets)]
    mix = np.split(gmm_log_pdf(mixture_gmm, np.concatenate(particle_sets)),
                   np.cumsum([len(p) for p in particle_sets])[:-1])
    ent = np.array([-np.mean(o) for o in own])
    kl = np.array([np.mean(o - m) for o, m in zip(own, mix)])
    return ScoreTable(ids, ent + kl, "OPC", entropy=ent, kl=kl)


# ------------------------------------------------------------------- APC score


def sample_probe_states(trajectories, count: int, seed: int) -> np.ndarray:
    pool = np.concatenate([t.states for t in trajectories])
    rng = np.random.default_rng(seed)
    return pool[rng.choice(len(pool), size=min(count, len(pool)), replace=False)]


def _gauss_kl(mp, lp, mq, lq):
    """Diagonal-Gaussian KL(p || q) from means and log-stds, elementwise."""
    return lq - lp + 0.5 * (np.exp(2 * (lp - lq)) + (mp - mq) ** 2 * np.exp(-2 * lq)) - 0.5


def pairwise_action_kl(arch: PolicyArch, thetas, probe_states, normalizer: StateNormalizer,
                       chunk: int = 8) -> np.ndarray:
    """``D[p, q]``: action KL(pi_p || pi_q) summed over action dims, averaged over probe states."""
    x = normalizer(probe_states)
    mean, log_std = forward_batch(arch, thetas, x[None])
    b = len(mean)
    out = np.empty((b, b))
    for s in range(0, b, chunk):
        kl = _gauss_kl(mean[s : s + chunk, None], log_std[s : s + chunk, None], mean[None], log_std[None])
        out[s : s + chunk] = kl.sum(axis=-1).mean(axis=-1)
    return np.maximum(out, 0.0)


def pairwise_action_kl_fast(mean, log_std) -> np.ndarray:
    """The same matrix from precomputed heads ``(B, S, a)``, as three matrix products.

    Expanding the square in the Gaussian KL separates the p- and q-terms, so
    the whole matrix costs ``O(B^2 S a)`` multiply-adds instead of
    elementwise transcendental work. Entries carry rounding error of order
    ``1e-16 * max(mu^2 / sigma^2)``; use it for neighbour search only.
    """
    b, s, a = mean.shape
    inv = np.exp(-2.0 * log_std).reshape(b, -1)  # 1 / sigma_q^2
    mq = mean.reshape(b, -1)
    lp_sum = log_std.reshape(b, -1).sum(axis=1)
    p_sq = (np.exp(2.0 * log_std) + mean**2).reshape(b, -1)
    d = 0.5 * (p_sq @ inv.T) - mean.reshape(b, -1) @ (mq * inv).T
    d += 0.5 * np.sum(mq * mq * inv, axis=1)[None, :]
    d += (lp_sum[None, :] - lp_sum[:, None])
    return d / s - 0.5 * a


def score_apc(arch: PolicyArch, thetas, probe_states, k_n: int, normalizer: StateNormalizer,
              ids=None, exact: bool = False) -> ScoreTable:
    """Mean action KL to the ``k_n`` nearest policies under that same KL.

    Neighbours are searched on the fast matrix form (``exact=False``) and
    the retained KLs are then recomputed elementwise.
    """
    thetas = np.atleast_2d(thetas)
    m = len(thetas)
    if k_n >= m:
        raise ValueError(f"k_n={k_n} must be smaller than the population size {m}")
    ids = np.arange(m) if ids is None else np.asarray(ids)
    if exact:
        d = pairwise_action_kl(arch, thetas, probe_states, normalizer)
        np.fill_diagonal(d, np.inf)
        nn = np.argsort(d, axis=1, kind="stable")[:, :k_n]
        scores = np.take_along_axis(d, nn, axis=1).mean(axis=1)
    else:
        mean, log_std = forward_batch(arch, thetas, normalizer(probe_states)[None])
        d = pairwise_action_kl_fast(mean, log_std)
        np.fill_diagonal(d, np.inf)
        nn = np.argsort(d, axis=1, kind="stable")[:, :k_n]
        kl = _gauss_kl(mean[:, None], log_std[:, None], mean[nn], log_std[nn])
        scores = np.maximum(kl.sum(axis=-1).mean(axis=-1), 0.0).mean(axis=1)
    return ScoreTable(ids, scores, "APC", meta={"k_n": k_n, "probe_states": len(probe_states)})


# ------------------------------------------------------------------ selection


def threshold(table: ScoreTable, percentile: float) -> CuratedDataset:
    """Keep the top ``ceil(percentile * M)`` scores; ties go to the lower id."""
    if len(table) == 0:
        raise ValueError("cannot threshold an empty score table")
    if not 0 < percentile <= 1:
        raise ValueError("percentile must lie in (0, 1]")
    keep = max(1, math.ceil(percentile * len(table) - 1e-9))
    order = np.lexsort((table.ids, -table.scores))
    kept = np.sort(table.ids[order[:keep]])
    return CuratedDataset(kept, percentile, {"method": table.method, **table.meta})


def minmax_normalize(table: ScoreTable) -> ScoreTable:
    lo, hi = table.min, table.max
    if hi == lo:
        log.warning("all %d scores equal %.6g; min-max normalisation maps them to 0.5", len(table), lo)
        scaled = np.full(len(table), 0.5)
    else:
        scaled = (table.scores - lo) / (hi - lo)
    meta = {**table.meta, "raw_min": lo, "raw_max": hi}
    return ScoreTable(table.ids.copy(), scaled, table.method, meta=meta)


def write_scores_csv(path, table: ScoreTable, curated: CuratedDataset | None = None) -> None:
    kept = set() if curated is None else set(curated.ids.tolist())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["policy_id", "score", "retained"])
        for i, s in zip(table.ids.tolist(), table.scores.tolist()):
            w.writerow([i, repr(float(s)), int(i in kept)])
