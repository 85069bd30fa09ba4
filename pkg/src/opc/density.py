"""Diagonal Gaussian mixtures and Monte-Carlo entropy / KL estimates.

EM is vectorised over many independent fits at once (one per policy),
which is what makes population-scale curation affordable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "GmmDensity",
    "FitReport",
    "fit_gmm",
    "fit_gmm_batch",
    "gmm_log_pdf",
    "uniform_mixture",
    "mc_entropy",
    "mc_kl",
    "downsample",
    "VAR_FLOOR",
]

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
_LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class GmmDensity:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    variances: np.ndarray  # (K, D)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"mixture weights sum to {w.sum()!r}, not 1")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", np.atleast_2d(np.asarray(self.means, dtype=np.float64)))
        object.__setattr__(self, "variances", np.atleast_2d(np.asarray(self.variances, dtype=np.float64)))

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_pdf(self, x) -> np.ndarray:
        return gmm_log_pdf(self, x)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp]) * noise


@dataclass
class FitReport:
    log_likelihood: list[float] = field(default_factory=list)  # mean per-particle, one per EM iteration
    n_iter: int = 0
    reseeded: int = 0
    converged: bool = False


def _component_log_pdf(x, means, variances):
    """``(..., N, K)`` log N(x_n; mu_k, diag var_k); x ``(..., N, D)``."""
    diff = x[..., :, None, :] - means[..., None, :, :]
    quad = np.sum(diff * diff / variances[..., None, :, :], axis=-1)
    logdet = np.sum(np.log(variances), axis=-1)[..., None, :]
    return -0.5 * (quad + logdet + x.shape[-1] * _LOG_2PI)


def _lse_last(a):
    m = a.max(axis=-1, keepdims=True)
    m[~np.isfinite(m)] = 0.0
    a -= m
    np.exp(a, out=a)
    return np.log(a.sum(axis=-1)) + m[..., 0]


def gmm_log_pdf(model: GmmDensity, x, chunk: int = 16384) -> np.ndarray:
    """Log-density at each row of ``x`` (a single point gives a scalar).

    The Gaussian quadratic form is expanded into matrix products, which is
    accurate for the low-dimensional, unit-scale states used here and far
    faster for mixtures with many components.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.dim:
        raise ValueError(f"points have {x.shape[1]} dims, model has {model.dim}")
    prec = 1.0 / model.variances
    lin = model.means * prec
    const = (np.log(model.weights) - 0.5 * (np.sum(model.means * lin, axis=1)
                                            + np.sum(np.log(model.variances), axis=1) + model.dim * _LOG_2PI))
    out = np.empty(len(x))
    for s in range(0, len(x), chunk):
        xc = x[s : s + chunk]
        a = (xc @ lin.T) - 0.5 * ((xc * xc) @ prec.T)
        a += const
        out[s : s + chunk] = _lse_last(a)
    return out[0] if single else out


def uniform_mixture(models) -> GmmDensity:
    """Equal-weight mixture of several mixtures, flattened into one GMM."""
    models = list(models)
    m = len(models)
    w = np.concatenate([g.weights / m for g in models])
    return GmmDensity(w / w.sum(), np.concatenate([g.means for g in models]),
                      np.concatenate([g.variances for g in models]))


def downsample(states, stride: int = 4) -> np.ndarray:
    return np.asarray(states)[::stride]


# ---------------------------------------------------------------------- EM


def _kmeanspp(points, counts, k, rng):
    n = len(points)
    p = counts / counts.sum()
    centers = [points[rng.choice(n, p=p)]]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        mass = counts * d2
        total = mass.sum()
        idx = rng.choice(n, p=mass / total) if total > 0 else rng.choice(n, p=p)
        centers.append(points[idx])
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return np.array(centers)


def fit_gmm_batch(particle_sets, n_components: int = 4, seeds=0, max_iter: int = 200, tol: float = 1e-4,
                  var_floor: float = VAR_FLOOR) -> tuple[list[GmmDensity], list[FitReport]]:
    """Fit one diagonal GMM per particle set with EM (k-means++ start).

    Each set is first collapsed to its distinct rows with multiplicities, so a
    fit depends only on the empirical distribution. Iteration stops when the
    mean log-likelihood improves by less than ``tol``.
    """
    sets = [np.atleast_2d(np.asarray(s, dtype=np.float64)) for s in particle_sets]
    b = len(sets)
    if np.isscalar(seeds):
        seeds = [np.random.SeedSequence([int(seeds), i]) for i in range(b)]
    rngs = [np.random.default_rng(s) for s in seeds]
    k = n_components
    uniq = []
    for s in sets:
        if len(s) < k:
            raise ValueError(f"need at least {k} particles for {k} components, got {len(s)}")
        pts, cnt = np.unique(s, axis=0, return_counts=True)
        uniq.append((pts, cnt.astype(np.float64)))
    d = sets[0].shape[1]
    n_max = max(len(p) for p, _ in uniq)
    X = np.zeros((b, n_max, d))
    W = np.zeros((b, n_max))
    for i, (pts, cnt) in enumerate(uniq):
        X[i, : len(pts)] = pts
        W[i, : len(pts)] = cnt
    total = W.sum(axis=1)

    gmean = np.einsum("bn,bnd->bd", W, X) / total[:, None]
    gvar = np.maximum(np.einsum("bn,bnd->bd", W, (X - gmean[:, None]) ** 2) / total[:, None], var_floor)
    means = np.stack([_kmeanspp(p, c, k, r) for (p, c), r in zip(uniq, rngs)])
    variances = np.repeat(gvar[:, None, :], k, axis=1)
    logw = np.full((b, k), -np.log(k))

    reports = [FitReport() for _ in range(b)]
    active = np.arange(b)
    for it in range(max_iter + 1):
        if active.size == 0:
            break
        Xa, Wa = X[active], W[active]
        lp = _component_log_pdf(Xa, means[active], variances[active]) + logw[active][:, None, :]
        lse = logsumexp(lp, axis=-1)
        pad = Wa == 0
        lse[pad] = 0.0
        ll = np.sum(Wa * lse, axis=1) / total[active]
        still = []
        for j, i in enumerate(active):
            hist = reports[i].log_likelihood
            hist.append(float(ll[j]))
            if (len(hist) > 1 and hist[-1] - hist[-2] < tol) or it == max_iter:
                reports[i].converged = len(hist) > 1 and hist[-1] - hist[-2] < tol
                reports[i].n_iter = it
            else:
                still.append(j)
        if not still:
            break
        sel = np.asarray(still)
        active = active[sel]
        Xa, Wa = Xa[sel], Wa[sel]
        resp = np.exp(lp[sel] - lse[sel][..., None]) * Wa[..., None]
        resp[pad[sel]] = 0.0
        nk = resp.sum(axis=1)
        safe = np.maximum(nk, 1e-300)[..., None]
        mu = np.einsum("bnk,bnd->bkd", resp, Xa) / safe
        var = np.einsum("bnk,bnkd->bkd", resp, (Xa[:, :, None, :] - mu[:, None]) ** 2) / safe
        var = np.maximum(var, var_floor)
        wk = nk / total[active][:, None]
        dead = wk < 1e-8
        for j, kk in zip(*np.nonzero(dead)):
            i = active[j]
            pts, cnt = uniq[i]
            mu[j, kk] = pts[rngs[i].choice(len(pts), p=cnt / cnt.sum())]
            var[j, kk] = gvar[i]
            wk[j, kk] = 1.0 / k
            reports[i].reseeded += 1
        if dead.any():
            wk = wk / wk.sum(axis=1, keepdims=True)
            log.info("re-seeded %d degenerate GMM components", int(dead.sum()))
        means[active], variances[active] = mu, var
        with np.errstate(divide="ignore"):
            logw[active] = np.log(wk)

    models = []
    for i in range(b):
        w = np.exp(logw[i])
        models.append(GmmDensity(w / w.sum(), means[i].copy(), variances[i].copy()))
    return models, reports


def fit_gmm(particles, n_components: int = 4, seed: int = 0, **kwargs) -> tuple[GmmDensity, FitReport]:
    models, reports = fit_gmm_batch([particles], n_components, [seed], **kwargs)
    return models[0], reports[0]


# ---------------------------------------------------------------- estimators


def mc_entropy(model: GmmDensity, particles) -> float:
    """``-mean(log p(s_j))`` over particles drawn from ``model``."""
    return float(-np.mean(gmm_log_pdf(model, particles)))


def mc_kl(model_p: GmmDensity, model_q: GmmDensity, particles) -> float:
    """``mean(log p(s_j) - log q(s_j))`` over particles drawn from ``model_p``."""
    return float(np.mean(gmm_log_pdf(model_p, particles) - gmm_log_pdf(model_q, particles)))
