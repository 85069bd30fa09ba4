import math

import numpy as np
import pytest

from opc.envs import MountainCar
from opc.pgpe import (
    SIGMA_FLOOR,
    Campaign,
    PgpeConfig,
    gradient_estimate,
    init_state,
    make_evaluator,
    pgpe_step,
    preset,
    run,
    run_campaign,
    score_log_sigma,
    score_mu,
    warm_start,
    warm_start_size,
    write_curves_csv,
)
from opc.policy import PolicyArch, StateNormalizer


def quadratic(z, seeds):
    return -((np.asarray(z)[:, 0] - 3.0) ** 2)


def test_score_at_the_mean_is_zero():
    mu = np.array([0.3, -1.2, 4.0])
    assert np.all(score_mu(mu, mu, np.array([0.5, 1.0, 2.0])) == 0.0)


def test_score_matches_log_density_derivative():
    rng = np.random.default_rng(0)
    mu, sigma = rng.normal(size=4), rng.uniform(0.2, 2.0, 4)
    z = rng.normal(size=4)

    def logpdf(m, ls):
        s = np.exp(ls)
        return np.sum(-0.5 * ((z - m) / s) ** 2 - ls - 0.5 * math.log(2 * math.pi))

    h = 1e-6
    eye = np.eye(4) * h
    fd_mu = [(logpdf(mu + e, np.log(sigma)) - logpdf(mu - e, np.log(sigma))) / (2 * h) for e in eye]
    fd_ls = [(logpdf(mu, np.log(sigma) + e) - logpdf(mu, np.log(sigma) - e)) / (2 * h) for e in eye]
    np.testing.assert_allclose(score_mu(z, mu, sigma), fd_mu, rtol=1e-6)
    np.testing.assert_allclose(score_mu(z, mu, sigma), (z - mu) / sigma**2, rtol=1e-15)
    np.testing.assert_allclose(score_log_sigma(z, mu, sigma), fd_ls, rtol=1e-6, atol=1e-8)


def test_estimator_is_unbiased_for_linear_reward():
    rng = np.random.default_rng(1)
    mu, sigma = np.array([0.4]), np.array([0.7])
    z = mu + sigma * rng.standard_normal((100_000, 1))
    g = score_mu(z, mu, sigma)[:, 0] * z[:, 0]
    se = g.std(ddof=1) / math.sqrt(len(g))
    assert abs(g.mean() - 1.0) < 3 * se


def test_baseline_leaves_the_mean_unchanged():
    rng = np.random.default_rng(2)
    mu, sigma = np.array([0.0]), np.array([1.0])
    plain, centred = [], []
    for _ in range(20_000):
        z = mu + sigma * rng.standard_normal((8, 1))
        r = -((z[:, 0] - 3.0) ** 2)
        plain.append(gradient_estimate(z, r, mu, sigma, "none")[0][0])
        centred.append(gradient_estimate(z, r, mu, sigma, "mean")[0][0])
    diff = np.array(plain) - np.array(centred)
    se = diff.std(ddof=1) / math.sqrt(len(diff))
    assert abs(diff.mean()) < 3 * se
    # the analytic gradient of E[-(z-3)^2] w.r.t. mu is 6 at mu = 0
    assert abs(np.mean(centred) - 6.0) < 3 * np.std(centred, ddof=1) / math.sqrt(len(centred))
    assert np.var(centred) < np.var(plain)


def test_quadratic_bandit_converges():
    cfg = preset("mc-standard")
    hits = 0
    for seed in range(10):
        state = init_state([0.0], cfg)
        for _ in range(500):
            state, _, _ = pgpe_step(state, quadratic, cfg, seed)
            if abs(state.mu[0] - 3.0) < 0.3:
                hits += 1
                break
    assert hits >= 9


def test_sigma_floor_holds():
    cfg = PgpeConfig(lr_center=0.1, lr_std=5.0, init_sigma=1e-3, decay=1.0)
    state = init_state(np.zeros(2), cfg)
    for step in range(50):
        state, _, _ = pgpe_step(state, lambda z, s: -np.sum(z**2, axis=1), cfg, 0)
        assert np.all(state.sigma >= SIGMA_FLOOR * (1 - 1e-12))


def test_learning_rates_decay_each_step():
    cfg = PgpeConfig(decay=0.9)
    state = init_state([0.0], cfg)
    for _ in range(3):
        state, _, _ = pgpe_step(state, quadratic, cfg, 0)
    assert state.opt.lr == pytest.approx([0.11 * 0.9**3, 0.1 * 0.9**3])


def test_non_finite_return_names_the_code():
    cfg = PgpeConfig()
    with pytest.raises(FloatingPointError, match="population member 0"):
        pgpe_step(init_state([0.0], cfg), lambda z, s: np.array([np.nan] + [0.0] * 7), cfg, 0)


def test_identical_seed_identical_curve():
    cfg = PgpeConfig(budget=160)
    a = run(cfg, quadratic, 1, seed=4)
    b = run(cfg, quadratic, 1, seed=4)
    assert np.array_equal(a[1], b[1]) and np.array_equal(a[2].mu, b[2].mu)


def test_warm_start_single_sample():
    calls = []

    def evaluate(z, seeds):
        calls.append(z.copy())
        return np.array([1.0])

    z, ret, used = warm_start(evaluate, 3, 1, seed=0)
    assert used == 1 and ret == 1.0
    np.testing.assert_array_equal(z, calls[0][0])


def test_warm_start_picks_the_strict_best_and_breaks_ties_low():
    codes = np.arange(20, dtype=float)[:, None] * np.ones((1, 2))

    def good(z, seeds):
        return np.where(z[:, 0] == 7.0, 100.0, 0.0)

    z, ret, _ = warm_start(good, 2, 20, seed=1, codes=codes)
    assert z.tolist() == [7.0, 7.0] and ret == 100.0

    def flat(z, seeds):
        flat.seen = z.copy()
        return np.zeros(len(z))

    z, _, _ = warm_start(flat, 2, 5, seed=2)
    np.testing.assert_array_equal(z, flat.seen[0])
    with pytest.raises(ValueError):
        warm_start(flat, 2, 0, seed=0)


def test_warm_start_sizes():
    assert [warm_start_size(k) for k in (3, 5, 8)] == [40, 56, 80]


def test_budget_counts_warm_start_episodes():
    eps, rets, _, _ = run(PgpeConfig(budget=100), quadratic, 2, seed=0, warm_samples=32)
    assert eps[0] == 40 and eps[-1] <= 100 and np.all(np.diff(eps) > 0)
    assert len(rets) == (100 - 32) // 8


def test_single_seed_ci_is_degenerate(caplog):
    camp = run_campaign(PgpeConfig(budget=40), quadratic, 1, [0])
    assert np.all(camp.ci95 == 0.0)
    assert "degenerate" in caplog.text


def test_campaign_curves_and_csv(tmp_path):
    camp = run_campaign(PgpeConfig(budget=80), quadratic, 1, [0, 1, 2])
    assert np.all(np.diff(camp.episodes) > 0)
    assert camp.returns.shape == (3, 10) and np.all(camp.ci95 >= 0)
    write_curves_csv(tmp_path / "c.csv", camp)
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert rows[0] == "seed,episode,return" and len(rows) == 31


def test_reached_respects_the_episode_window():
    camp = Campaign([0, 1], np.array([8, 16, 24]), np.array([[0.0, 95.0, 0.0], [0.0, 0.0, 95.0]]))
    assert camp.reached(90, 16).tolist() == [True, False]
    assert camp.reached(90, 24).tolist() == [True, True]


def test_parameter_space_pgpe_on_mountain_car():
    arch = PolicyArch(2, 1)
    evaluate = make_evaluator(arch, StateNormalizer.from_spec(MountainCar.spec), MountainCar(), "standard")
    rng = np.random.default_rng(0)
    camp = run_campaign(PgpeConfig(budget=16), evaluate, arch.param_count, [0],
                        init_mu=rng.uniform(-2.5, 2.5, arch.param_count))
    assert camp.returns.shape == (1, 2) and np.all(np.isfinite(camp.returns))


def test_config_validation_and_presets():
    with pytest.raises(ValueError):
        PgpeConfig(population_size=1)
    with pytest.raises(ValueError):
        PgpeConfig(lr_center=0.0)
    assert preset("mc-standard").lr_center == 0.11 and preset("mc-standard").init_sigma == 1.0
    assert preset("mc-warm", budget=50).budget == 50
    with pytest.raises(KeyError):
        preset("nope")


def test_center_curve_scores_the_mean_code():
    seen = []

    def evaluate(z, seeds):
        seen.append((np.array(z), list(seeds)))
        return quadratic(z, seeds)

    cfg = PgpeConfig(budget=16, eval_episodes=3)
    eps, rets, state, _ = run(cfg, evaluate, 1, seed=0)
    last_z, last_seeds = seen[-1]
    assert len(last_z) == 3 and np.all(last_z == state.mu)
    assert rets[-1] == pytest.approx(-((state.mu[0] - 3.0) ** 2), rel=1e-14)
    assert last_seeds == seen[1][1]
    pop = run(PgpeConfig(budget=16, curve="population"), quadratic, 1, seed=0)
    assert np.array_equal(pop[2].mu, state.mu)
