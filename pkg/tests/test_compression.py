import numpy as np
import pytest

from opc import diffmath as dm
from opc.compression import (
    AutoencoderModel,
    TrainConfig,
    ae_param_count,
    coverage_iterations,
    grid_eval,
    grid_points,
    loss_and_grad,
    train,
    write_grid_csv,
    write_loss_csv,
)
from opc.envs import MountainCar, rollout_batch
from opc.occupancy_loss import BatchContext, action_matching_loss
from opc.policy import PolicyArch, PolicyPopulation, StateNormalizer, sample_params

MC = PolicyArch(2, 1)
SMALL = PolicyArch(2, 1, (8,))
NORM = StateNormalizer.from_spec(MountainCar.spec)


def toy_dataset(arch, count, per_policy, horizon, seed):
    thetas = sample_params(arch, seed, count=count)
    trajs = []
    for i in range(count):
        seeds = [seed * 1000 + i * 10 + e for e in range(per_policy)]
        t, _ = rollout_batch(PolicyPopulation(arch, np.repeat(thetas[i : i + 1], per_policy, 0), NORM),
                             MountainCar(), "none", seeds, horizon=horizon)
        trajs.append(t)
    return thetas, trajs


def test_param_count():
    assert ae_param_count(1218, 2) == 62_730
    model = AutoencoderModel.initialize(sample_params(MC, 0, count=4), 2, seed=0)
    assert model.param_count == 62_730


def test_coverage_iterations():
    assert coverage_iterations(2500, 5, 0.99) == 2301
    assert coverage_iterations(100, 5, 0.99) == 90
    assert coverage_iterations(7, 7, 0.99) == 1
    with pytest.raises(ValueError):
        coverage_iterations(5, 6, 0.99)


def test_coverage_iterations_is_the_smallest():
    for d, p in [(2500, 5), (125, 5), (100, 5), (10, 3)]:
        t = coverage_iterations(d, p, 0.99)
        assert (1 - p / d) ** t <= 0.01 < (1 - p / d) ** (t - 1)


def test_shapes_and_standardization():
    thetas = sample_params(MC, 1, count=6)
    model = AutoencoderModel.initialize(thetas, 3, seed=1)
    z = model.encode(thetas)
    assert z.shape == (6, 3) and np.all(np.isfinite(z))
    assert model.decode(z).shape == (6, 1218)
    np.testing.assert_allclose(model.destandardize(model.standardize(thetas)), thetas, rtol=0, atol=1e-10)
    with pytest.raises(dm.ShapeError):
        model.decode(np.zeros(2))
    with pytest.raises(dm.ShapeError):
        model.encode(np.zeros(5))


def test_std_floor():
    thetas = np.repeat(sample_params(MC, 2)[None], 3, axis=0)
    model = AutoencoderModel.initialize(thetas, 2, seed=0)
    assert np.all(model.std >= 1e-8)
    assert np.all(np.isfinite(model.encode(thetas)))


def test_tape_and_numpy_forward_agree():
    thetas = sample_params(MC, 3, count=4)
    model = AutoencoderModel.initialize(thetas, 2, seed=3)
    w = [dm.tensor(p) for p in model.params]
    np.testing.assert_allclose(model.reconstruct_tensor(w, thetas).data, model.decode(model.encode(thetas)),
                               rtol=1e-12, atol=1e-12)
    z = np.array([[0.5, -1.0]])
    np.testing.assert_allclose(model.decode_tensor(w, z).data, model.decode(z), rtol=1e-12, atol=1e-12)


def test_identical_batch_apc_gradient_equals_single_policy():
    theta = sample_params(SMALL, 4)
    probe = np.random.default_rng(0).uniform([-1.2, -0.07], [0.6, 0.07], (32, 2))
    model = AutoencoderModel.initialize(sample_params(SMALL, 5, count=6), 2, seed=0)

    def grads(batch):
        w = [dm.tensor(p, requires_grad=True) for p in model.params]
        recon = model.reconstruct_tensor(w, batch)
        loss = action_matching_loss(SMALL, batch, [recon[i] for i in range(len(batch))], probe, NORM)
        return dm.grad(loss, w)

    for a, b in zip(grads(np.repeat(theta[None], 4, 0)), grads(theta[None])):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-14)


def test_apc_bypass_is_zero_with_zero_gradient():
    thetas = sample_params(SMALL, 6, count=3)
    probe = np.random.default_rng(1).uniform(-1, 1, (16, 2))
    leaves = [dm.tensor(t, requires_grad=True) for t in thetas]
    loss = action_matching_loss(SMALL, thetas, leaves, probe, StateNormalizer.identity(2))
    assert loss.item() == 0.0
    for g in dm.grad(loss, leaves):
        assert np.all(g == 0.0)


def test_single_step_touches_only_the_autoencoder():
    thetas, trajs = toy_dataset(SMALL, 4, 2, 20, 7)
    before_thetas = thetas.copy()
    before_states = [t.states.copy() for ts in trajs for t in ts]
    model = AutoencoderModel.initialize(thetas, 2, seed=0)
    old = [p.copy() for p in model.params]
    cfg = TrainConfig(batch_size=2, inner_iterations=1, k_nn=5, trajectories_per_policy=2, outer_iterations=1)
    train(model, SMALL, NORM, thetas, trajs, cfg, seed=0)
    assert np.array_equal(thetas, before_thetas)
    assert all(np.array_equal(a, t.states) for a, t in zip(before_states, [t for ts in trajs for t in ts]))
    assert any(not np.array_equal(a, b) for a, b in zip(old, model.params))


def test_loss_log_length_and_reproducibility(tmp_path):
    thetas, trajs = toy_dataset(SMALL, 6, 2, 20, 8)
    cfg = TrainConfig(batch_size=3, inner_iterations=4, k_nn=5, trajectories_per_policy=2)
    runs = []
    for _ in range(2):
        model = AutoencoderModel.initialize(thetas, 2, seed=1)
        runs.append(train(model, SMALL, NORM, thetas, trajs, cfg, seed=5))
    outer = coverage_iterations(6, 3, 0.99)
    assert runs[0].outer_iterations == outer
    assert len(runs[0].log) == outer * 4
    assert [r.loss for r in runs[0].log] == [r.loss for r in runs[1].log]
    for a, b in zip(runs[0].model.params, runs[1].model.params):
        assert np.array_equal(a, b)
    write_loss_csv(tmp_path / "loss.csv", runs[0].log)
    rows = (tmp_path / "loss.csv").read_text().splitlines()
    assert rows[0] == "step,outer,inner,loss,batch_ids" and len(rows) == outer * 4 + 1


def test_training_requires_enough_trajectories():
    thetas, trajs = toy_dataset(SMALL, 3, 1, 10, 9)
    model = AutoencoderModel.initialize(thetas, 2, seed=0)
    with pytest.raises(ValueError, match="fewer than"):
        train(model, SMALL, NORM, thetas, trajs, TrainConfig(batch_size=2, trajectories_per_policy=2), seed=0)


def test_checkpoint_called_every_outer_iteration():
    thetas, trajs = toy_dataset(SMALL, 4, 2, 15, 10)
    seen = []
    model = AutoencoderModel.initialize(thetas, 2, seed=0)
    cfg = TrainConfig(batch_size=2, inner_iterations=1, k_nn=5, trajectories_per_policy=2, outer_iterations=3)
    train(model, SMALL, NORM, thetas, trajs, cfg, seed=0, checkpoint=lambda m, it: seen.append(it))
    assert seen == [0, 1, 2]


def test_ae_gradient_matches_finite_differences():
    arch = PolicyArch(2, 1, (3,))
    thetas, trajs = toy_dataset(arch, 2, 2, 5, 11)
    model = AutoencoderModel.initialize(thetas, 2, seed=2)
    ctx = BatchContext(arch, NORM, thetas, [t for ts in trajs for t in ts], [0, 0, 1, 1], k=3)
    _, grads = loss_and_grad(model, ctx)
    h = 1e-5
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
        scale = max(np.linalg.norm(fd), 1e-8)
        assert np.linalg.norm(g - fd) / scale < 1e-3


def test_untrained_toy_loss_decreases():
    drops = 0
    for seed in range(10):
        thetas, trajs = toy_dataset(SMALL, 10, 4, 50, 100 + seed)
        model = AutoencoderModel.initialize(thetas, 2, seed=seed)
        cfg = TrainConfig(batch_size=10, inner_iterations=50, k_nn=10, trajectories_per_policy=4)
        losses = [r.loss for r in train(model, SMALL, NORM, thetas, trajs, cfg, seed=seed).log]
        drops += losses[-1] < losses[0]
    assert drops >= 8


def test_grid_points_and_eval(tmp_path):
    assert grid_points(2, per_dim=5).shape == (25, 2)
    assert grid_points(1, per_dim=1).shape == (1, 1)
    assert grid_points(3, per_dim=3).shape == (27, 3)
    sl = grid_points(5, per_dim=4, dims=(1, 3))
    assert sl.shape == (16, 5) and np.all(sl[:, [0, 2, 4]] == 0)
    thetas = sample_params(MC, 12, count=4)
    model = AutoencoderModel.initialize(thetas, 2, seed=0)
    one = grid_points(2, per_dim=1)
    got = grid_eval(model, MC, NORM, MountainCar(), "speed", one, episodes=2, seed=3)
    _, ret = rollout_batch(PolicyPopulation(MC, np.repeat(model.decode(one), 2, 0), NORM), MountainCar(), "speed",
                           [3, 4])
    assert got[0] == pytest.approx(ret.mean(), rel=1e-12)
    pts = grid_points(2, per_dim=3)
    write_grid_csv(tmp_path / "g.csv", pts, np.zeros(len(pts)))
    assert len((tmp_path / "g.csv").read_text().splitlines()) == len(pts) + 1


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(inner_iterations=0)
