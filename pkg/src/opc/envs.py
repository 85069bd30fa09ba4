"""Mountain Car Continuous, a planar two-link reacher, their tasks, and rollouts.

Both environments are vectorised: every function takes a leading batch
axis so a whole policy population can be simulated in lock-step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "CmpSpec",
    "Task",
    "Trajectory",
    "RolloutError",
    "MountainCar",
    "Reacher",
    "ReacherParams",
    "make_env",
    "mc_step",
    "mc_reward",
    "mc_height",
    "reacher_step",
    "reacher_energy",
    "reacher_reward",
    "fingertip_kinematics",
    "kinematic_reward",
    "rollout",
    "rollout_batch",
    "MC_TASKS",
    "REACHER_TASKS",
]


@dataclass(frozen=True)
class CmpSpec:
    name: str
    state_dim: int
    action_dim: int
    horizon: int
    state_low: tuple[float, ...]
    state_high: tuple[float, ...]

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not all(lo < hi for lo, hi in zip(self.state_low, self.state_high)):
            raise ValueError("state_low must be < state_high elementwise")


@dataclass(frozen=True)
class Task:
    """Reward over (state, action, next-state) plus a termination predicate.

    All arguments are batched physical states; ``reward`` and ``done`` return
    one value per batch row.
    """

    name: str
    reward: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    done: Callable[[np.ndarray], np.ndarray]


@dataclass
class Trajectory:
    states: np.ndarray  # (T+1, state_dim), raw observations
    actions: np.ndarray  # (T, action_dim)
    episode_seed: int = 0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if len(self.states) != len(self.actions) + 1:
            raise ValueError("a trajectory needs exactly one more state than actions")

    def __len__(self) -> int:
        return len(self.actions)


class RolloutError(RuntimeError):
    pass


# ------------------------------------------------------------- mountain car

MC_POWER = 0.0015
MC_GRAVITY = 0.0025
MC_MIN_P, MC_MAX_P = -1.2, 0.6
MC_MAX_V = 0.07
MC_GOAL = 0.45
MC_LEFT_GOAL = -1.1


def mc_step(state, action):
    """One Gymnasium MountainCarContinuous transition, batched over rows."""
    state = np.asarray(state, dtype=np.float64)
    p, v = state[..., 0], state[..., 1]
    force = np.clip(np.asarray(action, dtype=np.float64)[..., 0], -1.0, 1.0)
    v = np.clip(v + force * MC_POWER - MC_GRAVITY * np.cos(3 * p), -MC_MAX_V, MC_MAX_V)
    p = np.clip(p + v, MC_MIN_P, MC_MAX_P)
    v = np.where((p == MC_MIN_P) & (v < 0), 0.0, v)
    return np.stack([p, v], axis=-1)


def mc_height(p):
    """Hill elevation, ``sin(3p) * 0.45 + 0.55``."""
    return np.sin(3 * np.asarray(p)) * 0.45 + 0.55


def _goal_reward(goal_reached):
    def reward(s, a, s2):
        a = np.asarray(a, dtype=np.float64)
        return 100.0 * goal_reached(s2) - 0.1 * np.sum(a * a, axis=-1)

    return reward


def _never(s2):
    return np.zeros(np.shape(s2)[:-1], dtype=bool)


def _right_goal(s2):
    return np.asarray(s2)[..., 0] >= MC_GOAL


def _left_goal(s2):
    return np.asarray(s2)[..., 0] <= MC_LEFT_GOAL


def _height_reward(s, a, s2):
    h = mc_height(np.asarray(s2)[..., 0])
    return np.where(h >= 0.2, h * h, 0.0)


def _speed_reward(s, a, s2):
    v = np.asarray(s2)[..., 1]
    return v * v


def _zero_reward(s, a, s2):
    return np.zeros(np.shape(s2)[:-1])


MC_TASKS = {
    "standard": Task("standard", _goal_reward(_right_goal), _right_goal),
    "left": Task("left", _goal_reward(_left_goal), _left_goal),
    "speed": Task("speed", _speed_reward, _never),
    "height": Task("height", _height_reward, _never),
    # reward-free data collection keeps the environment's own goal termination
    "none": Task("none", _zero_reward, _right_goal),
}


def mc_reward(task: str, state, action, next_state):
    if task not in MC_TASKS:
        raise KeyError(f"unknown mountain-car task {task!r}; expected one of {sorted(MC_TASKS)}")
    return MC_TASKS[task].reward(state, action, next_state)


class MountainCar:
    spec = CmpSpec("mc", 2, 1, 999, (MC_MIN_P, -MC_MAX_V), (MC_MAX_P, MC_MAX_V))
    tasks = MC_TASKS
    physical_dim = 2

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([rng.uniform(-0.6, -0.4), 0.0])

    def step(self, phys, action):
        return mc_step(phys, action)

    def observe(self, phys):
        return np.asarray(phys, dtype=np.float64)

    def task(self, name: str) -> Task:
        try:
            return self.tasks[name]
        except KeyError:
            raise KeyError(f"unknown mountain-car task {name!r}; expected one of {sorted(self.tasks)}") from None


# ------------------------------------------------------------------ reacher


@dataclass(frozen=True)
class ReacherParams:
    l1: float = 0.1
    l2: float = 0.11
    m1: float = 1.0
    m2: float = 1.0
    damping: float = 0.01
    torque_gain: float = 1.0
    dt: float = 0.02
    obs_speed_limit: float = 5.0
    joint_speed_limit: float = 50.0


def _mass_matrix(q2, p: ReacherParams):
    lc1, lc2 = p.l1 / 2, p.l2 / 2
    i1, i2 = p.m1 * p.l1**2 / 12, p.m2 * p.l2**2 / 12
    c2 = np.cos(q2)
    m11 = p.m1 * lc1**2 + i1 + p.m2 * (p.l1**2 + lc2**2 + 2 * p.l1 * lc2 * c2) + i2
    m12 = p.m2 * (lc2**2 + p.l1 * lc2 * c2) + i2
    m22 = p.m2 * lc2**2 + i2
    return m11, m12, m22


def reacher_accel(phys, torques, p: ReacherParams):
    """Joint accelerations of a gravity-free two-link arm of uniform rods."""
    q2, dq1, dq2 = phys[..., 1], phys[..., 2], phys[..., 3]
    m11, m12, m22 = _mass_matrix(q2, p)
    h = p.m2 * p.l1 * (p.l2 / 2) * np.sin(q2)
    tau = p.torque_gain * np.clip(np.asarray(torques, dtype=np.float64), -1.0, 1.0)
    r1 = tau[..., 0] + h * dq2 * (2 * dq1 + dq2) - p.damping * dq1
    r2 = tau[..., 1] - h * dq1 * dq1 - p.damping * dq2
    det = m11 * m22 - m12 * m12
    return (m22 * r1 - m12 * r2) / det, (m11 * r2 - m12 * r1) / det


def reacher_energy(phys, p: ReacherParams = ReacherParams()):
    phys = np.asarray(phys, dtype=np.float64)
    m11, m12, m22 = _mass_matrix(phys[..., 1], p)
    dq1, dq2 = phys[..., 2], phys[..., 3]
    return 0.5 * (m11 * dq1 * dq1 + 2 * m12 * dq1 * dq2 + m22 * dq2 * dq2)


def reacher_step(phys, torques, p: ReacherParams = ReacherParams()):
    """Semi-implicit Euler step on the physical state ``(q1, q2, dq1, dq2)``."""
    phys = np.asarray(phys, dtype=np.float64)
    ddq1, ddq2 = reacher_accel(phys, torques, p)
    lim = p.joint_speed_limit
    dq1 = np.clip(phys[..., 2] + p.dt * ddq1, -lim, lim)
    dq2 = np.clip(phys[..., 3] + p.dt * ddq2, -lim, lim)
    q1 = phys[..., 0] + p.dt * dq1
    q2 = phys[..., 1] + p.dt * dq2
    return np.stack([q1, q2, dq1, dq2], axis=-1)


def fingertip_kinematics(phys, p: ReacherParams = ReacherParams()):
    """Fingertip (linear speed, tangential velocity, radial velocity).

    Tangential velocity is positive counter-clockwise about the base.
    """
    phys = np.asarray(phys, dtype=np.float64)
    q1, q2, dq1, dq2 = (phys[..., i] for i in range(4))
    a12 = q1 + q2
    x = p.l1 * np.cos(q1) + p.l2 * np.cos(a12)
    y = p.l1 * np.sin(q1) + p.l2 * np.sin(a12)
    vx = -p.l1 * np.sin(q1) * dq1 - p.l2 * np.sin(a12) * (dq1 + dq2)
    vy = p.l1 * np.cos(q1) * dq1 + p.l2 * np.cos(a12) * (dq1 + dq2)
    r = np.maximum(np.hypot(x, y), 1e-12)
    speed = np.hypot(vx, vy)
    tangential = (x * vy - y * vx) / r
    radial = (x * vx + y * vy) / r
    return speed, tangential, radial


REACHER_TASKS = {"speed": 6.0, "clockwise": -1.0, "c-clockwise": 1.0, "radial": 3.0}


def kinematic_reward(task: str, speed, tangential, radial):
    """Binary reward from fingertip kinematics."""
    if task == "speed":
        hit = np.asarray(speed) > 6.0
    elif task == "clockwise":
        hit = np.asarray(tangential) < -1.0
    elif task == "c-clockwise":
        hit = np.asarray(tangential) > 1.0
    elif task == "radial":
        hit = np.asarray(radial) > 3.0
    elif task == "none":
        hit = np.zeros(np.shape(speed), dtype=bool)
    else:
        raise KeyError(f"unknown reacher task {task!r}; expected one of {sorted(REACHER_TASKS)}")
    return hit.astype(np.float64)


def reacher_reward(task: str, phys, p: ReacherParams = ReacherParams()):
    return kinematic_reward(task, *fingertip_kinematics(phys, p))


class Reacher:
    """Two-link planar arm without target observations.

    Observations are ``(cos q1, sin q1, cos q2, sin q2, dq1, dq2)`` with the
    joint speeds clipped to the normalisation range; the simulator itself
    allows faster joints so fingertip thresholds are reachable.
    """

    spec = CmpSpec("reacher", 6, 2, 50, (-1, -1, -1, -1, -5, -5), (1, 1, 1, 1, 5, 5))
    physical_dim = 4

    def __init__(self, params: ReacherParams | None = None):
        self.params = params or ReacherParams()
        self.tasks = {
            name: Task(name, self._reward_fn(name), _never)
            for name in ["speed", "clockwise", "c-clockwise", "radial", "none"]
        }

    def _reward_fn(self, name):
        def reward(s, a, s2):
            return reacher_reward(name, s2, self.params)

        return reward

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        q = rng.uniform(-0.1, 0.1, size=2)
        dq = rng.uniform(-0.005, 0.005, size=2)
        return np.concatenate([q, dq])

    def step(self, phys, action):
        return reacher_step(phys, action, self.params)

    def observe(self, phys):
        phys = np.asarray(phys, dtype=np.float64)
        lim = self.params.obs_speed_limit
        q1, q2 = phys[..., 0], phys[..., 1]
        return np.stack(
            [np.cos(q1), np.sin(q1), np.cos(q2), np.sin(q2),
             np.clip(phys[..., 2], -lim, lim), np.clip(phys[..., 3], -lim, lim)],
            axis=-1,
        )

    def task(self, name: str) -> Task:
        try:
            return self.tasks[name]
        except KeyError:
            raise KeyError(f"unknown reacher task {name!r}; expected one of {sorted(REACHER_TASKS)}") from None


def make_env(name: str, **kwargs):
    if name == "mc":
        return MountainCar()
    if name == "reacher":
        return Reacher(ReacherParams(**kwargs) if kwargs else None)
    raise KeyError(f"unknown environment {name!r}; expected 'mc' or 'reacher'")


# ----------------------------------------------------------------- rollouts

# policy_fn(observations (B, d), rngs, deterministic) -> actions (B, a)
PolicyFn = Callable[[np.ndarray, list, bool], np.ndarray]


def rollout_batch(policy_fn: PolicyFn, env, task: str | Task, seeds, deterministic: bool = True,
                  horizon: int | None = None):
    """Simulate one episode per seed, all in lock-step.

    Row ``b`` of every observation batch belongs to episode ``b``; finished
    episodes are frozen. Returns ``(trajectories, returns)``, where returns
    are undiscounted reward sums.
    """
    task = env.task(task) if isinstance(task, str) else task
    seeds = [int(s) for s in seeds]
    horizon = horizon or env.spec.horizon
    rngs = [np.random.default_rng(s) for s in seeds]
    b = len(seeds)
    phys = np.stack([env.reset(r) for r in rngs])
    obs = [env.observe(phys)]
    acts = []
    alive = np.ones(b, dtype=bool)
    lengths = np.full(b, horizon)
    returns = np.zeros(b)
    for t in range(horizon):
        a = np.asarray(policy_fn(obs[-1], rngs, deterministic), dtype=np.float64)
        bad = ~np.all(np.isfinite(a), axis=-1) & alive
        if bad.any():
            raise RolloutError(f"policy {int(np.flatnonzero(bad)[0])} produced a non-finite action at step {t}")
        nxt = env.step(phys, a)
        r = task.reward(phys, a, nxt)
        returns += np.where(alive, r, 0.0)
        nxt = np.where(alive[:, None], nxt, phys)
        acts.append(np.where(alive[:, None], a, 0.0))
        obs.append(env.observe(nxt))
        phys = nxt
        finished = alive & task.done(nxt)
        lengths[finished] = t + 1
        alive &= ~finished
        if not alive.any():
            break
    obs = np.stack(obs, axis=1)
    acts = np.stack(acts, axis=1)
    trajs = [Trajectory(obs[i, : lengths[i] + 1], acts[i, : lengths[i]], seeds[i]) for i in range(b)]
    return trajs, returns


def rollout(policy_fn: PolicyFn, env, task: str | Task, seed: int, deterministic: bool = True):
    trajs, returns = rollout_batch(policy_fn, env, task, [seed], deterministic)
    return trajs[0], float(returns[0])
