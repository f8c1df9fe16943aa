"""Deterministic toy environments, scripted experts and expert datasets."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .exceptions import ExpertFailureError, ShapeError
from .seeding import make_rng

STD_FLOOR = 1e-6


class Environment:
    """Deterministic environment with a scripted expert.

    Subclasses set ``env_id``, ``state_dim``, ``action_dim``, ``horizon`` and
    ``dt`` and implement the five behavioural methods.
    """

    env_id: str
    state_dim: int
    action_dim: int
    horizon: int
    dt: float

    def step(self, x, a) -> np.ndarray:
        raise NotImplementedError

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def expert_action(self, x) -> np.ndarray:
        raise NotImplementedError

    def reward(self, x, a) -> float:
        raise NotImplementedError

    def success(self, states) -> bool:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class SinusoidEnv(Environment):
    """Point moving in the plane, expert follows ``q = sin(p)`` at unit speed.

    The expert's tangent direction carries a correction ``gain * (sin p - q)``
    on its vertical component.  It vanishes on the curve, so on-manifold
    actions are exactly the normalised tangent ``(1, cos p)``; off the curve
    it removes the Euler step's curvature drift.
    """

    env_id = "sinusoid"
    state_dim = 2
    action_dim = 2
    horizon = 60
    dt = 0.1

    def __init__(self, correction_gain: float = 5.0):
        self.correction_gain = correction_gain

    def step(self, x, a):
        return np.asarray(x, dtype=float) + self.dt * np.asarray(a, dtype=float)

    def initial_state(self, rng):
        p = rng.uniform(0.0, 2.0 * np.pi)
        return np.array([p, np.sin(p)])

    def expert_action(self, x):
        p, q = x[0], x[1]
        v = np.array([1.0, np.cos(p) + self.correction_gain * (np.sin(p) - q)])
        return v / np.linalg.norm(v)

    @staticmethod
    def manifold_distance(x) -> np.ndarray:
        """Vertical distance ``|q - sin p|``; works on single states or rows."""
        x = np.asarray(x, dtype=float)
        return np.abs(x[..., 1] - np.sin(x[..., 0]))

    def reward(self, x, a):
        return -float(self.manifold_distance(x))

    def success(self, states):
        return bool(np.mean(self.manifold_distance(np.asarray(states))) < 0.1)


class PointMassCrossingEnv(Environment):
    """Robot driving to a goal while a scripted agent crosses its path.

    State is ``(robot xy, goal xy, crossing agent xy)``.  The agent moves in
    +y at constant speed, perpendicular to the robot's nominal +x path.
    """

    env_id = "pointmass_crossing"
    state_dim = 6
    action_dim = 2
    horizon = 80
    dt = 0.1

    agent_velocity = np.array([0.0, 0.5])
    max_speed = 1.0
    goal_gain = 1.0
    repulsion_gain = 1.5
    repulsion_radius = 0.5
    collision_radius = 0.2
    goal_radius = 0.1

    def clip_action(self, a):
        a = np.asarray(a, dtype=float)
        n = np.linalg.norm(a)
        return a * (self.max_speed / n) if n > self.max_speed else a

    def step(self, x, a):
        x = np.asarray(x, dtype=float)
        out = x.copy()
        out[0:2] = x[0:2] + self.dt * self.clip_action(a)
        out[4:6] = x[4:6] + self.dt * self.agent_velocity
        return out

    def initial_state(self, rng):
        robot = rng.uniform(-0.1, 0.1, size=2)
        goal = np.array([3.0, 0.0]) + rng.uniform(-0.2, 0.2, size=2)
        agent = np.array([rng.uniform(1.0, 1.5), rng.uniform(-2.0, -1.0)])
        return np.concatenate([robot, goal, agent])

    def expert_action(self, x):
        robot, goal, agent = x[0:2], x[2:4], x[4:6]
        a = self.goal_gain * (goal - robot)
        away = robot - agent
        dist = np.linalg.norm(away)
        if 0.0 < dist < self.repulsion_radius:
            push = (self.repulsion_radius - dist) / self.repulsion_radius
            a = a + self.repulsion_gain * push * away / dist
        return self.clip_action(a)

    def goal_distance(self, x) -> float:
        return float(np.linalg.norm(x[0:2] - x[2:4]))

    def collided(self, x) -> bool:
        return bool(np.linalg.norm(x[0:2] - x[4:6]) < self.collision_radius)

    def reward(self, x, a):
        return -self.goal_distance(x) - 10.0 * self.collided(x)

    def success(self, states):
        states = np.asarray(states)
        if any(self.collided(s) for s in states):
            return False
        return any(self.goal_distance(s) < self.goal_radius for s in states)


ENVIRONMENTS = {
    SinusoidEnv.env_id: SinusoidEnv,
    PointMassCrossingEnv.env_id: PointMassCrossingEnv,
}


def make_env(env_id: str) -> Environment:
    try:
        return ENVIRONMENTS[env_id]()
    except KeyError:
        raise ValueError(
            f"unknown env_id {env_id!r}; valid options: {', '.join(sorted(ENVIRONMENTS))}"
        ) from None


def sinusoid_env() -> SinusoidEnv:
    return SinusoidEnv()


def pointmass_crossing_env() -> PointMassCrossingEnv:
    return PointMassCrossingEnv()


@dataclass(frozen=True)
class Transition:
    x_t: np.ndarray
    a_t: np.ndarray
    x_next: np.ndarray


@dataclass(frozen=True)
class NormStats:
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in
                ("state_mean", "state_std", "action_mean", "action_std")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.asarray(d[k], dtype=float) for k in
                     ("state_mean", "state_std", "action_mean", "action_std")))

    @classmethod
    def identity(cls, state_dim, action_dim):
        return cls(np.zeros(state_dim), np.ones(state_dim),
                   np.zeros(action_dim), np.ones(action_dim))

    def norm_state(self, x):
        return normalize(x, self.state_mean, self.state_std)

    def denorm_state(self, z):
        return denormalize(z, self.state_mean, self.state_std)

    def norm_action(self, a):
        return normalize(a, self.action_mean, self.action_std)

    def denorm_action(self, z):
        return denormalize(z, self.action_mean, self.action_std)


def _check_shapes(trajectories):
    ds = {t.x_t.shape for tr in trajectories for t in tr} | \
         {t.x_next.shape for tr in trajectories for t in tr}
    da = {t.a_t.shape for tr in trajectories for t in tr}
    if len(ds) > 1 or len(da) > 1:
        raise ShapeError("all transitions must share state and action dimensions")


@dataclass
class TrajectoryDataset:
    trajectories: list[list[Transition]]
    stats: NormStats
    env_id: str = "custom"
    seed: int = 0

    def __post_init__(self):
        _check_shapes(self.trajectories)

    @classmethod
    def from_trajectories(cls, trajectories, env_id="custom", seed=0):
        """Build a dataset and compute its normalisation statistics."""
        flat = [t for tr in trajectories for t in tr]
        if not flat:
            raise ValueError("dataset has no transitions")
        _check_shapes(trajectories)
        states = np.concatenate([np.array([t.x_t for t in flat]),
                                 np.array([t.x_next for t in flat])])
        A = np.array([t.a_t for t in flat])
        stats = NormStats(
            states.mean(axis=0), np.maximum(states.std(axis=0), STD_FLOOR),
            A.mean(axis=0), np.maximum(A.std(axis=0), STD_FLOOR),
        )
        return cls([list(tr) for tr in trajectories], stats, env_id, seed)

    @classmethod
    def from_arrays(cls, X, A, X_next, env_id="custom", seed=0):
        """Single-trajectory dataset from aligned arrays (mostly for tests)."""
        trs = [Transition(np.asarray(x, float), np.atleast_1d(np.asarray(a, float)),
                          np.asarray(xn, float))
               for x, a, xn in zip(X, A, X_next)]
        return cls.from_trajectories([trs], env_id, seed)

    def __len__(self):
        return sum(len(tr) for tr in self.trajectories)

    @property
    def state_dim(self):
        return self.trajectories[0][0].x_t.shape[0]

    @property
    def action_dim(self):
        return self.trajectories[0][0].a_t.shape[0]

    @property
    def state_mean(self):
        return self.stats.state_mean

    @property
    def state_std(self):
        return self.stats.state_std

    @property
    def action_mean(self):
        return self.stats.action_mean

    @property
    def action_std(self):
        return self.stats.action_std

    @cached_property
    def arrays(self):
        """``(X, A, X_next)`` stacked over all transitions, raw units."""
        flat = [t for tr in self.trajectories for t in tr]
        return (np.array([t.x_t for t in flat]), np.array([t.a_t for t in flat]),
                np.array([t.x_next for t in flat]))

    def to_dict(self):
        return {
            "env_id": self.env_id,
            "seed": int(self.seed),
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "stats": self.stats.to_dict(),
            "trajectories": [
                [{"x": t.x_t.tolist(), "a": t.a_t.tolist(), "x_next": t.x_next.tolist()}
                 for t in tr]
                for tr in self.trajectories
            ],
        }

    @classmethod
    def from_dict(cls, d):
        trs = [[Transition(np.asarray(s["x"], float), np.asarray(s["a"], float),
                           np.asarray(s["x_next"], float)) for s in tr]
               for tr in d["trajectories"]]
        return cls(trs, NormStats.from_dict(d["stats"]), d["env_id"], d["seed"])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def expert_episode(env: Environment, x0) -> list[Transition]:
    x = np.asarray(x0, dtype=float)
    out = []
    for _ in range(env.horizon):
        a = env.expert_action(x)
        xn = env.step(x, a)
        out.append(Transition(x, np.asarray(a, float), xn))
        x = xn
    return out


def generate_dataset(env: Environment, n_traj: int, seed: int) -> TrajectoryDataset:
    """Roll the scripted expert ``n_traj`` times.

    Attempt ``k`` draws its initial state from sub-seed ``episode/k``; failed
    episodes are skipped and the next sub-seed is tried.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    trajectories = []
    attempt = 0
    while len(trajectories) < n_traj:
        if attempt >= 10 * n_traj:
            raise ExpertFailureError(
                f"expert succeeded on only {len(trajectories)} of {attempt} episodes"
            )
        x0 = env.initial_state(make_rng(seed, f"episode/{attempt}"))
        attempt += 1
        episode = expert_episode(env, x0)
        states = [episode[0].x_t] + [t.x_next for t in episode]
        if env.success(states):
            trajectories.append(episode)
    return TrajectoryDataset.from_trajectories(trajectories, env.env_id, seed)


def add_gaussian_noise(v, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    v = np.asarray(v, dtype=float)
    if sigma == 0:
        return v.copy()
    return v + sigma * rng.standard_normal(v.shape)


def normalize(v, mean, std):
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != np.shape(mean)[-1] or np.shape(mean) != np.shape(std):
        raise ShapeError(f"cannot normalize shape {v.shape} with stats of shape {np.shape(mean)}")
    return (v - mean) / std


def denormalize(z, mean, std):
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != np.shape(mean)[-1] or np.shape(mean) != np.shape(std):
        raise ShapeError(f"cannot denormalize shape {z.shape} with stats of shape {np.shape(mean)}")
    return z * std + mean
