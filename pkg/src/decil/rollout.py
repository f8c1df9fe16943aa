"""Closed-loop execution of DeCIL and baseline policies under observation noise."""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .envs import Environment
from .exceptions import NumericError, ShapeError
from .models import BaselinePolicy, DenoisingPolicy, DynamicsModel
from .seeding import derive_seed, make_rng


def decil_step(f: DynamicsModel, d: DenoisingPolicy, x_t):
    """Predict with ``f``, refine with ``d``; returns ``(x_hat_next, a_hat)`` raw."""
    x_t = np.asarray(x_t, dtype=float)
    if x_t.shape[-1] != f.state_dim or f.state_dim != d.state_dim:
        raise ShapeError(
            f"state has {x_t.shape[-1]} features; f expects {f.state_dim}, d expects {d.state_dim}"
        )
    stats = d.stats_
    xn = stats.norm_state(x_t)
    x_tilde = f.predict_normalized(xn)
    x_hat, a_hat = d.forward_normalized(xn, x_tilde)
    if not (np.all(np.isfinite(x_hat)) and np.all(np.isfinite(a_hat))):
        raise NumericError("non-finite network output in decil_step")
    return stats.denorm_state(x_hat), stats.denorm_action(a_hat)


class DecilAgent:
    """``f`` followed by ``d``; records the refined next-state prediction."""

    def __init__(self, f: DynamicsModel, d: DenoisingPolicy, name="decil"):
        self.f = f
        self.d = d
        self.name = name
        self.state_dim = d.state_dim

    def act(self, obs):
        x_hat, a_hat = decil_step(self.f, self.d, obs)
        return a_hat, x_hat


class BaselineAgent:
    def __init__(self, model: BaselinePolicy, name=None):
        self.model = model
        self.name = name or model.variant
        self.state_dim = model.state_dim

    def act(self, obs):
        a = self.model.predict(obs)
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite baseline action")
        return a, None


class ExpertAgent:
    """Scripted expert queried on the (possibly noisy) observation."""

    def __init__(self, env: Environment, name="expert"):
        self.env = env
        self.name = name
        self.state_dim = env.state_dim

    def act(self, obs):
        return self.env.expert_action(obs), None


@dataclass
class RolloutResult:
    states: list
    actions: list
    predicted_refined_states: list
    rewards: list
    total_reward: float
    success: bool
    obs_noise_sigma: float
    seed: int
    aborted: bool = False
    diagnostic: str = ""


def rollout(policy, env: Environment, obs_noise_sigma: float, seed: int) -> RolloutResult:
    """Run one episode.

    The policy sees ``x_t + eta`` (raw units); the environment always steps
    the true state.  One noise vector is drawn per step whether or not it is
    used, so equal seeds give equal draws across policies.
    """
    if policy.state_dim != env.state_dim:
        raise ShapeError(f"policy expects {policy.state_dim} state dims, env has {env.state_dim}")
    if obs_noise_sigma < 0:
        raise ValueError("obs_noise_sigma must be >= 0")
    x = env.initial_state(make_rng(seed, "initial_state"))
    noise_rng = make_rng(seed, "obs_noise")
    states, actions, refined, rewards = [x], [], [], []
    aborted, diagnostic = False, ""
    for t in range(env.horizon):
        eta = noise_rng.standard_normal(env.state_dim)
        try:
            a, x_hat = policy.act(x + obs_noise_sigma * eta)
            x_next = env.step(x, a)
            if not np.all(np.isfinite(x_next)):
                raise NumericError("non-finite state")
        except NumericError as exc:
            aborted, diagnostic = True, f"step {t}: {exc}"
            break
        rewards.append(env.reward(x, a))
        actions.append(np.asarray(a, dtype=float))
        if x_hat is not None:
            refined.append(x_hat)
        states.append(x_next)
        x = x_next
    total = float(np.sum(rewards)) if not aborted else float("nan")
    success = (not aborted) and env.success(states)
    return RolloutResult(states, actions, refined, rewards, total, success,
                         float(obs_noise_sigma), int(seed), aborted, diagnostic)


@dataclass
class EvaluationTable:
    episodes: list = field(default_factory=list)
    summary: list = field(default_factory=list)

    CSV_COLUMNS = ("policy", "noise_sigma", "episode", "total_reward", "success", "seed")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.CSV_COLUMNS)
            for row in self.episodes:
                w.writerow([row[c] if c != "success" else int(row[c]) for c in self.CSV_COLUMNS])

    def write_summary(self, path):
        with open(path, "w") as fh:
            json.dump({"summary": self.summary}, fh, indent=2)

    def row(self, policy, noise_sigma):
        for r in self.summary:
            if r["policy"] == policy and r["noise_sigma"] == noise_sigma:
                return r
        raise KeyError((policy, noise_sigma))


def _threads():
    try:
        return max(1, int(os.environ.get("DECIL_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(policies, env: Environment, noise_levels, n_episodes: int, seed: int) -> EvaluationTable:
    """Mean/std reward and success rate per (policy, noise level).

    Episode ``e`` uses seed ``derive_seed(seed, f"episode/{e}")`` for every
    policy and noise level, which fixes its initial state and noise draws.
    Standard deviations are population (ddof=0).
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if isinstance(policies, dict):
        policies = list(policies.items())
    else:
        policies = [(p.name, p) for p in policies]
    ep_seeds = [derive_seed(seed, f"episode/{e}") for e in range(n_episodes)]
    jobs = [(name, pol, float(s), e)
            for name, pol in policies for s in noise_levels for e in range(n_episodes)]

    def run(job):
        name, pol, s, e = job
        return rollout(pol, env, s, ep_seeds[e])

    n = _threads()
    if n > 1:
        with ThreadPoolExecutor(n) as ex:
            results = list(ex.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    finite = [r.total_reward for r in results if not r.aborted]
    worst = min(finite) if finite else float("nan")
    table = EvaluationTable()
    for (name, _, s, e), r in zip(jobs, results):
        table.episodes.append({
            "policy": name, "noise_sigma": s, "episode": e,
            "total_reward": worst if r.aborted else r.total_reward,
            "success": bool(r.success), "seed": ep_seeds[e], "aborted": r.aborted,
        })
    for name, _ in policies:
        for s in noise_levels:
            rows = [r for r in table.episodes if r["policy"] == name and r["noise_sigma"] == float(s)]
            rew = np.array([r["total_reward"] for r in rows])
            table.summary.append({
                "policy": name, "noise_sigma": float(s), "n_episodes": len(rows),
                "mean_reward": float(rew.mean()), "std_reward": float(rew.std()),
                "success_rate": float(np.mean([r["success"] for r in rows])),
                "n_aborted": int(sum(r["aborted"] for r in rows)),
            })
    return table
