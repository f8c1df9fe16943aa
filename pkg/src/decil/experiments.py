"""Config-driven experiment pipelines behind the command line.

Each ``run_*`` function takes an :class:`ExperimentConfig`, writes its
primary outputs (CSV/JSON) under ``config.output_dir`` and returns a small
summary dict.  Outputs contain no timestamps, so reruns are byte-identical.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import os
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import (
    composite_jacobians, error_bound_audit, jacobian_norm_audit, linearization_constant,
    quadratic_loss_check, sensitivity_ratio, untrained_copy, vector_field_export,
)
from .envs import TrajectoryDataset, generate_dataset, make_env
from .exceptions import NumericError
from .models import TrainConfig, load_model, train_baseline, train_denoiser, train_dynamics
from .rollout import BaselineAgent, DecilAgent, ExpertAgent, evaluate
from .seeding import make_rng

log = logging.getLogger(__name__)

MODEL_KINDS = ("dynamics", "denoiser", "bc", "noisy_bc", "joint")


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration (exit code 2)."""


@dataclass
class ExperimentConfig:
    env_id: str = "sinusoid"
    n_traj: int = 20
    train: TrainConfig = field(default_factory=TrainConfig)
    noise_levels: list = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.4])
    n_episodes: int = 20
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    output_dir: str = "runs/default"
    dataset: str | None = None
    policies: list = field(default_factory=list)
    sigma_sweep: list = field(default_factory=lambda: [0.02, 0.05, 0.1, 0.2, 0.4])
    n_mc: int = 500
    n_probe: int = 100
    n_chain_probe: int = 50
    quadratic_sigmas: list = field(default_factory=lambda: [0.005, 0.01, 0.02])
    quadratic_n_mc: int = 100_000
    fig1: dict = field(default_factory=lambda: {
        "grid": [0.0, 2 * np.pi, -1.5, 1.5], "resolution": 20, "p0": 1.0,
        "offset": 0.5, "steps": 40,
    })

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if any(s < 0 for s in self.noise_levels) or list(self.noise_levels) != sorted(self.noise_levels):
            raise ConfigError("noise_levels must be non-negative and sorted ascending")
        if self.n_traj < 1 or self.n_episodes < 1:
            raise ConfigError("n_traj and n_episodes must be >= 1")
        try:
            make_env(self.env_id)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    @property
    def dataset_path(self) -> Path:
        return Path(self.dataset) if self.dataset else self.out / "dataset.json"

    def to_dict(self) -> dict:
        d = {k: copy.deepcopy(getattr(self, k)) for k in self.__dataclass_fields__}
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``KEY=VALUE`` strings; dotted keys reach into nested dicts."""
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = _parse_value(value)
    return raw


def load_config(path, overrides=(), seed=None, out=None) -> tuple[ExperimentConfig, dict]:
    """Read a JSON config, apply CLI overrides and return ``(config, echo)``."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    applied = list(overrides or ())
    if seed is not None:
        applied.append(f"seeds=[{int(seed)}]")
        applied.append(f"train.seed={int(seed)}")
    if out is not None:
        applied.append(f"output_dir={json.dumps(str(out))}")
    resolved = apply_overrides(raw, applied)
    cfg = ExperimentConfig.from_dict(resolved)
    echo = {"source": str(path), "overrides": applied, "resolved": cfg.to_dict()}
    return cfg, echo


def write_echo(cfg: ExperimentConfig, echo: dict):
    cfg.out.mkdir(parents=True, exist_ok=True)
    with open(cfg.out / "config.json", "w") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def _train_cfg(cfg: ExperimentConfig, seed: int, **changes) -> TrainConfig:
    d = cfg.train.to_dict()
    d.update(seed=seed, **changes)
    return TrainConfig.from_dict(d)


# ---------------------------------------------------------------- gen-data

def run_gen_data(cfg: ExperimentConfig) -> dict:
    env = make_env(cfg.env_id)
    data = generate_dataset(env, cfg.n_traj, cfg.train.seed)
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = cfg.dataset_path
    path.parent.mkdir(parents=True, exist_ok=True)
    data.save(path)
    return {"path": str(path), "n_trajectories": len(data.trajectories),
            "n_transitions": len(data), "state_mean": data.state_mean.tolist(),
            "state_std": data.state_std.tolist()}


# ------------------------------------------------------------------- train

def _load_dataset(cfg: ExperimentConfig) -> TrajectoryDataset:
    path = cfg.dataset_path
    if not path.exists():
        raise ConfigError(f"dataset file not found: {path}")
    return TrajectoryDataset.load(path)


def train_model(data, tcfg: TrainConfig, model_kind: str):
    if model_kind == "dynamics":
        model, hist = train_dynamics(data, tcfg)
        return model, {"loss": hist}
    if model_kind == "denoiser":
        model, hist = train_denoiser(data, tcfg)
        return model, hist
    if model_kind in ("bc", "noisy_bc", "joint"):
        model, hist = train_baseline(data, tcfg, model_kind)
        if model_kind == "joint":
            return model, {"total": hist, "state": model.state_loss_history_,
                           "action": model.action_loss_history_}
        return model, {"loss": hist}
    raise ConfigError(f"unknown model kind {model_kind!r}; valid: {', '.join(MODEL_KINDS)}")


def run_train(cfg: ExperimentConfig, model_kind: str) -> dict:
    if model_kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {model_kind!r}; valid: {', '.join(MODEL_KINDS)}")
    data = _load_dataset(cfg)
    model, hist = train_model(data, cfg.train, model_kind)
    cfg.out.mkdir(parents=True, exist_ok=True)
    model_path = cfg.out / f"model_{model_kind}.json"
    model.save(model_path, env_id=data.env_id, cfg=cfg.train.to_dict())
    cols = list(hist)
    rows = [[e + 1, *(float(hist[c][e]) for c in cols)] for e in range(cfg.train.epochs)]
    loss_path = cfg.out / f"loss_{model_kind}.csv"
    _write_csv(loss_path, ["epoch", *cols], rows)
    return {"model": str(model_path), "loss_csv": str(loss_path),
            "final_loss": float(hist[cols[0]][-1])}


# ---------------------------------------------------------------- evaluate

def _load_policy(entry: dict, env):
    kind = entry.get("kind")
    name = entry.get("name", kind)

    def need(key):
        if key not in entry:
            raise ConfigError(f"policy {name!r} is missing {key!r}")
        path = Path(entry[key])
        if not path.exists():
            raise ConfigError(f"model file not found for policy {name!r}: {path}")
        return load_model(path)

    if kind == "decil":
        return name, DecilAgent(need("dynamics"), need("denoiser"), name)
    if kind == "baseline":
        return name, BaselineAgent(need("model"), name)
    if kind == "expert":
        return name, ExpertAgent(env, name)
    raise ConfigError(f"policy {name!r}: unknown kind {kind!r} (decil, baseline, expert)")


def run_evaluate(cfg: ExperimentConfig) -> dict:
    if not cfg.policies:
        raise ConfigError("evaluate needs a non-empty 'policies' list")
    env = make_env(cfg.env_id)
    policies = dict(_load_policy(p, env) for p in cfg.policies)
    table = evaluate(policies, env, cfg.noise_levels, cfg.n_episodes, cfg.train.seed)
    cfg.out.mkdir(parents=True, exist_ok=True)
    table.write_csv(cfg.out / "results.csv")
    table.write_summary(cfg.out / "summary.json")
    return {"results": str(cfg.out / "results.csv"), "summary": table.summary}


# -------------------------------------------------------------------- fig2

def run_fig2(cfg: ExperimentConfig) -> dict:
    """Sensitivity-reduction ratio against the denoiser's training noise.

    ``n`` is the number of values averaged: probe states for a seed row,
    seeds for an aggregate row.
    """
    env = make_env(cfg.env_id)
    rows, cells = [], {}
    for seed in cfg.seeds:
        data = generate_dataset(env, cfg.n_traj, seed)
        f, _ = train_dynamics(data, _train_cfg(cfg, seed))
        for sigma in cfg.sigma_sweep:
            try:
                d, _ = train_denoiser(data, _train_cfg(cfg, seed, sigma=sigma))
                rec = sensitivity_ratio(f, d, data, cfg.train.sigma_s, cfg.n_mc, seed)
                cells[(sigma, seed)] = rec.mean_rho
                rows.append([sigma, seed, rec.mean_rho, "ok", len(rec.per_state_rho), rec.n_excluded])
            except NumericError as exc:
                log.warning("fig2 cell sigma=%s seed=%s failed: %s", sigma, seed, exc)
                rows.append([sigma, seed, "", "failed", 0, ""])
    aggregate = {}
    for sigma in cfg.sigma_sweep:
        vals = [cells[(sigma, s)] for s in cfg.seeds if (sigma, s) in cells]
        aggregate[sigma] = float(np.mean(vals)) if vals else float("nan")
        rows.append([sigma, "mean", aggregate[sigma], "aggregate", len(vals), ""])
    cfg.out.mkdir(parents=True, exist_ok=True)
    _write_csv(cfg.out / "fig2.csv", ["sigma_train", "seed", "mean_rho", "status", "n", "n_excluded"], rows)
    return {"csv": str(cfg.out / "fig2.csv"), "aggregate": aggregate}


# ---------------------------------------------------------------- ablation

def run_ablation(cfg: ExperimentConfig) -> dict:
    """DeCIL against the joint next-state/action baseline, paired seeds."""
    env = make_env(cfg.env_id)
    rows, episode_rows = [], []
    per_policy = {}
    for seed in cfg.seeds:
        data = generate_dataset(env, cfg.n_traj, seed)
        tcfg = _train_cfg(cfg, seed)
        f, _ = train_dynamics(data, tcfg)
        d, _ = train_denoiser(data, tcfg)
        joint, _ = train_baseline(data, tcfg, "joint")
        table = evaluate({"decil": DecilAgent(f, d), "joint": BaselineAgent(joint, "joint")},
                         env, cfg.noise_levels, cfg.n_episodes, seed)
        for r in table.summary:
            rows.append([r["policy"], r["noise_sigma"], seed, r["mean_reward"],
                         r["std_reward"], r["success_rate"]])
        for r in table.episodes:
            episode_rows.append([r["policy"], r["noise_sigma"], seed, r["episode"],
                                 r["total_reward"], int(r["success"]), r["seed"]])
            per_policy.setdefault((r["policy"], r["noise_sigma"]), []).append(
                (r["total_reward"], r["success"]))
    summary = []
    for (policy, noise), vals in per_policy.items():
        rew = np.array([v[0] for v in vals])
        summary.append({"policy": policy, "noise_sigma": noise, "n": len(rew),
                        "mean_reward": float(rew.mean()), "std_reward": float(rew.std()),
                        "success_rate": float(np.mean([v[1] for v in vals]))})
        rows.append([policy, noise, "all", float(rew.mean()), float(rew.std()),
                     float(np.mean([v[1] for v in vals]))])
    cfg.out.mkdir(parents=True, exist_ok=True)
    _write_csv(cfg.out / "ablation.csv",
               ["policy", "noise_sigma", "train_seed", "mean_reward", "std_reward", "success_rate"],
               rows)
    _write_csv(cfg.out / "ablation_episodes.csv",
               ["policy", "noise_sigma", "train_seed", "episode", "total_reward", "success", "seed"],
               episode_rows)
    _write_json(cfg.out / "ablation_summary.json", {"env_id": cfg.env_id, "summary": summary})
    return {"csv": str(cfg.out / "ablation.csv"), "summary": summary}


# ------------------------------------------------------------------- audit

@contextmanager
def _timed(timings, key):
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[key] += time.perf_counter() - start


def run_audit(cfg: ExperimentConfig) -> dict:
    """Theory checks on models trained per seed; one JSON report plus field CSVs.

    Wall-clock seconds per section are returned under ``timings`` (they go
    to metadata.json, not to the report).
    """
    env = make_env(cfg.env_id)
    timings = defaultdict(float)
    cfg.out.mkdir(parents=True, exist_ok=True)
    report = {"jacobians": {}, "jacobian_norm_audit": {}, "quadratic_loss_check": [],
              "error_bound_audit": {}, "vector_field_export": {}, "linearization": {}}
    for seed in cfg.seeds:
        data = generate_dataset(env, cfg.n_traj, seed)
        tcfg = _train_cfg(cfg, seed)
        with _timed(timings, "training"):
            f, _ = train_dynamics(data, tcfg)
            d, _ = train_denoiser(data, tcfg)
        X = data.arrays[0]
        idx = np.sort(make_rng(seed, "chain_probe").choice(len(X), cfg.n_chain_probe, replace=False))
        with _timed(timings, "jacobians"):
            probes = [composite_jacobians(f, d, X[i]) for i in idx]
        report["jacobians"][str(seed)] = {
            "n_probe": len(probes),
            "all_pass": all(p.passes for p in probes),
            "max_residual": max(p.chain_rule_residual for p in probes),
            "max_relative_residual": max(p.chain_rule_residual / (1 + p.fro_norms["J_h"])
                                         for p in probes),
            "mean_fro_norms": {k: float(np.mean([p.fro_norms[k] for p in probes]))
                               for k in probes[0].fro_norms},
            "samples": [p.to_dict() for p in probes[:3]],
        }
        with _timed(timings, "jacobian_norm_audit"):
            report["jacobian_norm_audit"][str(seed)] = jacobian_norm_audit(
                untrained_copy(d), d, data, cfg.n_probe, seed)
        with _timed(timings, "error_bound_audit"):
            report["error_bound_audit"][str(seed)] = error_bound_audit(env, f, d, data, seed=seed)
        report["linearization"][str(seed)] = {
            "C": linearization_constant(f, d, X[idx[0]], seed=seed), "radius": 0.05}
        if env.state_dim == 2:
            fig = cfg.fig1
            p0 = float(fig["p0"])
            x0 = np.array([p0, np.sin(p0) + float(fig["offset"])])
            with _timed(timings, "vector_field_export"):
                vf = vector_field_export(
                    f, d, fig["grid"], int(fig["resolution"]), env.dt, x0, int(fig["steps"]),
                    cfg.out / f"vector_field_seed{seed}.csv",
                    getattr(env, "manifold_distance", None))
            report["vector_field_export"][str(seed)] = {
                k: vf[k] for k in ("n_rows", "final_distance_f", "final_distance_fd",
                                   "mean_distance_f", "mean_distance_fd") if k in vf}
            report["vector_field_export"][str(seed)]["csv"] = f"vector_field_seed{seed}.csv"
    with _timed(timings, "quadratic_loss_check"):
        for sigma in cfg.quadratic_sigmas:
            q = quadratic_loss_check(sigma, cfg.quadratic_n_mc, cfg.train.seed)
            report["quadratic_loss_check"].append(q.__dict__)
    _write_json(cfg.out / "audit.json", report)
    return {**report, "timings": dict(timings)}


def write_metadata(cfg: ExperimentConfig, command: str, elapsed: float | None = None,
                   timings: dict | None = None):
    """Non-deterministic run metadata, kept apart from primary outputs."""
    import datetime
    import platform

    cfg.out.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.out / "metadata.json", {
        "command": command,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "python": platform.python_version(),
        "threads": os.environ.get("DECIL_THREADS", "1"),
        "elapsed_seconds": elapsed,
        "timings_seconds": timings or {},
    })
