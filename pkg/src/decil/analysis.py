"""Numerical checks of the contraction argument behind DeCIL.

All Jacobians here are central finite differences, never the analytic
backward pass, so they audit the networks independently.  Model Jacobians
are taken in the normalised coordinates the networks are trained in;
environment Jacobians in raw units.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .envs import Environment, TrajectoryDataset
from .exceptions import NumericError, ShapeError
from .models import DenoisingPolicy, DynamicsModel
from .rollout import decil_step
from .seeding import make_rng


def fd_jacobian(fn, x, eps: float = 1e-4) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` at ``x``, shape ``(m, n)``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.shape[0]):
        e = np.zeros_like(x)
        e[j] = eps
        with np.errstate(invalid="ignore", over="ignore"):
            col = (np.asarray(fn(x + e), dtype=float) - np.asarray(fn(x - e), dtype=float)) / (2 * eps)
        if not np.all(np.isfinite(col)):
            raise NumericError(f"non-finite finite difference in column {j}")
        cols.append(col)
    return np.stack(cols, axis=1)


def spectral_norm(J: np.ndarray, iters: int = 50) -> float:
    """Largest singular value by power iteration on ``J^T J``."""
    M = J.T @ J
    v = np.ones(M.shape[0]) / np.sqrt(M.shape[0])
    for _ in range(iters):
        w = M @ v
        n = np.linalg.norm(w)
        if n == 0.0:
            return 0.0
        v = w / n
    return float(np.sqrt(max(v @ M @ v, 0.0)))


@dataclass
class JacobianReport:
    probe_state: np.ndarray
    J_f: np.ndarray
    J_gx: np.ndarray
    J_gy: np.ndarray
    J_h: np.ndarray
    fro_norms: dict
    chain_rule_residual: float

    @property
    def tolerance(self) -> float:
        return 1e-4 * (1.0 + self.fro_norms["J_h"])

    @property
    def passes(self) -> bool:
        return bool(self.chain_rule_residual < self.tolerance)

    def to_dict(self):
        return {
            "probe_state": self.probe_state.tolist(),
            "J_f": self.J_f.tolist(), "J_gx": self.J_gx.tolist(),
            "J_gy": self.J_gy.tolist(), "J_h": self.J_h.tolist(),
            "fro_norms": self.fro_norms,
            "chain_rule_residual": self.chain_rule_residual,
            "tolerance": self.tolerance, "passes": self.passes,
        }


def composite_jacobians(f: DynamicsModel, d: DenoisingPolicy, x, eps: float = 1e-4) -> JacobianReport:
    """Jacobians of ``f``, of the state head ``g`` in each input block, and of ``h(x) = g(x, f(x))``.

    ``x`` is a raw state; differentiation happens in normalised coordinates.
    """
    if f.state_dim != d.state_dim or np.shape(x)[-1] != f.state_dim:
        raise ShapeError("state dimensions of x, f and d disagree")
    xn = d.stats_.norm_state(np.asarray(x, dtype=float))
    fx = f.predict_normalized(xn)
    J_f = fd_jacobian(f.predict_normalized, xn, eps)
    J_gx = fd_jacobian(lambda u: d.state_head_normalized(u, fx), xn, eps)
    J_gy = fd_jacobian(lambda v: d.state_head_normalized(xn, v), fx, eps)
    J_h = fd_jacobian(lambda u: d.state_head_normalized(u, f.predict_normalized(u)), xn, eps)
    residual = float(np.linalg.norm(J_h - (J_gx + J_gy @ J_f)))
    norms = {k: float(np.linalg.norm(v)) for k, v in
             (("J_f", J_f), ("J_gx", J_gx), ("J_gy", J_gy), ("J_h", J_h))}
    return JacobianReport(np.asarray(x, dtype=float), J_f, J_gx, J_gy, J_h, norms, residual)


def untrained_copy(model):
    """The estimator at its initial parameters (what ``fit`` starts from)."""
    clone = type(model)(**model.get_params())
    clone.stats_ = model.stats_
    clone.net_ = clone._init_params(model.net_.n_in, model.net_.n_out)
    return clone


def _probe_indices(n_total, n_probe, seed):
    if n_probe >= n_total:
        return np.arange(n_total)
    return np.sort(make_rng(seed, "probe").choice(n_total, size=n_probe, replace=False))


def jacobian_norm_audit(d_before: DenoisingPolicy, d_after: DenoisingPolicy,
                        data: TrajectoryDataset, n_probe: int = 100, seed: int = 0,
                        eps: float = 1e-4) -> dict:
    """Compare ``||dg/dy||_F`` at ``(x_t, y = x_next)`` for two policies."""
    if d_before.net_.layer_dims != d_after.net_.layer_dims:
        raise ShapeError("policies must share an architecture")
    X, _, Xn = data.arrays
    idx = _probe_indices(len(X), n_probe, seed)
    stats = data.stats
    pairs = []
    for i in idx:
        xn, yn = stats.norm_state(X[i]), stats.norm_state(Xn[i])
        b = np.linalg.norm(fd_jacobian(lambda v: d_before.state_head_normalized(xn, v), yn, eps))
        a = np.linalg.norm(fd_jacobian(lambda v: d_after.state_head_normalized(xn, v), yn, eps))
        pairs.append((float(b), float(a)))
    before = np.array([p[0] for p in pairs])
    after = np.array([p[1] for p in pairs])
    return {
        "indices": idx.tolist(),
        "norm_before": before.tolist(),
        "norm_after": after.tolist(),
        "fraction_reduced": float(np.mean(after < before)),
        "degenerate_equal": bool(np.array_equal(before, after)),
        "mean_before": float(before.mean()),
        "mean_after": float(after.mean()),
    }


@dataclass
class QuadraticCheck:
    sigma: float
    estimate: float
    predicted: float
    relative_error: float
    n_mc: int


def quadratic_loss_check(sigma: float, n_mc: int, seed: int, J=None, x_next=None) -> QuadraticCheck:
    """Monte Carlo denoising loss of the linear denoiser ``g(y) = x + J (y - x)``.

    For such ``g`` the loss is exactly ``sigma^2 ||J||_F^2`` in expectation.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    J = np.array([[0.6, -0.2], [0.1, 0.3]]) if J is None else np.asarray(J, dtype=float)
    x_next = np.zeros(J.shape[1]) if x_next is None else np.asarray(x_next, dtype=float)
    eta = sigma * make_rng(seed, "quadratic").standard_normal((n_mc, J.shape[1]))
    y = x_next + eta
    g = x_next + (y - x_next) @ J.T
    estimate = float(np.mean(np.sum((g - x_next) ** 2, axis=1)))
    predicted = float(sigma**2 * np.sum(J * J))
    rel = 0.0 if predicted == 0.0 else abs(estimate - predicted) / predicted
    return QuadraticCheck(float(sigma), estimate, predicted, float(rel), int(n_mc))


@dataclass
class SensitivityRecord:
    sigma_train: float
    sigma_s: float
    per_state_rho: list
    mean_rho: float
    n_excluded: int = 0
    diagnostics: dict = field(default_factory=dict)


def sensitivity_ratio(f: DynamicsModel, d: DenoisingPolicy, data: TrajectoryDataset,
                      sigma_s: float, n_mc: int = 500, seed: int = 0,
                      chunk: int = 64) -> SensitivityRecord:
    """Per-state ``E|(f then d)(x + eta) - x_next| / E|f(x + eta) - x_next|``.

    Works in normalised units.  Numerator and denominator share the noise
    draws; ``(f then d)(u)`` is the state head of ``d`` at ``(u, f(u))``.
    """
    if not sigma_s > 0:
        raise ValueError("sigma_s must be positive")
    if n_mc < 100:
        raise ValueError("n_mc must be at least 100")
    X, _, Xnext = data.arrays
    stats = data.stats
    Z, Znext = stats.norm_state(X), stats.norm_state(Xnext)
    rng = make_rng(seed, "sensitivity")
    sd = Z.shape[1]
    rhos, excluded, s_f_all, s_fd_all = [], 0, [], []
    for start in range(0, len(Z), chunk):
        z = Z[start:start + chunk]
        zn = Znext[start:start + chunk]
        eta = sigma_s * rng.standard_normal((len(z), n_mc, sd))
        u = (z[:, None, :] + eta).reshape(-1, sd)
        fu = f.predict_normalized(u)
        hu = d.state_head_normalized(u, fu)
        target = np.repeat(zn, n_mc, axis=0)
        s_f = np.linalg.norm(fu - target, axis=1).reshape(len(z), n_mc).mean(axis=1)
        s_fd = np.linalg.norm(hu - target, axis=1).reshape(len(z), n_mc).mean(axis=1)
        for a, b in zip(s_f, s_fd):
            s_f_all.append(float(a))
            s_fd_all.append(float(b))
            if a < 1e-12:
                excluded += 1
                continue
            rhos.append(float(b / a))
    return SensitivityRecord(
        float(getattr(d, "sigma", np.nan)), float(sigma_s), rhos,
        float(np.mean(rhos)) if rhos else float("nan"), excluded,
        {"mean_S_f": float(np.mean(s_f_all)), "mean_S_fd": float(np.mean(s_fd_all))},
    )


def action_lipschitz(env: Environment, states, actions, eps: float = 1e-4, iters: int = 50) -> float:
    """Max over probes of the operator norm of the finite-difference ``dD/da``."""
    best = 0.0
    for x, a in zip(states, actions):
        J = fd_jacobian(lambda u: env.step(x, u), a, eps)
        best = max(best, spectral_norm(J, iters))
    return best


def error_bound_audit(env: Environment, f: DynamicsModel, d: DenoisingPolicy,
                      data: TrajectoryDataset, eps_fd: float = 1e-4, n_probe: int = 200,
                      seed: int = 0, x_hat=None, a_hat=None) -> dict:
    """Check ``|D(x, a_hat) - x_hat| <= L * |a_hat - a| + |x_hat - x_next|`` per transition.

    ``x_hat``/``a_hat`` default to the DeCIL predictions on the dataset
    states and may be supplied to audit other predictors.
    """
    X, A, Xn = data.arrays
    if x_hat is None or a_hat is None:
        x_hat, a_hat = decil_step(f, d, X)
    x_hat = np.asarray(x_hat, dtype=float)
    a_hat = np.asarray(a_hat, dtype=float)
    idx = _probe_indices(len(X), n_probe, seed)
    L = action_lipschitz(env, X[idx], A[idx], eps_fd)
    x_prime = np.array([env.step(x, a) for x, a in zip(X, a_hat)])
    state_err = np.linalg.norm(x_hat - Xn, axis=1)
    action_err = np.linalg.norm(a_hat - A, axis=1)
    lhs = np.linalg.norm(x_prime - x_hat, axis=1)
    rhs = L * action_err + state_err
    # relative slack for round-off only
    holds = lhs <= rhs * (1 + 1e-9) + 1e-12
    eps_x = float(np.percentile(state_err, 95))
    eps_a = float(np.percentile(action_err, 95))
    return {
        "L_D_a": float(L),
        "eps_x": eps_x,
        "eps_a": eps_a,
        "aggregate_bound": float(L * eps_a + eps_x),
        "p95_execution_gap": float(np.percentile(lhs, 95)),
        "fraction_holding": float(np.mean(holds)),
        "n_transitions": int(len(X)),
    }


def linearization_constant(f: DynamicsModel, d: DenoisingPolicy, x_star, radius: float = 0.05,
                           n_dirs: int = 20, seed: int = 0, eps: float = 1e-4) -> float:
    """Estimate ``C`` in ``|h(x*+e) - h(x*) - J_h e| <= C |e|^2`` for ``|e| <= radius``."""
    xn = d.stats_.norm_state(np.asarray(x_star, dtype=float))

    def h(u):
        return d.state_head_normalized(u, f.predict_normalized(u))

    J = fd_jacobian(h, xn, eps)
    rng = make_rng(seed, "linearization")
    C = 0.0
    for _ in range(n_dirs):
        v = rng.standard_normal(xn.shape[0])
        v /= np.linalg.norm(v)
        for r in (radius / 4, radius / 2, radius):
            e = r * v
            C = max(C, float(np.linalg.norm(h(xn + e) - h(xn) - J @ e)) / r**2)
    return C


def vector_field_export(f: DynamicsModel, d: DenoisingPolicy, grid, resolution: int, dt: float,
                        x0, steps: int, path=None, manifold_distance=None) -> dict:
    """Drift ``(f(x) - x)/dt`` and corrected drift ``(h(x) - x)/dt`` on a grid.

    ``grid`` is ``(xmin, xmax, ymin, ymax)`` in raw units.  Two trajectories
    are integrated from ``x0`` with explicit Euler.  The CSV has columns
    ``kind,index,x,y,v_f_x,v_f_y,v_fd_x,v_fd_y`` with ``kind`` one of
    ``grid``, ``traj_f``, ``traj_fd``.
    """
    if f.state_dim != 2 or d.state_dim != 2:
        raise ShapeError("vector field export supports 2-D state spaces only")

    def v_f(x):
        return (f.predict(x) - x) / dt

    def v_fd(x):
        return (decil_step(f, d, x)[0] - x) / dt

    xmin, xmax, ymin, ymax = grid
    gx, gy = np.meshgrid(np.linspace(xmin, xmax, resolution), np.linspace(ymin, ymax, resolution))
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    vf, vfd = v_f(pts), v_fd(pts)

    def integrate(field):
        xs = [np.asarray(x0, dtype=float)]
        for _ in range(steps):
            xs.append(xs[-1] + dt * field(xs[-1]))
        return np.array(xs)

    traj_f, traj_fd = integrate(v_f), integrate(v_fd)
    rows = [("grid", i, *p, *a, *b) for i, (p, a, b) in enumerate(zip(pts, vf, vfd))]
    rows += [("traj_f", i, *p, *v_f(p), *v_fd(p)) for i, p in enumerate(traj_f)]
    rows += [("traj_fd", i, *p, *v_f(p), *v_fd(p)) for i, p in enumerate(traj_fd)]
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "index", "x", "y", "v_f_x", "v_f_y", "v_fd_x", "v_fd_y"])
            for r in rows:
                w.writerow([r[0], r[1], *(float(v) for v in r[2:])])
    out = {"n_rows": len(rows), "traj_f": traj_f, "traj_fd": traj_fd,
           "grid_points": pts, "v_f": vf, "v_fd": vfd}
    if manifold_distance is not None:
        out["final_distance_f"] = float(manifold_distance(traj_f[-1]))
        out["final_distance_fd"] = float(manifold_distance(traj_fd[-1]))
        out["mean_distance_f"] = float(np.mean(manifold_distance(traj_f)))
        out["mean_distance_fd"] = float(np.mean(manifold_distance(traj_fd)))
    return out
