"""Estimators for the dynamics model, the denoising policy and the baselines.

All estimators follow the scikit-learn protocol (constructor stores
hyperparameters only, ``fit`` returns ``self``, learned state ends in ``_``),
so ``get_params``/``set_params``/``clone`` work.  Training happens in
normalised coordinates; ``predict`` takes and returns raw units.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .envs import NormStats, TrajectoryDataset
from .exceptions import DivergenceError, ShapeError
from .nn import AdamState, NetParams, adam_step, backward, forward, init_net
from .seeding import derive_seed, make_rng


@dataclass
class TrainConfig:
    sigma: float = 0.1
    lam: float = 1.0
    epochs: int = 2000
    batch_size: int = 64
    seed: int = 0
    learning_rate: float = 1e-3
    sigma_s: float = 0.05
    hidden: tuple = (64, 64)
    activation: str = "tanh"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    def estimator_params(self) -> dict:
        return dict(hidden_layer_sizes=self.hidden, activation=self.activation,
                    epochs=self.epochs, batch_size=self.batch_size,
                    learning_rate=self.learning_rate, random_state=self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


class _NetEstimator(BaseEstimator):
    """Shared Adam minibatch loop for the estimators below."""

    model_kind = "net"

    def _init_params(self, n_in, n_out):
        dims = [n_in, *self.hidden_layer_sizes, n_out]
        return init_net(dims, self.activation, derive_seed(self.random_state, "init"))

    def _check_stats(self, stats, X, action_dim=None):
        if stats is None:
            raise ValueError("normalisation stats are required")
        if stats.state_mean.shape[0] != X.shape[1]:
            raise ShapeError("stats state dimension does not match the data")
        if action_dim is not None and stats.action_mean.shape[0] != action_dim:
            raise ShapeError("stats action dimension does not match the data")
        return stats

    def _run(self, n_samples, make_inputs, targets, out_weights):
        """Minimise the weighted per-sample squared error.

        ``make_inputs(epoch_rng)`` returns the (possibly noisy) network inputs
        for the whole epoch; ``out_weights`` scales each output column's
        squared error.  Returns per-epoch mean of each weighted column group.
        """
        if n_samples == 0:
            raise ValueError("cannot train on an empty dataset")
        net = self._init_params(make_inputs.n_in, targets.shape[1])
        adam = AdamState.fresh(net, learning_rate=self.learning_rate)
        shuffle_rng = make_rng(self.random_state, "shuffle")
        noise_rng = make_rng(self.random_state, "noise")
        w = np.asarray(out_weights, dtype=float)
        history = []
        for epoch in range(1, self.epochs + 1):
            inputs = make_inputs(noise_rng)
            order = shuffle_rng.permutation(n_samples)
            sq_sum = np.zeros(targets.shape[1])
            for start in range(0, n_samples, self.batch_size):
                idx = order[start:start + self.batch_size]
                pred = forward(net, inputs[idx])
                r = pred - targets[idx]
                sq_sum += np.sum(r * r, axis=0)
                grads, _ = backward(net, inputs[idx], 2.0 * w * r / len(idx))
                net, adam = adam_step(net, grads, adam)
            per_col = sq_sum / n_samples
            if not np.all(np.isfinite(per_col)) or not net.is_finite():
                raise DivergenceError(epoch)
            history.append(per_col)
        self.n_iter_ = self.epochs
        return net, np.array(history)

    # serialisation -------------------------------------------------------

    def to_dict(self, env_id=None, cfg=None) -> dict:
        check_is_fitted(self, "net_")
        params = _jsonable(self.get_params())
        d = {"model_kind": self.model_kind, "env_id": env_id,
             "stats": self.stats_.to_dict(),
             "cfg": cfg if cfg is not None else params,
             "params": params}
        d.update(self.net_.to_dict())
        return d

    def save(self, path, env_id=None, cfg=None):
        with open(path, "w") as fh:
            json.dump(self.to_dict(env_id, cfg), fh)

    @classmethod
    def from_dict(cls, d: dict):
        if d.get("model_kind") not in MODEL_KINDS:
            raise ValueError(f"unknown model_kind {d.get('model_kind')!r}")
        est = MODEL_KINDS[d["model_kind"]]()
        params = d.get("params") or d.get("cfg") or {}
        valid = est.get_params()
        est.set_params(**{k: (tuple(v) if isinstance(v, list) else v)
                          for k, v in params.items() if k in valid})
        est.net_ = NetParams.from_dict(d)
        est.stats_ = NormStats.from_dict(d["stats"])
        return est


def _jsonable(params):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in params.items()}


def _as_2d(X, n_features=None, name="X"):
    X = check_array(X, dtype=np.float64, ensure_all_finite=True)
    if n_features is not None and X.shape[1] != n_features:
        raise ShapeError(f"{name} has {X.shape[1]} columns, expected {n_features}")
    return X


class _Inputs:
    """Callable producing epoch inputs; carries the input width."""

    def __init__(self, fn, n_in):
        self.fn = fn
        self.n_in = n_in

    def __call__(self, rng):
        return self.fn(rng)


class DynamicsModel(_NetEstimator):
    """Next-state predictor trained on squared error in normalised units."""

    model_kind = "dynamics"

    def __init__(self, hidden_layer_sizes=(64, 64), activation="tanh", epochs=2000,
                 batch_size=64, learning_rate=1e-3, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y, stats: NormStats | None = None):
        X = _as_2d(X)
        y = _as_2d(y, X.shape[1], "y")
        if stats is None:
            stats = _stats_from(X, y, None)
        self.stats_ = self._check_stats(stats, X)
        Xn = stats.norm_state(X)
        Yn = stats.norm_state(y)
        self.net_, hist = self._run(len(Xn), _Inputs(lambda rng: Xn, Xn.shape[1]), Yn,
                                    np.ones(Yn.shape[1]))
        self.loss_history_ = hist.sum(axis=1)
        return self

    def predict_normalized(self, Xn):
        check_is_fitted(self, "net_")
        return forward(self.net_, Xn)

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.net_.n_in:
            raise ShapeError(f"expected {self.net_.n_in} state features, got {X.shape[-1]}")
        return self.stats_.denorm_state(forward(self.net_, self.stats_.norm_state(X)))

    @property
    def state_dim(self):
        return self.net_.n_in


class DenoisingPolicy(_NetEstimator):
    """Joint refiner/actor ``d(x_t, y) -> (x_hat_next, a_hat)``.

    ``fit(X, X_next, A)`` trains on ``y = x_next + eta`` with
    ``eta ~ N(0, sigma^2 I)`` in normalised units, resampled every epoch,
    minimising ``|x_hat - x_next|^2 + lam * |a_hat - a|^2``.
    """

    model_kind = "denoiser"

    def __init__(self, sigma=0.1, lam=1.0, hidden_layer_sizes=(64, 64), activation="tanh",
                 epochs=2000, batch_size=64, learning_rate=1e-3, random_state=0):
        self.sigma = sigma
        self.lam = lam
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, X_next, A, stats: NormStats | None = None):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        X = _as_2d(X)
        X_next = _as_2d(X_next, X.shape[1], "X_next")
        A = _as_2d(A, name="A")
        if stats is None:
            stats = _stats_from(X, X_next, A)
        self.stats_ = self._check_stats(stats, X, A.shape[1])
        Xn = stats.norm_state(X)
        Nn = stats.norm_state(X_next)
        An = stats.norm_action(A)
        sigma = float(self.sigma)
        self.noise_draws_ = 0

        def inputs(rng):
            if sigma == 0:
                return np.hstack([Xn, Nn])
            self.noise_draws_ += 1
            return np.hstack([Xn, Nn + sigma * rng.standard_normal(Nn.shape)])

        sd = X.shape[1]
        weights = np.r_[np.ones(sd), np.full(A.shape[1], float(self.lam))]
        self.net_, hist = self._run(len(Xn), _Inputs(inputs, 2 * sd), np.hstack([Nn, An]),
                                    weights)
        self.denoise_loss_history_ = hist[:, :sd].sum(axis=1)
        self.action_loss_history_ = hist[:, sd:].sum(axis=1)
        self.loss_history_ = self.denoise_loss_history_ + self.lam * self.action_loss_history_
        return self

    @property
    def state_dim(self):
        return self.net_.n_in // 2

    def forward_normalized(self, Xn, Yn):
        """Raw network output ``(x_hat, a_hat)`` on normalised inputs."""
        check_is_fitted(self, "net_")
        out = forward(self.net_, np.concatenate([Xn, Yn], axis=-1))
        return out[..., :self.state_dim], out[..., self.state_dim:]

    def state_head_normalized(self, Xn, Yn):
        return self.forward_normalized(Xn, Yn)[0]

    def predict(self, X, Y):
        check_is_fitted(self, "net_")
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        if X.shape != Y.shape or X.shape[-1] != self.state_dim:
            raise ShapeError(f"expected two state arrays with {self.state_dim} features")
        xh, ah = self.forward_normalized(self.stats_.norm_state(X), self.stats_.norm_state(Y))
        return self.stats_.denorm_state(xh), self.stats_.denorm_action(ah)


BASELINE_VARIANTS = ("bc", "noisy_bc", "joint")


class BaselinePolicy(_NetEstimator):
    """Behaviour cloning, input-noise BC, or joint next-state/action regression.

    ``fit(X, X_next, A)`` always receives the full transition so the three
    variants share a signature; ``bc`` and ``noisy_bc`` ignore ``X_next``.
    """

    model_kind = "baseline"

    def __init__(self, variant="bc", sigma=0.1, lam=1.0, hidden_layer_sizes=(64, 64),
                 activation="tanh", epochs=2000, batch_size=64, learning_rate=1e-3,
                 random_state=0):
        self.variant = variant
        self.sigma = sigma
        self.lam = lam
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, X_next, A, stats: NormStats | None = None):
        if self.variant not in BASELINE_VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {BASELINE_VARIANTS}")
        X = _as_2d(X)
        X_next = _as_2d(X_next, X.shape[1], "X_next")
        A = _as_2d(A, name="A")
        if stats is None:
            stats = _stats_from(X, X_next, A)
        self.stats_ = self._check_stats(stats, X, A.shape[1])
        Xn = stats.norm_state(X)
        An = stats.norm_action(A)
        sd = X.shape[1]
        if self.variant == "joint":
            targets = np.hstack([stats.norm_state(X_next), An])
            weights = np.r_[np.ones(sd), np.full(A.shape[1], float(self.lam))]
        else:
            targets = An
            weights = np.ones(A.shape[1])
        sigma = float(self.sigma) if self.variant == "noisy_bc" else 0.0
        if sigma < 0:
            raise ValueError("sigma must be >= 0")

        def inputs(rng):
            if sigma == 0:
                return Xn
            return Xn + sigma * rng.standard_normal(Xn.shape)

        self.net_, hist = self._run(len(Xn), _Inputs(inputs, sd), targets, weights)
        if self.variant == "joint":
            self.state_loss_history_ = hist[:, :sd].sum(axis=1)
            self.action_loss_history_ = hist[:, sd:].sum(axis=1)
            self.loss_history_ = self.state_loss_history_ + self.lam * self.action_loss_history_
        else:
            self.loss_history_ = hist.sum(axis=1)
        return self

    @property
    def state_dim(self):
        return self.net_.n_in

    def predict_normalized(self, Xn):
        check_is_fitted(self, "net_")
        out = forward(self.net_, Xn)
        if self.variant == "joint":
            return out[..., self.state_dim:]
        return out

    def predict(self, X):
        """Actions in raw units."""
        check_is_fitted(self, "net_")
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.state_dim:
            raise ShapeError(f"expected {self.state_dim} state features, got {X.shape[-1]}")
        return self.stats_.denorm_action(self.predict_normalized(self.stats_.norm_state(X)))


MODEL_KINDS = {
    "dynamics": DynamicsModel,
    "denoiser": DenoisingPolicy,
    "baseline": BaselinePolicy,
}


def load_model(path):
    with open(path) as fh:
        return _NetEstimator.from_dict(json.load(fh))


def _stats_from(X, X_next, A):
    states = np.vstack([X, X_next])
    A = np.zeros((len(X), 1)) if A is None else A
    return NormStats(states.mean(0), np.maximum(states.std(0), 1e-6),
                     A.mean(0), np.maximum(A.std(0), 1e-6))


def _check_data(data: TrajectoryDataset):
    if len(data) == 0:
        raise ValueError("dataset is empty")
    return data.arrays


def train_dynamics(data: TrajectoryDataset, cfg: TrainConfig):
    X, _, Xn = _check_data(data)
    model = DynamicsModel(**cfg.estimator_params()).fit(X, Xn, stats=data.stats)
    return model, model.loss_history_


def train_denoiser(data: TrajectoryDataset, cfg: TrainConfig):
    X, A, Xn = _check_data(data)
    model = DenoisingPolicy(sigma=cfg.sigma, lam=cfg.lam, **cfg.estimator_params())
    model.fit(X, Xn, A, stats=data.stats)
    return model, {"total": model.loss_history_, "denoise": model.denoise_loss_history_,
                   "action": model.action_loss_history_}


def train_baseline(data: TrajectoryDataset, cfg: TrainConfig, variant: str):
    X, A, Xn = _check_data(data)
    model = BaselinePolicy(variant=variant, sigma=cfg.sigma, lam=cfg.lam,
                           **cfg.estimator_params())
    model.fit(X, Xn, A, stats=data.stats)
    return model, model.loss_history_
