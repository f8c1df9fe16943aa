"""Dense feedforward networks with exact reverse-mode gradients and Adam.

Weights follow the ``(fan_out, fan_in)`` convention, so a layer computes
``W @ x + b`` for a single vector.  Every function also accepts a 2-D batch
with one sample per row; parameter gradients are then summed over the batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidArchitectureError, ShapeError

ACTIVATIONS = ("tanh", "relu")


@dataclass
class NetParams:
    """Parameters of a feedforward net with a linear output layer."""

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if self.activation not in ACTIVATIONS:
            raise InvalidArchitectureError(
                f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}"
            )
        n = len(self.layer_dims) - 1
        if len(self.weights) != n or len(self.biases) != n:
            raise ShapeError("need exactly one weight matrix and bias per layer")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[i + 1], self.layer_dims[i])
            if W.shape != shape or b.shape != (shape[0],):
                raise ShapeError(
                    f"layer {i}: expected W{shape} and b({shape[0]},), "
                    f"got W{W.shape} and b{b.shape}"
                )

    @property
    def n_in(self) -> int:
        return self.layer_dims[0]

    @property
    def n_out(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "NetParams":
        return NetParams(
            list(self.layer_dims),
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )

    def zeros_like(self) -> "NetParams":
        return NetParams(
            list(self.layer_dims),
            [np.zeros_like(W) for W in self.weights],
            [np.zeros_like(b) for b in self.biases],
            self.activation,
        )

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def to_dict(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "activation": self.activation,
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetParams":
        return cls(
            d["layer_dims"],
            [np.asarray(W, dtype=float).reshape(len(W), -1) for W in d["weights"]],
            [np.asarray(b, dtype=float) for b in d["biases"]],
            d.get("activation", "tanh"),
        )

    def to_json(self) -> str:
        # json emits floats via repr(), the shortest round-trip form
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "NetParams":
        return cls.from_dict(json.loads(text))


def _check_same_shape(a: NetParams, b: NetParams):
    if a.layer_dims != b.layer_dims:
        raise ShapeError(f"layer dims differ: {a.layer_dims} vs {b.layer_dims}")


def init_net(layer_dims, activation: str = "tanh", seed: int = 0) -> NetParams:
    """Uniform weights with standard deviation ``1/sqrt(fan_in)``, zero biases."""
    dims = list(layer_dims)
    if len(dims) < 2:
        raise InvalidArchitectureError("need at least an input and an output dimension")
    if any(int(d) != d or d <= 0 for d in dims):
        raise InvalidArchitectureError(f"layer dims must be positive integers, got {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(3.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return NetParams(dims, weights, biases, activation)


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _act_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    return (z > 0).astype(z.dtype)


def _as_batch(net: NetParams, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != net.n_in:
        raise ShapeError(f"expected input with {net.n_in} features, got shape {x.shape}")
    return X, single


def _forward_cache(net: NetParams, X):
    pre, post = [], [X]
    h = X
    last = net.n_layers - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ W.T + b
        h = z if i == last else _act(net.activation, z)
        pre.append(z)
        post.append(h)
    return pre, post


def forward(net: NetParams, x) -> np.ndarray:
    X, single = _as_batch(net, x)
    h = X
    last = net.n_layers - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ W.T + b
        if i != last:
            h = _act(net.activation, h)
    return h[0] if single else h


def backward(net: NetParams, x, output_grad):
    """Gradients of ``<output_grad, forward(net, x)>``.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` is a
    :class:`NetParams` holding gradients in place of parameters.
    """
    X, single = _as_batch(net, x)
    G = np.asarray(output_grad, dtype=float)
    G = G[None, :] if G.ndim == 1 else G
    if G.shape != (X.shape[0], net.n_out):
        raise ShapeError(
            f"output_grad shape {np.shape(output_grad)} does not match "
            f"{net.n_out} outputs for {X.shape[0]} sample(s)"
        )
    pre, post = _forward_cache(net, X)
    gW = [None] * net.n_layers
    gb = [None] * net.n_layers
    delta = G
    for i in range(net.n_layers - 1, -1, -1):
        if i != net.n_layers - 1:
            delta = delta * _act_grad(net.activation, pre[i], post[i + 1])
        gW[i] = delta.T @ post[i]
        gb[i] = delta.sum(axis=0)
        delta = delta @ net.weights[i]
    grads = NetParams(list(net.layer_dims), gW, gb, net.activation)
    return grads, (delta[0] if single else delta)


@dataclass
class AdamState:
    first_moment: NetParams
    second_moment: NetParams
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.eps <= 0 or self.learning_rate <= 0:
            raise ValueError("eps and learning_rate must be positive")
        if self.step_count < 0:
            raise ValueError("step_count must be non-negative")
        _check_same_shape(self.first_moment, self.second_moment)

    @classmethod
    def fresh(cls, params: NetParams, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(params.zeros_like(), params.zeros_like(), 0, learning_rate, beta1, beta2, eps)


def adam_step(params: NetParams, grads: NetParams, state: AdamState):
    """One bias-corrected Adam update.  Inputs are left untouched."""
    _check_same_shape(params, grads)
    _check_same_shape(params, state.first_moment)
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(),
                          state.first_moment.arrays(), state.second_moment.arrays()):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        p = p - state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)
    n = params.n_layers

    def pack(arrs):
        return NetParams(list(params.layer_dims), arrs[:n], arrs[n:], params.activation)

    new_state = AdamState(pack(new_m), pack(new_v), t, state.learning_rate, b1, b2, state.eps)
    return pack(new_p), new_state


def mse_loss(pred, target):
    """Squared Euclidean error for one sample and its gradient in ``pred``."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} differ")
    r = pred - target
    return float(r @ r), 2.0 * r


def batch_mse(pred: np.ndarray, target: np.ndarray):
    """Mean over rows of the per-sample squared error, with gradient."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} differ")
    r = pred - target
    n = pred.shape[0]
    return float(np.sum(r * r) / n), 2.0 * r / n
