"""Feedforward residual network and its static (one-step) training.

The network maps ``z`` to ``w`` through ``n_l`` hidden layers with an
elementwise activation followed by an affine output layer.  All forward
and backward passes are batched over samples: ``z`` has shape ``(B, n_z)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionError, DivergenceError

ACTIVATIONS = ("tanh", "relu")


def _act(name, a):
    if name == "tanh":
        return np.tanh(a)
    return np.maximum(a, 0.0)


def _act_deriv(name, a, h):
    if name == "tanh":
        return 1.0 - h * h
    return (a > 0).astype(float)


@dataclass
class MlpParams:
    """Weights and biases ``[(W1, b1), ..., (W_{n_l+1}, b_{n_l+1})]``."""

    layers: list
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        layers = []
        for k, (W, b) in enumerate(self.layers):
            W = np.atleast_2d(np.asarray(W, dtype=float))
            b = np.asarray(b, dtype=float).ravel()
            if b.shape != (W.shape[0],):
                raise DimensionError(f"b[{k}]", (W.shape[0],), b.shape)
            if layers and W.shape[1] != layers[-1][0].shape[0]:
                raise DimensionError(f"W[{k}]", f"(*, {layers[-1][0].shape[0]})", W.shape)
            layers.append((W, b))
        if not layers:
            raise ValueError("network needs at least the output layer")
        self.layers = layers

    @property
    def n_in(self):
        return self.layers[0][0].shape[1]

    @property
    def n_out(self):
        return self.layers[-1][0].shape[0]

    @property
    def hidden_widths(self):
        return [W.shape[0] for W, _ in self.layers[:-1]]

    @property
    def n_params(self):
        return sum(W.size + b.size for W, b in self.layers)

    def to_vector(self):
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.layers])

    def from_vector(self, v):
        v = np.asarray(v, dtype=float)
        out, k = [], 0
        for W, b in self.layers:
            nW = W.size
            out.append((v[k:k + nW].reshape(W.shape), v[k + nW:k + nW + b.size].copy()))
            k += nW + b.size
        if k != v.size:
            raise DimensionError("theta_NN", (k,), v.shape)
        return MlpParams(out, self.activation)

    def copy(self):
        return MlpParams([(W.copy(), b.copy()) for W, b in self.layers], self.activation)


@dataclass
class ResidualMap:
    """Nonlinear residual parameters: ``w = net(C_z x + D_zu u)``."""

    C_z: np.ndarray
    D_zu: np.ndarray
    net: MlpParams

    def __post_init__(self):
        self.C_z = np.atleast_2d(np.asarray(self.C_z, dtype=float))
        self.D_zu = np.atleast_2d(np.asarray(self.D_zu, dtype=float))
        n_z = self.C_z.shape[0]
        if self.D_zu.shape[0] != n_z:
            raise DimensionError("D_zu", f"({n_z}, n_u)", self.D_zu.shape)
        if self.net.n_in != n_z:
            raise DimensionError("W[0]", f"(*, {n_z})", self.net.layers[0][0].shape)

    @property
    def n_x(self):
        return self.C_z.shape[1]

    @property
    def n_u(self):
        return self.D_zu.shape[1]

    @property
    def n_z(self):
        return self.C_z.shape[0]

    @property
    def n_w(self):
        return self.net.n_out

    @property
    def n_params(self):
        return self.C_z.size + self.D_zu.size + self.net.n_params

    def to_vector(self):
        return np.concatenate([self.C_z.ravel(), self.D_zu.ravel(), self.net.to_vector()])

    def from_vector(self, v):
        v = np.asarray(v, dtype=float)
        a = self.C_z.size
        b = a + self.D_zu.size
        return ResidualMap(v[:a].reshape(self.C_z.shape), v[a:b].reshape(self.D_zu.shape),
                           self.net.from_vector(v[b:]))

    def latent_input(self, x, u):
        return x @ self.C_z.T + u @ self.D_zu.T

    def __call__(self, x, u):
        return mlp_forward(self.net, self.latent_input(x, u))

    def copy(self):
        return ResidualMap(self.C_z.copy(), self.D_zu.copy(), self.net.copy())


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    iterations: int = 100
    batch_size: int | None = None  # None: full batch
    rng_seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    monotone: bool = False  # reject steps that raise the full-batch loss

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class TrainResult:
    residual: ResidualMap
    loss_trace: np.ndarray
    callback_trace: list = field(default_factory=list)


def init_residual_map(n_x, n_u, n_z, n_w, hidden, activation="relu", rng=None):
    """Random initial residual map.

    ``C_z`` and ``D_zu`` are drawn from U(-1, 1), network weights are
    Xavier-uniform and biases start at zero.
    """
    rng = np.random.default_rng(rng)
    C_z = rng.uniform(-1.0, 1.0, (n_z, n_x))
    D_zu = rng.uniform(-1.0, 1.0, (n_z, n_u))
    widths = [n_z, *hidden, n_w]
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-bound, bound, (fan_out, fan_in)), np.zeros(fan_out)))
    return ResidualMap(C_z, D_zu, MlpParams(layers, activation))


def _forward(net, z):
    """Forward pass keeping pre-activations and activations of every hidden layer."""
    pre, post = [], [z]
    h = z
    for W, b in net.layers[:-1]:
        a = h @ W.T + b
        h = _act(net.activation, a)
        pre.append(a)
        post.append(h)
    W, b = net.layers[-1]
    return h @ W.T + b, pre, post


def mlp_forward(net, z):
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    if z2.shape[1] != net.n_in:
        raise DimensionError("z", f"(*, {net.n_in})", z.shape)
    w = _forward(net, z2)[0]
    return w[0] if single else w


def _backward(net, pre, post, g):
    """Reverse pass for a batch of output cotangents ``g`` of shape ``(B, n_w)``.

    Returns the batch-summed parameter gradients as a flat vector and the
    input cotangents ``(B, n_z)``.
    """
    grads = []
    for k in range(len(net.layers) - 1, -1, -1):
        W, _ = net.layers[k]
        grads.append((g.T @ post[k], g.sum(axis=0)))
        g = g @ W
        if k > 0:
            g = g * _act_deriv(net.activation, pre[k - 1], post[k])
    grads.reverse()
    return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads]), g


def mlp_jacobians(net, z):
    """Per-sample output, input Jacobian and parameter Jacobian.

    Returns ``w (B, n_w)``, ``dw/dz (B, n_w, n_z)`` and
    ``dw/dtheta (B, n_w, n_params)`` with parameters ordered as
    ``MlpParams.to_vector``.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    B = z.shape[0]
    w, pre, post = _forward(net, z)
    n_w = net.n_out
    # cotangent per (sample, output): shape (B, n_w, width)
    g = np.broadcast_to(np.eye(n_w), (B, n_w, n_w)).copy()
    blocks = []
    for k in range(len(net.layers) - 1, -1, -1):
        W, _ = net.layers[k]
        gW = g[:, :, :, None] * post[k][:, None, None, :]
        blocks.append(np.concatenate([gW.reshape(B, n_w, -1), g], axis=2))
        g = g @ W
        if k > 0:
            g = g * _act_deriv(net.activation, pre[k - 1], post[k])[:, None, :]
    blocks.reverse()
    return w, g, np.concatenate(blocks, axis=2)


def residual_loss(res, x_star, u, w_star):
    w_hat = res(x_star, u)
    return float(np.mean(np.sum((w_star - w_hat) ** 2, axis=1)))


def residual_gradient(res, x_star, u, w_star):
    """Loss ``mean ||w* - net(C_z x* + D_zu u)||^2`` and its gradient.

    The gradient is ordered as ``ResidualMap.to_vector``.
    """
    x_star = np.atleast_2d(x_star)
    u = np.atleast_2d(u)
    w_star = np.atleast_2d(w_star)
    if not (x_star.shape[0] == u.shape[0] == w_star.shape[0]):
        raise DimensionError("samples", (x_star.shape[0],), (u.shape[0], w_star.shape[0]))
    N = x_star.shape[0]
    z = res.latent_input(x_star, u)
    w_hat, pre, post = _forward(res.net, z)
    err = w_star - w_hat
    loss = float(np.sum(err * err) / N)
    g_net, g_z = _backward(res.net, pre, post, -2.0 / N * err)
    g_Cz = g_z.T @ x_star
    g_Dzu = g_z.T @ u
    return loss, np.concatenate([g_Cz.ravel(), g_Dzu.ravel(), g_net])


def train_residual(res, dataset, u, config, callback: Callable | None = None):
    """Fit ``res`` to an inferred dataset, treating its samples as independent.

    ``u`` is the full input record; the samples aligned with the dataset
    are selected with ``dataset.start``.  See ``fit_static``.
    """
    u = np.atleast_2d(u)
    if u.shape[0] == 1 and u.shape[1] != res.n_u:
        u = u.T
    u_al = u[dataset.start:dataset.start + dataset.n_samples]
    return fit_static(res, dataset.x_star, u_al, dataset.w_star, config, callback)


def fit_static(res, x_star, u, w_star, config, callback: Callable | None = None):
    """Adam on the static residual loss.

    ``loss_trace[k]`` is the loss at the parameters before update ``k``;
    the final entry is the loss of the returned parameters, so the trace
    has ``iterations + 1`` entries.  ``callback(k, residual_map)`` is
    invoked on the same schedule and its return values are collected.

    With ``config.monotone`` an update that raises the full-batch loss is
    rejected and the step size halved (it recovers after accepted steps),
    so the trace never increases.
    """
    x_star = np.atleast_2d(x_star)
    u = np.atleast_2d(u)
    w_star = np.atleast_2d(w_star)
    if x_star.shape[0] == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.rng_seed)
    N = x_star.shape[0]
    theta = res.to_vector()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2 = config.beta1, config.beta2
    trace = np.empty(config.iterations + 1)
    extra = []
    current = res
    step = config.learning_rate
    t = 0  # accepted updates, for the bias correction
    for k in range(config.iterations):
        if callback is not None:
            extra.append(callback(k, current))
        if config.batch_size is None or config.batch_size >= N:
            loss, g = residual_gradient(current, x_star, u, w_star)
        else:
            idx = rng.choice(N, config.batch_size, replace=False)
            _, g = residual_gradient(current, x_star[idx], u[idx], w_star[idx])
            loss = residual_loss(current, x_star, u, w_star)
        trace[k] = loss
        if not np.isfinite(loss) or not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite training loss at iteration {k}",
                                  {"loss_trace": trace[:k + 1].copy()})
        m_new = b1 * m + (1 - b1) * g
        v_new = b2 * v + (1 - b2) * g * g
        mhat = m_new / (1 - b1 ** (t + 1))
        vhat = v_new / (1 - b2 ** (t + 1))
        trial = theta - step * mhat / (np.sqrt(vhat) + config.adam_eps)
        candidate = res.from_vector(trial)
        if config.monotone and not residual_loss(candidate, x_star, u, w_star) <= loss:
            step *= 0.5
            continue
        theta, m, v, t = trial, m_new, v_new, t + 1
        current = candidate
        step = min(2.0 * step, config.learning_rate)
    trace[-1] = residual_loss(current, x_star, u, w_star)
    if callback is not None:
        extra.append(callback(config.iterations, current))
    if not np.isfinite(trace[-1]):
        raise DivergenceError("non-finite training loss after the final update",
                              {"loss_trace": trace})
    return TrainResult(current, trace, extra)
