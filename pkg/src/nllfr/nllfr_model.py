"""The assembled NL-LFR model: simulation, Jacobians, diagnostics and I/O."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, DimensionError
from .lti_core import LtiSubmodel, as_signal
from .static_net import MlpParams, ResidualMap, mlp_forward, mlp_jacobians

DIVERGENCE_LIMIT = 1e6
LTI_FIELDS = ("A", "B_u", "B_w", "C_y", "D_yu", "D_yw")
MODEL_FORMAT = "nllfr-model"


@dataclass(frozen=True, eq=False)
class NllfrModel:
    lti: LtiSubmodel
    residual: ResidualMap
    normalization: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        lti, res = self.lti, self.residual
        if res.n_x != lti.n_x:
            raise DimensionError("C_z", f"(n_z, {lti.n_x})", res.C_z.shape)
        if res.n_u != lti.n_u:
            raise DimensionError("D_zu", f"(n_z, {lti.n_u})", res.D_zu.shape)
        if res.n_w != lti.n_w:
            raise DimensionError("B_w", f"({lti.n_x}, {res.n_w})", lti.B_w.shape)

    @property
    def n_x(self):
        return self.lti.n_x

    @property
    def n_u(self):
        return self.lti.n_u

    @property
    def n_y(self):
        return self.lti.n_y

    @property
    def n_w(self):
        return self.lti.n_w

    @property
    def n_z(self):
        return self.residual.n_z

    # -- parameter vector ------------------------------------------------
    @property
    def n_params(self):
        return sum(getattr(self.lti, k).size for k in LTI_FIELDS) + self.residual.n_params

    def to_vector(self):
        return np.concatenate([getattr(self.lti, k).ravel() for k in LTI_FIELDS]
                              + [self.residual.to_vector()])

    def from_vector(self, v):
        v = np.asarray(v, dtype=float)
        mats, k = {}, 0
        for name in LTI_FIELDS:
            shape = getattr(self.lti, name).shape
            size = int(np.prod(shape))
            mats[name] = v[k:k + size].reshape(shape)
            k += size
        return NllfrModel(LtiSubmodel(**mats), self.residual.from_vector(v[k:]), self.normalization)

    # -- maps --------------------------------------------------------------
    def residual_signals(self, x, u):
        z = self.residual.latent_input(x, u)
        return z, mlp_forward(self.residual.net, z)

    def step(self, x, u):
        """State update ``x(n+1) = f(x(n), u(n))``; accepts single samples or batches."""
        x, u = np.asarray(x, float), np.asarray(u, float)
        _, w = self.residual_signals(x, u)
        lti = self.lti
        return x @ lti.A.T + u @ lti.B_u.T + w @ lti.B_w.T

    def output(self, x, u):
        x, u = np.asarray(x, float), np.asarray(u, float)
        _, w = self.residual_signals(x, u)
        lti = self.lti
        return x @ lti.C_y.T + u @ lti.D_yu.T + w @ lti.D_yw.T

    def step_jacobians(self, x, u):
        """State update, output and their Jacobians for a batch of samples.

        Returns ``(x_next, y, F_x, F_p, H_x, H_p)`` where ``F_*`` are
        derivatives of the state update and ``H_*`` of the output, with
        respect to the state (``_x``) and the parameter vector (``_p``).
        """
        lti, res = self.lti, self.residual
        x = np.atleast_2d(x)
        u = np.atleast_2d(u)
        Bn = x.shape[0]
        n_x, n_u, n_y, n_w, n_z = self.n_x, self.n_u, self.n_y, self.n_w, self.n_z
        z = res.latent_input(x, u)
        w, Jz, Jnet = mlp_jacobians(res.net, z)
        x_next = x @ lti.A.T + u @ lti.B_u.T + w @ lti.B_w.T
        y = x @ lti.C_y.T + u @ lti.D_yu.T + w @ lti.D_yw.T

        dw_dx = Jz @ res.C_z                                  # (B, n_w, n_x)
        F_x = lti.A + lti.B_w @ dw_dx
        H_x = lti.C_y + lti.D_yw @ dw_dx

        # dw/d(C_z, D_zu, net)
        dw_dres = np.concatenate([
            (Jz[:, :, :, None] * x[:, None, None, :]).reshape(Bn, n_w, n_z * n_x),
            (Jz[:, :, :, None] * u[:, None, None, :]).reshape(Bn, n_w, n_z * n_u),
            Jnet,
        ], axis=2)

        def kron_rows(v, rows):
            # derivative of (M v) w.r.t. vec(M) for M with `rows` rows
            out = np.zeros((Bn, rows, rows * v.shape[1]))
            for i in range(rows):
                out[:, i, i * v.shape[1]:(i + 1) * v.shape[1]] = v
            return out

        zx = lambda m: np.zeros((Bn, n_x, m))  # noqa: E731
        zy = lambda m: np.zeros((Bn, n_y, m))  # noqa: E731
        F_p = np.concatenate([
            kron_rows(x, n_x), kron_rows(u, n_x), kron_rows(w, n_x),
            zx(n_y * n_x), zx(n_y * n_u), zx(n_y * n_w),
            lti.B_w @ dw_dres,
        ], axis=2)
        H_p = np.concatenate([
            zy(n_x * n_x), zy(n_x * n_u), zy(n_x * n_w),
            kron_rows(x, n_y), kron_rows(u, n_y), kron_rows(w, n_y),
            lti.D_yw @ dw_dres,
        ], axis=2)
        return x_next, y, F_x, F_p, H_x, H_p

    def state_jacobian(self, x, u):
        """``df/dx`` for a batch of samples, shape ``(B, n_x, n_x)``."""
        x = np.atleast_2d(x)
        u = np.atleast_2d(u)
        z = self.residual.latent_input(x, u)
        _, Jz, _ = mlp_jacobians(self.residual.net, z)
        return self.lti.A + self.lti.B_w @ (Jz @ self.residual.C_z)

    def input_jacobian(self, x, u):
        x = np.atleast_2d(x)
        u = np.atleast_2d(u)
        z = self.residual.latent_input(x, u)
        _, Jz, _ = mlp_jacobians(self.residual.net, z)
        return self.lti.B_u + self.lti.B_w @ (Jz @ self.residual.D_zu)


@dataclass
class Simulation:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    w: np.ndarray
    diverged: bool = False


def simulate(model, u, x0=None, limit=DIVERGENCE_LIMIT):
    """Free-running simulation returning every internal signal.

    The rollout stops once ``||x|| > limit``; the returned sequences are
    then truncated and ``diverged`` is set.
    """
    u = as_signal(u, model.n_u, "u")
    N = u.shape[0]
    x0 = np.zeros(model.n_x) if x0 is None else np.asarray(x0, float).ravel()
    if x0.shape != (model.n_x,):
        raise DimensionError("x0", (model.n_x,), x0.shape)
    lti, res = model.lti, model.residual
    x = np.empty((N + 1, model.n_x))
    z = np.empty((N, model.n_z))
    w = np.empty((N, model.n_w))
    x[0] = x0
    A, B_u, B_w, C_z, D_zu = lti.A, lti.B_u, lti.B_w, res.C_z, res.D_zu
    layers, act = res.net.layers, res.net.activation
    tanh = act == "tanh"
    ux_drive = u @ B_u.T
    uz_drive = u @ D_zu.T
    diverged = False
    n_done = N
    for n in range(N):
        zn = C_z @ x[n] + uz_drive[n]
        h = zn
        for W, b in layers[:-1]:
            a = W @ h + b
            h = np.tanh(a) if tanh else np.maximum(a, 0.0)
        W, b = layers[-1]
        wn = W @ h + b
        z[n] = zn
        w[n] = wn
        x[n + 1] = A @ x[n] + ux_drive[n] + B_w @ wn
        if not np.all(np.isfinite(x[n + 1])) or np.linalg.norm(x[n + 1]) > limit:
            diverged = True
            n_done = n + 1
            break
    x, z, w, u = x[:n_done + 1], z[:n_done], w[:n_done], u[:n_done]
    y = x[:-1] @ lti.C_y.T + u @ lti.D_yu.T + w @ lti.D_yw.T
    return Simulation(x=x, y=y, z=z, w=w, diverged=diverged)


def rmse(y_true, y_hat):
    y_true, y_hat = as_signal(y_true), as_signal(y_hat)
    if y_true.shape != y_hat.shape:
        raise DimensionError("y_hat", y_true.shape, y_hat.shape)
    return np.sqrt(np.mean((y_true - y_hat) ** 2, axis=0))


def nrmse(y_true, y_hat):
    """Per-channel RMSE divided by the standard deviation of ``y_true``, in percent."""
    y_true = as_signal(y_true)
    std = y_true.std(axis=0)
    if np.any(std == 0):
        raise ValueError("nrmse is undefined for a constant reference channel")
    return 100.0 * rmse(y_true, y_hat) / std


def simulation_nrmse(model, u, y, x0=None, discard=0):
    """Mean-over-channels NRMSE of a free-running simulation; ``inf`` on divergence."""
    sim = simulate(model, u, x0)
    y = as_signal(y)
    if sim.diverged or sim.y.shape[0] != y.shape[0]:
        return float("inf")
    return float(np.mean(nrmse(y[discard:], sim.y[discard:])))


# -- distribution-shift diagnostics ----------------------------------------
def estimate_lipschitz(model, probe_states, probe_inputs):
    """Largest spectral norm of ``df/dx`` over the probe points.

    This is an empirical lower bound of the global Lipschitz constant.
    """
    x = np.atleast_2d(probe_states)
    u = np.atleast_2d(probe_inputs)
    if x.shape[0] == 0:
        raise ValueError("need at least one probe point")
    J = model.state_jacobian(x, u)
    return float(np.max(np.linalg.norm(J, ord=2, axis=(1, 2))))


def lipschitz_probes(states, inputs, copies=10, jitter=0.1, rng=0):
    """Probe points: the given states plus jittered copies of them."""
    rng = np.random.default_rng(rng)
    states, inputs = np.atleast_2d(states), np.atleast_2d(inputs)
    noisy = [states + jitter * rng.standard_normal(states.shape) for _ in range(copies)]
    return np.vstack([states, *noisy]), np.vstack([inputs] * (copies + 1))


def geometric_bound(eps, L, n):
    """``eps * (L^n - 1) / (L - 1)`` (``eps * n`` for ``L = 1``)."""
    n = np.asarray(n, dtype=float)
    if L == 1.0:
        return eps * n
    with np.errstate(over="ignore", invalid="ignore"):
        return eps * (L ** n - 1.0) / (L - 1.0)


@dataclass
class ShiftDiagnostics:
    one_step_errors: np.ndarray
    lipschitz_estimate: float
    simulation_error: np.ndarray
    bound_curve: np.ndarray
    diverged: bool = False

    @property
    def epsilon(self):
        return float(np.max(self.one_step_errors)) if self.one_step_errors.size else 0.0


def shift_diagnostic(model, dataset, u, lipschitz=None, probe_rng=0, limit=DIVERGENCE_LIMIT):
    """Compare one-step accuracy on inferred states with free-running accuracy.

    ``simulation_error[k] = ||x_hat - x*||`` at dataset sample ``k``, for a
    rollout seeded with the first inferred state.  ``lipschitz`` overrides
    the probe-based estimate when the constant is known analytically;
    ``limit`` is the divergence guard of the rollout.
    """
    u = as_signal(u, model.n_u, "u")
    u_al = u[dataset.start:dataset.stop]
    x_star = dataset.x_star
    one_step = np.linalg.norm(model.step(x_star, u_al) - dataset.x_next(), axis=1)
    if lipschitz is None:
        px, pu = lipschitz_probes(x_star, u_al, rng=probe_rng)
        lipschitz = estimate_lipschitz(model, px, pu)
    sim = simulate(model, u_al, x_star[0], limit=limit)
    k = sim.x.shape[0] - 1
    err = np.linalg.norm(sim.x[:k] - x_star[:k], axis=1)
    eps = float(np.max(one_step)) if one_step.size else 0.0
    bound = geometric_bound(eps, lipschitz, np.arange(k))
    return ShiftDiagnostics(one_step, float(lipschitz), err, bound, sim.diverged)


# -- JSON ----------------------------------------------------------------------
def model_to_dict(model):
    lti, res = model.lti, model.residual
    d = {"format": MODEL_FORMAT, "version": 1,
         "dims": {"n_x": model.n_x, "n_u": model.n_u, "n_y": model.n_y,
                  "n_w": model.n_w, "n_z": model.n_z}}
    for name in LTI_FIELDS:
        d[name] = getattr(lti, name).tolist()
    d["C_z"] = res.C_z.tolist()
    d["D_zu"] = res.D_zu.tolist()
    d["activation"] = res.net.activation
    d["layers"] = [{"W": W.tolist(), "b": b.tolist()} for W, b in res.net.layers]
    if model.normalization is not None:
        d["normalization"] = {k: np.asarray(v).tolist() for k, v in model.normalization.items()}
    return d


def _matrix(d, key, shape):
    try:
        m = np.array(d[key], dtype=float).reshape(shape)
    except KeyError:
        raise DataFormatError(f"model file lacks '{key}'") from None
    except ValueError:
        raise DataFormatError(f"'{key}' does not have shape {shape}") from None
    return m


def model_from_dict(d):
    if d.get("format") != MODEL_FORMAT:
        raise DataFormatError(f"not an {MODEL_FORMAT} document")
    try:
        dims = {k: int(d["dims"][k]) for k in ("n_x", "n_u", "n_y", "n_w", "n_z")}
    except KeyError as exc:
        raise DataFormatError(f"missing dimension {exc}") from None
    n_x, n_u, n_y, n_w, n_z = (dims[k] for k in ("n_x", "n_u", "n_y", "n_w", "n_z"))
    shapes = {"A": (n_x, n_x), "B_u": (n_x, n_u), "B_w": (n_x, n_w), "C_y": (n_y, n_x),
              "D_yu": (n_y, n_u), "D_yw": (n_y, n_w)}
    lti = LtiSubmodel(**{k: _matrix(d, k, s) for k, s in shapes.items()})
    layers = [(np.array(layer["W"], dtype=float), np.array(layer["b"], dtype=float))
              for layer in d.get("layers", [])]
    net = MlpParams(layers, d.get("activation", "tanh"))
    res = ResidualMap(_matrix(d, "C_z", (n_z, n_x)), _matrix(d, "D_zu", (n_z, n_u)), net)
    norm = d.get("normalization")
    if norm is not None:
        norm = {k: np.array(v, dtype=float) for k, v in norm.items()}
    return NllfrModel(lti, res, norm)


def save_model(model, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"invalid JSON: {exc.msg}", exc.lineno) from None
    return model_from_dict(d)


def linear_model(lti, n_z=1, hidden=(1,), activation="tanh"):
    """Wrap a linear submodel with a zero residual network."""
    n_w = max(lti.n_w, 1)
    if lti.n_w == 0:
        lti = lti.with_coupling(np.zeros((lti.n_x, n_w)), np.zeros((lti.n_y, n_w)))
    widths = [n_z, *hidden, n_w]
    layers = [(np.zeros((o, i)), np.zeros(o)) for i, o in zip(widths[:-1], widths[1:])]
    res = ResidualMap(np.zeros((n_z, lti.n_x)), np.zeros((n_z, lti.n_u)),
                      MlpParams(layers, activation))
    return NllfrModel(lti, res)
