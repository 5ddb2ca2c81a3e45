"""Datasets: CSV I/O, normalization, synthetic benchmarks and a linear initializer."""
from __future__ import annotations

import csv
import json
import re
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import signal as sps
from scipy.linalg import block_diag, qr, solve_discrete_lyapunov

from .errors import ConfigError, DataFormatError, ExcitationError, NllfrError
from .lti_core import LtiSubmodel, as_signal, simulate_lti
from .nllfr_model import NllfrModel, simulate
from .static_net import MlpParams, ResidualMap

_CHANNEL = re.compile(r"^([uy])(\d+)$")


@dataclass
class IoDataset:
    u: np.ndarray
    y: np.ndarray
    sample_rate: float | None = None
    normalization: dict | None = None

    def __post_init__(self):
        self.u = as_signal(self.u, name="u")
        self.y = as_signal(self.y, name="y")
        if self.u.shape[0] != self.y.shape[0]:
            raise DataFormatError(f"u has {self.u.shape[0]} samples but y has {self.y.shape[0]}")

    @property
    def N(self):
        return self.u.shape[0]

    @property
    def n_u(self):
        return self.u.shape[1]

    @property
    def n_y(self):
        return self.y.shape[1]


# -- CSV ---------------------------------------------------------------------
def save_csv(dataset, path, extra=None):
    """Write ``u1..u_nu, y1..y_ny`` (plus optional named extra columns) with 17 digits."""
    cols = [f"u{i + 1}" for i in range(dataset.n_u)] + [f"y{i + 1}" for i in range(dataset.n_y)]
    data = [dataset.u, dataset.y]
    for name, values in (extra or {}).items():
        values = as_signal(values)
        cols += [f"{name}{i + 1}" for i in range(values.shape[1])]
        data.append(values)
    with open(path, "w", newline="") as fh:
        if dataset.sample_rate is not None:
            fh.write(f"# sample_rate={dataset.sample_rate!r}\n")
        np.savetxt(fh, np.hstack(data), delimiter=",", fmt="%.17g", header=",".join(cols),
                   comments="")


def read_table(path):
    """Parse a numeric CSV with one header row; ``#`` lines are metadata/comments.

    Returns ``(columns, array, meta)``.
    """
    meta = {}
    header = None
    rows = []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            if stripped.startswith("#"):
                m = re.match(r"#\s*(\w+)\s*=\s*(.+)$", stripped)
                if m:
                    meta[m.group(1)] = m.group(2).strip()
                continue
            cells = next(csv.reader([stripped]))
            if header is None:
                header = [c.strip() for c in cells]
                continue
            if len(cells) != len(header):
                raise DataFormatError(f"expected {len(header)} values, found {len(cells)}", lineno)
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                bad = next(c for c in cells if not _is_float(c))
                raise DataFormatError(f"non-numeric value {bad!r}", lineno) from None
    if header is None:
        raise DataFormatError(f"{path}: file is empty")
    if not rows:
        raise DataFormatError(f"{path}: header but no data rows")
    return header, np.array(rows), meta


def _is_float(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def _channels(header, prefix):
    idx = {}
    for k, name in enumerate(header):
        m = _CHANNEL.match(name)
        if m and m.group(1) == prefix:
            idx[int(m.group(2))] = k
    if not idx:
        raise DataFormatError(f"no '{prefix}1' column in header {header}", 1)
    expected = list(range(1, len(idx) + 1))
    if sorted(idx) != expected:
        missing = sorted(set(range(1, max(idx) + 1)) - set(idx))
        raise DataFormatError(f"missing channel(s) {[prefix + str(i) for i in missing]}", 1)
    return [idx[i] for i in expected]


def load_csv(path):
    header, data, meta = read_table(path)
    u = data[:, _channels(header, "u")]
    y = data[:, _channels(header, "y")]
    rate = float(meta["sample_rate"]) if "sample_rate" in meta else None
    return IoDataset(u, y, rate)


# -- normalization -------------------------------------------------------------
def normalize(dataset):
    """Zero-mean, unit-variance copy of ``dataset`` plus the records to undo it."""
    u_mean, u_std = dataset.u.mean(axis=0), dataset.u.std(axis=0)
    y_mean, y_std = dataset.y.mean(axis=0), dataset.y.std(axis=0)
    for name, std in (("u", u_std), ("y", y_std)):
        if np.any(std == 0):
            raise ExcitationError(f"channel(s) {np.flatnonzero(std == 0).tolist()} of {name} "
                                  "are constant")
    rec = {"u_mean": u_mean, "u_std": u_std, "y_mean": y_mean, "y_std": y_std}
    out = IoDataset((dataset.u - u_mean) / u_std, (dataset.y - y_mean) / y_std,
                    dataset.sample_rate, rec)
    return out, rec


def denormalize_output(y, records):
    return as_signal(y) * records["y_std"] + records["y_mean"]


def normalize_input(u, records):
    return (as_signal(u) - records["u_mean"]) / records["u_std"]


def denormalize(dataset):
    rec = dataset.normalization
    if rec is None:
        return dataset
    return IoDataset(dataset.u * rec["u_std"] + rec["u_mean"], denormalize_output(dataset.y, rec),
                     dataset.sample_rate)


# -- excitation ------------------------------------------------------------------
def filtered_gaussian(N, n_u, bandwidth, rng, order=4):
    """White Gaussian noise through a Butterworth low-pass, scaled to unit variance."""
    e = rng.standard_normal((N, n_u))
    if bandwidth < 1.0:
        b, a = sps.butter(order, bandwidth)
        e = sps.lfilter(b, a, e, axis=0)
    e -= e.mean(axis=0)
    return e / e.std(axis=0)


def multisine(N, n_u, bandwidth, rng, odd_only=True):
    """Random-phase multisine with flat amplitude spectrum, one period of length ``N``."""
    k_max = max(1, int(bandwidth * (N // 2)))
    k = np.arange(1, k_max + 1)
    if odd_only:
        k = k[k % 2 == 1]
    t = np.arange(N)
    u = np.empty((N, n_u))
    for j in range(n_u):
        phases = rng.uniform(0, 2 * np.pi, k.size)
        u[:, j] = np.cos(2 * np.pi * np.outer(t, k) / N + phases).sum(axis=1)
    u -= u.mean(axis=0)
    return u / u.std(axis=0)


# -- synthetic benchmarks --------------------------------------------------------
@dataclass
class SyntheticSpec:
    system: str = "planted_nllfr"
    N: int = 4000
    noise_std: float = 0.0
    excitation: str = "filtered_gaussian"
    rng_seed: int = 0
    n_x: int = 2
    bandwidth: float = 0.5
    sample_rate: float | None = None
    duffing: dict = field(default_factory=dict)
    planted: dict = field(default_factory=dict)
    max_rejections: int = 500

    def __post_init__(self):
        if self.system not in ("duffing_cubic", "planted_nllfr"):
            raise ConfigError(f"unknown system {self.system!r}")
        if self.excitation not in ("filtered_gaussian", "multisine"):
            raise ConfigError(f"unknown excitation {self.excitation!r}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.N < 2:
            raise ConfigError("N must be >= 2")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        if not isinstance(d, dict):
            raise ConfigError("synthetic spec must be a JSON object")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"synthetic spec: {exc}") from None

    def to_dict(self):
        return asdict(self)


@dataclass
class SyntheticTruth:
    y0: np.ndarray
    x: np.ndarray
    w: np.ndarray
    z: np.ndarray
    model: NllfrModel | None = None
    ode: dict | None = None


def cubic_tanh_net(gain, amplitude, width=10.0):
    """Two-neuron tanh network ``amplitude * (width * tanh(g z / width) - tanh(g z))``.

    Near the origin this behaves like ``amplitude * g^3 z^3 / 3``.
    """
    W1 = np.array([[gain / width], [gain]])
    W2 = np.array([[amplitude * width, -amplitude]])
    return MlpParams([(W1, np.zeros(2)), (W2, np.zeros(1))], "tanh")


PLANTED_DEFAULTS = {"pole_radius": (0.8, 0.95), "gain": 1.5, "amplitude": (0.2, 0.6),
                    "nonlinear_ratio": (0.05, 0.6)}


def _random_dynamics(n_x, rng, radius=(0.8, 0.95)):
    """Random real ``A`` built from lightly damped modes, in random coordinates."""
    blocks = []
    while sum(b.shape[0] for b in blocks) < n_x:
        left = n_x - sum(b.shape[0] for b in blocks)
        r = rng.uniform(*radius)
        if left >= 2:
            phi = rng.uniform(0.1 * np.pi, 0.4 * np.pi)
            c, s = r * np.cos(phi), r * np.sin(phi)
            blocks.append(np.array([[c, s], [-s, c]]))
        else:
            blocks.append(np.array([[r]]))
    Q, _ = qr(rng.standard_normal((n_x, n_x)))
    return Q @ block_diag(*blocks) @ Q.T


def _planted(spec, u, rng):
    n_x = spec.n_x
    opts = {**PLANTED_DEFAULTS, **spec.planted}
    unknown = set(opts) - set(PLANTED_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown planted options {sorted(unknown)}")
    lo, hi = opts["nonlinear_ratio"]
    for _ in range(spec.max_rejections):
        A = _random_dynamics(n_x, rng, opts["pole_radius"])
        if np.max(np.abs(np.linalg.eigvals(A))) >= 0.97:
            continue
        B_u = rng.uniform(-1, 1, (n_x, 1))
        C_y = rng.uniform(-1, 1, (1, n_x))
        D_yu = rng.uniform(-0.2, 0.2, (1, 1))
        B_w = rng.uniform(-1, 1, (n_x, 1))
        D_yw = rng.uniform(-0.2, 0.2, (1, 1))
        C_z = rng.uniform(-1, 1, (1, n_x))
        lin = LtiSubmodel(A, B_u, C_y, D_yu, np.zeros((n_x, 1)), np.zeros((1, 1)))
        x_lin, y_lin = simulate_lti(lin.linear_part(), u)
        # scale z to unit std on the linear response and y to unit std
        z_std = float((x_lin @ C_z.T).std())
        if z_std < 1e-6 or float(y_lin.std()) < 1e-6:
            continue
        C_z = C_z / z_std
        amplitude = rng.choice([-1.0, 1.0]) * rng.uniform(*opts["amplitude"])
        net = cubic_tanh_net(gain=opts["gain"], amplitude=amplitude)
        res = ResidualMap(C_z, np.zeros((1, 1)), net)
        model = NllfrModel(lin.with_coupling(B_w, D_yw), res)
        sim = simulate(model, u)
        if sim.diverged or np.max(np.abs(sim.x)) > 50 * np.max(np.abs(x_lin)):
            continue
        ratio = float(np.std(sim.y - y_lin) / np.std(y_lin))
        if not lo <= ratio <= hi:
            continue
        s = float(sim.y.std())
        lti = LtiSubmodel(A, B_u, C_y / s, D_yu / s, B_w, D_yw / s)
        model = NllfrModel(lti, res)
        sim = simulate(model, u)
        return model, sim
    raise NllfrError(f"no acceptable planted system after {spec.max_rejections} draws")


DUFFING_DEFAULTS = {"omega": 2 * np.pi * 50.0, "zeta": 0.05, "cubic_share": 0.2,
                    "substeps": 40, "sample_rate": 610.0}


def duffing_rk4_step(s, u, h, omega, zeta, alpha, gamma):
    """One RK4 step of the Duffing oscillator with the input held constant."""
    def rhs(q):
        x, v = q
        return np.array([v, gamma * u - 2 * zeta * omega * v - omega ** 2 * x - alpha * x ** 3])
    k1 = rhs(s)
    k2 = rhs(s + 0.5 * h * k1)
    k3 = rhs(s + 0.5 * h * k2)
    k4 = rhs(s + h * k3)
    return s + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def simulate_duffing(u, fs, omega, zeta, alpha, gamma, substeps):
    """Sampled Duffing states ``(position, velocity)``, input held over each sample.

    Integrates with ``substeps`` RK4 steps per sample; the loop works on
    python floats, which is several times faster than small arrays.
    """
    u = np.asarray(u, float).ravel()
    h = 1.0 / (fs * substeps)
    c, k = 2.0 * zeta * omega, omega ** 2

    def acc(x, v, f):
        return f - c * v - k * x - alpha * x * x * x

    x = v = 0.0
    states = np.empty((u.size + 1, 2))
    states[0] = 0.0
    for n, un in enumerate(u.tolist()):
        f = gamma * un
        for _ in range(substeps):
            k1x, k1v = v, acc(x, v, f)
            k2x, k2v = v + 0.5 * h * k1v, acc(x + 0.5 * h * k1x, v + 0.5 * h * k1v, f)
            k3x, k3v = v + 0.5 * h * k2v, acc(x + 0.5 * h * k2x, v + 0.5 * h * k2v, f)
            k4x, k4v = v + h * k3v, acc(x + h * k3x, v + h * k3v, f)
            x += h / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
            v += h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
        states[n + 1] = (x, v)
    return states


def _duffing(spec, u):
    p = {**DUFFING_DEFAULTS, **spec.duffing}
    fs = spec.sample_rate or p["sample_rate"]
    omega, zeta = p["omega"], p["zeta"]
    gamma = p.get("gamma", omega ** 2)
    if "alpha" in p:
        alpha = p["alpha"]
    else:
        lin = simulate_duffing(u, fs, omega, zeta, 0.0, gamma, p["substeps"])
        amp = np.max(np.abs(lin[:, 0]))
        alpha = p["cubic_share"] * omega ** 2 / amp ** 2
    states = simulate_duffing(u, fs, omega, zeta, alpha, gamma, p["substeps"])
    x = states[:-1, 0:1]
    w = -alpha * x ** 3
    ode = {"omega": omega, "zeta": zeta, "alpha": alpha, "gamma": gamma,
           "substeps": p["substeps"], "sample_rate": fs}
    return SyntheticTruth(y0=x.copy(), x=states, w=w, z=x.copy(), ode=ode), fs


def generate_synthetic(spec):
    """Generate a noisy benchmark record and the ground truth behind it."""
    rng = np.random.default_rng(spec.rng_seed)
    make_u = filtered_gaussian if spec.excitation == "filtered_gaussian" else multisine
    if spec.system == "planted_nllfr":
        u = make_u(spec.N, 1, spec.bandwidth, rng)
        model, sim = _planted(spec, u, rng)
        truth = SyntheticTruth(y0=sim.y, x=sim.x, w=sim.w, z=sim.z, model=model)
        fs = spec.sample_rate
    else:
        bw = spec.bandwidth
        u = make_u(spec.N, 1, bw, rng)
        truth, fs = _duffing(spec, u)
    y = truth.y0 + spec.noise_std * rng.standard_normal(truth.y0.shape) if spec.noise_std > 0 \
        else truth.y0.copy()
    return IoDataset(u, y, fs), truth


# -- linear initializer ------------------------------------------------------------
def _arx_regressors(u, y, na):
    N = u.shape[0]
    cols = [-y[na - k:N - k] for k in range(1, na + 1)]
    cols += [u[na - k:N - k] for k in range(0, na + 1)]
    return np.hstack(cols), y[na:]


def _project_stable(A, radius=0.99):
    lam, V = np.linalg.eig(A)
    if np.max(np.abs(lam)) < 1.0:
        return A, False
    lam = np.where(np.abs(lam) >= radius, radius * lam / np.abs(lam), lam)
    return np.real(V @ np.diag(lam) @ np.linalg.inv(V)), True


def _psd_sqrt(W):
    s, U = np.linalg.eigh(0.5 * (W + W.T))
    return U * np.sqrt(np.clip(s, 0.0, None))


def balanced_truncation(A, B, C, order):
    """Square-root balanced truncation of a stable realization."""
    Wc = solve_discrete_lyapunov(A, B @ B.T)
    Wo = solve_discrete_lyapunov(A.T, C.T @ C)
    Lc, Lo = _psd_sqrt(Wc), _psd_sqrt(Wo)
    U, hsv, Vt = np.linalg.svd(Lo.T @ Lc)
    if hsv[order - 1] <= hsv[0] * 1e-14:
        raise ExcitationError(f"realization has fewer than {order} significant Hankel "
                              "singular values; lower n_x or use richer data")
    S = np.diag(hsv[:order] ** -0.5)
    T = Lc @ Vt[:order].T @ S
    Ti = S @ U[:, :order].T @ Lo.T
    return Ti @ A @ T, Ti @ B, C @ T, hsv


def fit_linear_init(dataset, n_x, lags=None, return_info=False):
    """Linear state-space model of order ``n_x`` from input-output data.

    A high-order ARX model (``4 n_x`` lags by default) is fitted by
    truncated-SVD least squares, realized in block observer form and
    reduced by balanced truncation.  Unstable eigenvalues are pulled
    inside the unit disk and reported in the info dictionary.
    """
    if n_x < 1:
        raise ConfigError("model order n_x must be >= 1")
    u, y = dataset.u, dataset.y
    n_u, n_y = u.shape[1], y.shape[1]
    na = lags or 4 * n_x
    n_reg = na * n_y + (na + 1) * n_u
    if u.shape[0] - na < 2 * n_reg:
        raise ExcitationError(f"{u.shape[0]} samples are too few for {n_reg} ARX regressors; "
                              "use a longer record or a lower order")
    Phi, Y = _arx_regressors(u, y, na)
    U_part = Phi[:, na * n_y:]
    su = np.linalg.svd(U_part, compute_uv=False)
    if su[-1] <= 1e-8 * su[0]:
        raise ExcitationError(f"input is not persistently exciting of order {na + 1}; "
                              "use a longer or richer excitation")
    theta, *_ = np.linalg.lstsq(Phi, Y, rcond=1e-10)
    a = [theta[(k - 1) * n_y:k * n_y].T for k in range(1, na + 1)]
    off = na * n_y
    b = [theta[off + k * n_u:off + (k + 1) * n_u].T for k in range(na + 1)]

    nx_full = na * n_y
    A_o = np.zeros((nx_full, nx_full))
    B_o = np.zeros((nx_full, n_u))
    for k in range(na):
        A_o[k * n_y:(k + 1) * n_y, :n_y] = -a[k]
        if k + 1 < na:
            A_o[k * n_y:(k + 1) * n_y, (k + 1) * n_y:(k + 2) * n_y] = np.eye(n_y)
        B_o[k * n_y:(k + 1) * n_y] = b[k + 1] - a[k] @ b[0]
    C_o = np.hstack([np.eye(n_y), np.zeros((n_y, nx_full - n_y))])
    D = b[0]

    A_o, projected_full = _project_stable(A_o)
    A_r, B_r, C_r, hsv = balanced_truncation(A_o, B_o, C_o, n_x)
    A_r, projected = _project_stable(A_r)
    flagged = projected_full or projected
    if flagged:
        warnings.warn("linear initial model was unstable; eigenvalues projected inside the "
                      "unit disk", RuntimeWarning, stacklevel=2)
    model = LtiSubmodel(A_r, B_r, C_r, D)
    info = {"hankel_singular_values": hsv, "projected": flagged, "lags": na}
    return (model, info) if return_info else model
