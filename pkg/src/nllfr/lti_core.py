"""Linear state-space building blocks.

Signals are stored time-major: an array of shape ``(N, n)`` holds ``N``
samples of an ``n``-channel signal.  One-dimensional arrays are accepted
for single-channel signals and promoted to ``(N, 1)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DimensionError, ExcitationError, NllfrError, StabilityError

STABILITY_TOL = 1e-9
MIN_STATE_SCALE = 1e-8


def as_signal(s, n_channels=None, name="signal"):
    """Return ``s`` as a float ``(N, n)`` array, checking the channel count."""
    s = np.asarray(s, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    if s.ndim != 2:
        raise DimensionError(name, "(N, n)", s.shape)
    if n_channels is not None and s.shape[1] != n_channels:
        raise DimensionError(name, f"(N, {n_channels})", s.shape)
    return s


@dataclass(frozen=True, eq=False)
class LtiSubmodel:
    """Linear part of the model with the residual channel ``w`` as exogenous input.

    ``n_w = 0`` gives a purely linear model; ``B_w`` and ``D_yw`` are then
    empty ``(n_x, 0)`` and ``(n_y, 0)`` arrays.
    """

    A: np.ndarray
    B_u: np.ndarray
    C_y: np.ndarray
    D_yu: np.ndarray
    B_w: np.ndarray = None
    D_yw: np.ndarray = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n_x = A.shape[0]
        if A.shape != (n_x, n_x) or n_x < 1:
            raise DimensionError("A", "(n_x, n_x)", A.shape)
        B_u = np.atleast_2d(np.asarray(self.B_u, dtype=float))
        C_y = np.atleast_2d(np.asarray(self.C_y, dtype=float))
        D_yu = np.atleast_2d(np.asarray(self.D_yu, dtype=float))
        if B_u.shape[0] != n_x or B_u.shape[1] < 1:
            raise DimensionError("B_u", f"({n_x}, n_u)", B_u.shape)
        n_u = B_u.shape[1]
        if C_y.shape[1] != n_x or C_y.shape[0] < 1:
            raise DimensionError("C_y", f"(n_y, {n_x})", C_y.shape)
        n_y = C_y.shape[0]
        if D_yu.shape != (n_y, n_u):
            raise DimensionError("D_yu", (n_y, n_u), D_yu.shape)
        B_w = np.zeros((n_x, 0)) if self.B_w is None else np.asarray(self.B_w, dtype=float)
        D_yw = np.zeros((n_y, B_w.shape[-1] if B_w.ndim == 2 else 0)) if self.D_yw is None \
            else np.asarray(self.D_yw, dtype=float)
        if B_w.ndim != 2 or B_w.shape[0] != n_x:
            raise DimensionError("B_w", f"({n_x}, n_w)", B_w.shape)
        if D_yw.ndim != 2 or D_yw.shape != (n_y, B_w.shape[1]):
            raise DimensionError("D_yw", (n_y, B_w.shape[1]), D_yw.shape)
        for name, value in (("A", A), ("B_u", B_u), ("C_y", C_y), ("D_yu", D_yu),
                            ("B_w", B_w), ("D_yw", D_yw)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.B_u.shape[1]

    @property
    def n_y(self):
        return self.C_y.shape[0]

    @property
    def n_w(self):
        return self.B_w.shape[1]

    def spectral_radius(self):
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))

    def is_stable(self, tol=STABILITY_TOL):
        return self.spectral_radius() < 1.0 - tol

    def with_coupling(self, B_w, D_yw):
        """Copy of the model with a new residual coupling ``(B_w, D_yw)``."""
        return replace(self, B_w=np.asarray(B_w, dtype=float), D_yw=np.asarray(D_yw, dtype=float))

    def linear_part(self):
        """Copy with the residual channel removed (``n_w = 0``)."""
        return LtiSubmodel(self.A, self.B_u, self.C_y, self.D_yu)


@dataclass(frozen=True, eq=False)
class StateTransform:
    """Diagonal state scaling ``T_x = diag(scale)``."""

    scale: np.ndarray

    def __post_init__(self):
        scale = np.asarray(self.scale, dtype=float).ravel()
        if scale.size == 0 or not np.all(np.isfinite(scale)) or np.any(scale <= 0):
            raise ValueError("state scales must be strictly positive and finite")
        scale.setflags(write=False)
        object.__setattr__(self, "scale", scale)


@dataclass(frozen=True, eq=False)
class WindowOperators:
    """Stacked prediction operators over a window of ``H + 1`` samples.

    ``Theta`` is the per-sample ``n_w x n_w`` weight; the regularizer on a
    stacked residual applies it block-diagonally.  ``G`` is kept together
    with its Cholesky factor so repeated window solves reuse it.
    """

    O_x: np.ndarray
    T_u: np.ndarray
    T_w: np.ndarray
    Theta: np.ndarray
    G: np.ndarray
    H: int
    lam: float
    epsilon: float
    _chol: tuple = field(repr=False, compare=False, default=None)

    @property
    def n_w(self):
        return self.Theta.shape[0]

    def theta_block(self):
        return np.kron(np.eye(self.H + 1), self.Theta)

    def solve_G(self, rhs):
        return cho_solve(self._chol, rhs)


def simulate_lti(model, u, w=None, x0=None):
    """Simulate the linear submodel.

    Returns ``(x, y)`` with ``x`` of shape ``(N + 1, n_x)`` (terminal state
    included) and ``y`` of shape ``(N, n_y)``.
    """
    u = as_signal(u, model.n_u, "u")
    N = u.shape[0]
    if model.n_w > 0:
        if w is None:
            raise DimensionError("w", f"({N}, {model.n_w})", None)
        w = as_signal(w, model.n_w, "w")
        if w.shape[0] != N:
            raise DimensionError("w", (N, model.n_w), w.shape)
    elif w is not None and np.size(w) > 0:
        raise DimensionError("w", "absent (n_w = 0)", np.shape(w))

    x0 = np.zeros(model.n_x) if x0 is None else np.asarray(x0, dtype=float).ravel()
    if x0.shape != (model.n_x,):
        raise DimensionError("x0", (model.n_x,), x0.shape)

    drive = u @ model.B_u.T
    y = u @ model.D_yu.T
    if model.n_w > 0:
        drive += w @ model.B_w.T
        y += w @ model.D_yw.T
    x = np.empty((N + 1, model.n_x))
    x[0] = x0
    A = model.A
    for n in range(N):
        x[n + 1] = A @ x[n] + drive[n]
    y += x[:-1] @ model.C_y.T
    return x, y


def normalization_transform(model, u):
    """Diagonal transform built from the state standard deviations of ``model`` driven by ``u``.

    Scales below ``1e-8`` are clamped with a warning.
    """
    if not model.is_stable():
        raise StabilityError(
            f"normalization needs a stable model (spectral radius {model.spectral_radius():.6g})")
    u = as_signal(u, model.n_u, "u")
    if np.all(np.ptp(u, axis=0) == 0):
        raise ExcitationError("input is constant; cannot estimate state variances")
    x, _ = simulate_lti(model.linear_part(), u)
    x = x[:-1]
    if not np.any(x):
        raise ExcitationError("simulated state trajectory is identically zero; "
                              "use a richer excitation signal")
    scale = x.std(axis=0)
    small = scale < MIN_STATE_SCALE
    if np.any(small):
        warnings.warn(f"states {np.flatnonzero(small).tolist()} are barely excited; "
                      f"clamping their scale to {MIN_STATE_SCALE}", RuntimeWarning, stacklevel=2)
        scale = np.where(small, MIN_STATE_SCALE, scale)
    return StateTransform(scale)


def apply_similarity(model, t):
    """Return the model in coordinates ``x_new = T^-1 x`` with ``T = diag(t.scale)``."""
    s = t.scale
    if s.shape != (model.n_x,):
        raise DimensionError("scale", (model.n_x,), s.shape)
    if np.all(s == 1.0):
        return model
    inv = 1.0 / s
    return LtiSubmodel(
        A=inv[:, None] * model.A * s[None, :],
        B_u=inv[:, None] * model.B_u,
        C_y=model.C_y * s[None, :],
        D_yu=model.D_yu,
        B_w=inv[:, None] * model.B_w,
        D_yw=model.D_yw,
    )


def markov_blocks(model, B, D, H):
    """Blocks ``[D, C B, C A B, ..., C A^(H-1) B]`` for an input matrix ``B``."""
    blocks = [D]
    AkB = B
    for _ in range(H):
        blocks.append(model.C_y @ AkB)
        AkB = model.A @ AkB
    return blocks


def observability_matrix(model, H):
    """Extended observability matrix with row blocks ``C_y A^k``, ``k = 0..H``."""
    rows = [model.C_y]
    for _ in range(H):
        rows.append(rows[-1] @ model.A)
    return np.vstack(rows)


def block_toeplitz(blocks, H):
    """Lower block-triangular Toeplitz matrix with block ``(i, j) = blocks[i - j]``."""
    p, m = blocks[0].shape
    T = np.zeros((p * (H + 1), m * (H + 1)))
    for i in range(H + 1):
        for j in range(i + 1):
            T[i * p:(i + 1) * p, j * m:(j + 1) * m] = blocks[i - j]
    return T


def build_window_operators(model, H, lam, epsilon):
    if H < 0:
        raise ValueError("H must be >= 0")
    if lam <= 0 or epsilon <= 0:
        raise ValueError("lam and epsilon must be strictly positive")
    if model.n_w < 1:
        raise DimensionError("B_w", "(n_x, n_w) with n_w >= 1", model.B_w.shape)
    O_x = observability_matrix(model, H)
    T_u = block_toeplitz(markov_blocks(model, model.B_u, model.D_yu, H), H)
    T_w = block_toeplitz(markov_blocks(model, model.B_w, model.D_yw, H), H)
    M = np.vstack([model.B_w, model.D_yw])
    Theta = M.T @ M + (epsilon / lam) * np.eye(model.n_w)
    G = T_w.T @ T_w + lam * np.kron(np.eye(H + 1), Theta)
    G = 0.5 * (G + G.T)
    try:
        chol = cho_factor(G, lower=True)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - excluded by epsilon > 0
        raise NllfrError("window normal matrix is not positive definite") from exc
    return WindowOperators(O_x=O_x, T_u=T_u, T_w=T_w, Theta=Theta, G=G, H=int(H),
                           lam=float(lam), epsilon=float(epsilon), _chol=chol)


def stack_signal(s, n, H):
    """Stack ``s(n), ..., s(n + H)`` into one vector."""
    s = as_signal(s)
    if n < 0 or H < 0 or n + H >= s.shape[0]:
        raise IndexError(f"window [{n}, {n + H}] outside signal of length {s.shape[0]}")
    return s[n:n + H + 1].reshape(-1)


def stacked_windows(s, H):
    """All stacked windows of ``s`` as rows: row ``n`` equals ``stack_signal(s, n, H)``."""
    s = as_signal(s)
    N, n_s = s.shape
    if H + 1 > N:
        raise IndexError(f"window length {H + 1} exceeds signal length {N}")
    view = np.lib.stride_tricks.sliding_window_view(s, H + 1, axis=0)  # (N-H, n_s, H+1)
    return view.transpose(0, 2, 1).reshape(N - H, n_s * (H + 1))


def impulse_response(model, n_lags):
    """Markov parameters ``D, C B, C A B, ...`` as an array ``(n_lags, n_y, n_u)``."""
    return np.array(markov_blocks(model, model.B_u, model.D_yu, n_lags - 1))
