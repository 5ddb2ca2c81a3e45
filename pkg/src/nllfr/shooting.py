"""Joint refinement of all model parameters by multiple shooting.

The record ``[N0, N - H - 1]`` is split into intervals of length ``d``.
Each interval is simulated from its own free initial state; continuity
between consecutive intervals is enforced with a quadratic penalty whose
weight ``mu`` is raised until the gaps close.  ``d = N_tot`` recovers
single shooting.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import ConfigError
from .lti_core import as_signal
from .nllfr_model import DIVERGENCE_LIMIT, simulation_nrmse

log = logging.getLogger(__name__)

GUARD_VALUE = 1e6
TRACE_COLUMNS = ("iteration", "objective", "nrmse", "continuity", "damping", "mu", "elapsed")


@dataclass
class ShootingConfig:
    d: int = 1
    max_iterations: int = 200
    constraint_weight: float = 1.0
    mu_max: float = 1e6
    mu_factor: float = 10.0
    convergence_tol: float = 1e-10
    stall_tol: float = 1e-3
    violation_target: float = 1e-6
    initial_damping: float = 1e-3
    time_budget: float | None = None
    nrmse_discard: int = 0
    track_nrmse: bool = True

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError("interval length d must be >= 1")
        if self.max_iterations < 0:
            raise ConfigError("max_iterations must be >= 0")
        if self.constraint_weight <= 0 or self.mu_max < self.constraint_weight:
            raise ConfigError("need 0 < constraint_weight <= mu_max")


def build_intervals(N, H, N0, d):
    """Shooting start indices, per-interval index ranges and all-but-last starts."""
    N_tot = N - H - N0
    if N_tot < 1:
        raise ConfigError(f"no samples left: N - H - N0 = {N_tot}")
    if d < 1:
        raise ConfigError("interval length d must be >= 1")
    I = N0 + d * np.arange((N_tot - 1) // d + 1)
    last = N - H - 1
    N_i = {int(i): range(int(i), min(int(i) + d - 1, last) + 1) for i in I}
    return I, N_i, I[:-1]


@dataclass
class ShootingProblem:
    model: object          # NllfrModel template; parameters live in ``theta``
    theta: np.ndarray
    X: np.ndarray          # (len(I), n_x)
    u: np.ndarray
    y: np.ndarray
    H: int
    N0: int
    d: int
    mu: float = 1.0
    I: np.ndarray = field(init=False)
    N_i: dict = field(init=False)
    I_minus: np.ndarray = field(init=False)

    def __post_init__(self):
        self.u = as_signal(self.u, self.model.n_u, "u")
        self.y = as_signal(self.y, self.model.n_y, "y")
        self.I, self.N_i, self.I_minus = build_intervals(self.N, self.H, self.N0, self.d)
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        if self.X.shape != (len(self.I), self.model.n_x):
            raise ConfigError(f"need {len(self.I)} shooting states of size {self.model.n_x}, "
                              f"got array of shape {self.X.shape}")
        self.theta = np.asarray(self.theta, dtype=float)

    @classmethod
    def from_model(cls, model, X, u, y, H, N0, d, mu=1.0):
        return cls(model, model.to_vector(), X, u, y, H, N0, d, mu)

    @property
    def N(self):
        return self.u.shape[0]

    @property
    def N_tot(self):
        return self.N - self.H - self.N0

    @property
    def lengths(self):
        return np.array([len(self.N_i[int(i)]) for i in self.I])

    @property
    def n_params(self):
        return self.theta.size

    def current_model(self, theta=None):
        return self.model.from_vector(self.theta if theta is None else theta)

    def vector(self):
        return np.concatenate([self.theta, self.X.ravel()])

    def with_vector(self, v):
        p = self.n_params
        out = ShootingProblem(self.model, v[:p].copy(), v[p:].reshape(self.X.shape), self.u,
                              self.y, self.H, self.N0, self.d, self.mu)
        return out


@dataclass
class Rollout:
    y_hat: np.ndarray          # (N_tot, n_y) predictions in time order
    x_end: np.ndarray          # states reached after d steps, one per start in I_minus
    finite: bool
    dy_dp: np.ndarray | None = None   # (N_tot, n_y, p)
    dy_dx: np.ndarray | None = None   # (N_tot, n_y, n_x), w.r.t. the interval's start state
    dx_dp: np.ndarray | None = None   # (len(I_minus), n_x, p)
    dx_dx: np.ndarray | None = None   # (len(I_minus), n_x, n_x)


def rollout(problem, theta=None, X=None, jacobian=False):
    """Simulate every interval from its shooting state, all intervals at once.

    With ``jacobian=True`` also propagates forward sensitivities of the
    states with respect to the parameters and to the interval start state.
    """
    model = problem.current_model(theta)
    X = problem.X if X is None else X
    n_x, n_y = model.n_x, model.n_y
    p = model.n_params
    lengths = problem.lengths
    starts = problem.I
    n_int = len(starts)
    u = problem.u
    y_hat = np.empty((problem.N_tot, n_y))
    xh = X.copy()
    finite = True
    if jacobian:
        dy_dp = np.empty((problem.N_tot, n_y, p))
        dy_dx = np.empty((problem.N_tot, n_y, n_x))
        Sx = np.broadcast_to(np.eye(n_x), (n_int, n_x, n_x)).copy()
        Sp = np.zeros((n_int, n_x, p))
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(int(lengths.max())):
            m = int(np.count_nonzero(lengths > k))  # active intervals form a prefix
            n_glob = starts[:m] + k
            t = n_glob - problem.N0
            un = u[n_glob]
            if jacobian:
                x_next, yk, F_x, F_p, H_x, H_p = model.step_jacobians(xh[:m], un)
                dy_dx[t] = H_x @ Sx[:m]
                dy_dp[t] = H_x @ Sp[:m] + H_p
                Sp[:m] = F_x @ Sp[:m] + F_p
                Sx[:m] = F_x @ Sx[:m]
            else:
                _, w = model.residual_signals(xh[:m], un)
                lti = model.lti
                yk = xh[:m] @ lti.C_y.T + un @ lti.D_yu.T + w @ lti.D_yw.T
                x_next = xh[:m] @ lti.A.T + un @ lti.B_u.T + w @ lti.B_w.T
            y_hat[t] = yk
            xh[:m] = x_next
            if not np.all(np.isfinite(x_next)) or np.max(np.abs(x_next)) > DIVERGENCE_LIMIT:
                finite = False
                break
    n_minus = n_int - 1
    out = Rollout(y_hat=y_hat, x_end=xh[:n_minus], finite=finite)
    if jacobian:
        out.dy_dp, out.dy_dx = dy_dp, dy_dx
        out.dx_dp, out.dx_dx = Sp[:n_minus], Sx[:n_minus]
    return out


def shooting_residuals(problem, theta=None, X=None, return_flag=False):
    """Output residuals scaled by ``1/sqrt(N_tot)`` followed by weighted continuity gaps.

    A diverging rollout yields residuals filled with a guard value; pass
    ``return_flag=True`` to also receive whether the rollout stayed finite.
    """
    X = problem.X if X is None else X
    ro = rollout(problem, theta, X)
    r_out = (problem.y[problem.N0:problem.N0 + problem.N_tot] - ro.y_hat) / np.sqrt(problem.N_tot)
    r_con = np.sqrt(problem.mu) * (ro.x_end - X[1:])
    r = np.concatenate([r_out.ravel(), r_con.ravel()])
    ok = ro.finite and np.all(np.isfinite(r))
    if not ok:
        log.debug("rollout diverged; using guard residuals")
        r = np.where(np.isfinite(r), r, GUARD_VALUE)
        if not ro.finite:
            r = np.full_like(r, GUARD_VALUE)
    return (r, ok) if return_flag else r


def shooting_jacobian(problem, theta=None, X=None, with_residuals=False):
    """Sparse Jacobian of ``shooting_residuals`` w.r.t. ``(theta, X)``.

    Column order is the parameter vector followed by the flattened
    shooting states.  Output rows of interval ``i`` only involve ``theta``
    and state ``i``; continuity rows of gap ``j`` involve states ``j`` and
    ``j + 1``.
    """
    X = problem.X if X is None else X
    ro = rollout(problem, theta, X, jacobian=True)
    N_tot, n_y, n_x = problem.N_tot, problem.model.n_y, problem.model.n_x
    p = problem.n_params
    n_int = len(problem.I)
    s_out = 1.0 / np.sqrt(N_tot)
    s_con = np.sqrt(problem.mu)
    n_rows_out = N_tot * n_y
    n_rows = n_rows_out + (n_int - 1) * n_x

    theta_block = np.vstack([(-s_out * ro.dy_dp).reshape(n_rows_out, p),
                             (s_con * ro.dx_dp).reshape(-1, p)])

    # interval index of every output time step
    owner = np.repeat(np.arange(n_int), problem.lengths)
    r_idx = (np.arange(N_tot)[:, None, None] * n_y + np.arange(n_y)[None, :, None])
    c_idx = owner[:, None, None] * n_x + np.arange(n_x)[None, None, :]
    rows = [np.broadcast_to(r_idx, (N_tot, n_y, n_x)).ravel()]
    cols = [np.broadcast_to(c_idx, (N_tot, n_y, n_x)).ravel()]
    vals = [(-s_out * ro.dy_dx).ravel()]
    if n_int > 1:
        j = np.arange(n_int - 1)
        r_c = n_rows_out + j[:, None, None] * n_x + np.arange(n_x)[None, :, None]
        c_c = j[:, None, None] * n_x + np.arange(n_x)[None, None, :]
        rows.append(np.broadcast_to(r_c, (n_int - 1, n_x, n_x)).ravel())
        cols.append(np.broadcast_to(c_c, (n_int - 1, n_x, n_x)).ravel())
        vals.append((s_con * ro.dx_dx).ravel())
        diag_r = n_rows_out + np.arange((n_int - 1) * n_x)
        rows.append(diag_r)
        cols.append(n_x + np.arange((n_int - 1) * n_x))
        vals.append(np.full(diag_r.size, -s_con))
    J_x = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(n_rows, n_int * n_x))
    J = sp.hstack([sp.csr_matrix(theta_block), J_x], format="csr")
    if not with_residuals:
        return J
    r_out = (problem.y[problem.N0:problem.N0 + N_tot] - ro.y_hat) * s_out
    r_con = s_con * (ro.x_end - X[1:])
    r = np.concatenate([r_out.ravel(), r_con.ravel()])
    return J, r, ro.finite and bool(np.all(np.isfinite(r)))


def continuity_violation(problem, theta=None, X=None):
    """Largest absolute state gap between consecutive intervals."""
    X = problem.X if X is None else X
    if len(problem.I) < 2:
        return 0.0
    ro = rollout(problem, theta, X)
    if not ro.finite:
        return float("inf")
    return float(np.max(np.abs(ro.x_end - X[1:])))


@dataclass
class ShootingResult:
    model: object
    X: np.ndarray
    trace: list
    continuity: float
    iterations: int
    message: str

    def trace_array(self):
        return np.array([[row[c] for c in TRACE_COLUMNS] for row in self.trace])


def write_trace_csv(trace, path, columns=TRACE_COLUMNS):
    """Write trace rows; the first column is written as an integer."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in trace:
            writer.writerow([int(row[columns[0]])] + [repr(float(row[c])) for c in columns[1:]])


def _nrmse(problem, theta, X, config):
    if not config.track_nrmse:
        return float("nan")
    model = problem.current_model(theta)
    s = slice(problem.N0, problem.N)
    return simulation_nrmse(model, problem.u[s], problem.y[s], X[0], config.nrmse_discard)


def _solve_arrow(M, p, rhs):
    """Solve ``M s = rhs`` for a normal matrix whose first ``p`` rows are dense.

    The trailing state block only couples neighbouring intervals, so it is
    factored with a fill-free LU and the parameter block is eliminated
    through a small dense Schur complement.
    """
    M = M.tocsc()
    if p == 0:
        return splu(M, permc_spec="NATURAL").solve(rhs)
    Mtt = M[:p, :p].toarray()
    Mtx = M[:p, p:].toarray()
    lu = splu(M[p:, p:].tocsc(), permc_spec="NATURAL")
    Y = lu.solve(np.ascontiguousarray(Mtx.T))
    rx = lu.solve(rhs[p:])
    S = Mtt - Mtx @ Y
    st = np.linalg.solve(0.5 * (S + S.T), rhs[:p] - Mtx @ rx)
    return np.concatenate([st, rx - Y @ st])


def solve(model_init, X_init, u, y, H, N0, config, callback=None):
    """Levenberg-Marquardt on the penalized multiple-shooting objective.

    Every LM trial counts as one iteration.  The returned trace has an
    entry for the initial point and for every accepted step, with the
    free-running NRMSE of the current parameters when ``track_nrmse``.
    """
    problem = ShootingProblem.from_model(model_init, X_init, u, y, H, N0, config.d, config.constraint_weight)
    p = problem.n_params
    v = problem.vector()
    t0 = time.perf_counter()

    def split(vec):
        return vec[:p], vec[p:].reshape(problem.X.shape)

    def evaluate(vec):
        r, ok = shooting_residuals(problem, *split(vec), return_flag=True)
        return r, (float(r @ r) if ok else float("inf"))

    J, r, ok = shooting_jacobian(problem, *split(v), with_residuals=True)
    obj = float(r @ r) if ok else float("inf")
    lam = config.initial_damping
    nu = 2.0
    trace = [dict(iteration=0, objective=obj, nrmse=_nrmse(problem, *split(v), config),
                  continuity=continuity_violation(problem, *split(v)), damping=lam,
                  mu=problem.mu, elapsed=0.0)]
    if not ok:
        log.warning("initial rollout diverged; returning the initial point")
        theta, X = split(v)
        return ShootingResult(model=problem.current_model(theta), X=X.copy(), trace=trace,
                              continuity=trace[0]["continuity"], iterations=0,
                              message="initial rollout diverged")
    message = "iteration budget exhausted"
    it = 0
    need_jac = False
    while it < config.max_iterations:
        if config.time_budget is not None and time.perf_counter() - t0 > config.time_budget:
            message = "time budget exhausted"
            break
        if need_jac:
            J, r, _ = shooting_jacobian(problem, *split(v), with_residuals=True)
            need_jac = False
        g = J.T @ r
        viol = trace[-1]["continuity"]
        if np.max(np.abs(g)) < config.convergence_tol or obj == 0.0:
            if viol > config.violation_target and problem.mu < config.mu_max:
                problem.mu = min(problem.mu * config.mu_factor, config.mu_max)
                need_jac = True
                r, obj = evaluate(v)
                continue
            message = "converged"
            break
        JtJ = (J.T @ J).tocsc()
        diag = sp.diags(np.maximum(JtJ.diagonal(), 1e-12), format="csc")
        it += 1
        try:
            step = _solve_arrow(JtJ + lam * diag, p, -g)
        except (RuntimeError, np.linalg.LinAlgError):
            step = np.full(v.shape, np.nan)
        r_new, obj_new = evaluate(v + step) if np.all(np.isfinite(step)) else (r, np.inf)
        if obj_new < obj:
            rel = (obj - obj_new) / obj
            predicted = float(step @ (lam * (diag @ step) - g))
            rho = (obj - obj_new) / predicted if predicted > 0 else 0.0
            v, r, obj = v + step, r_new, obj_new
            lam = max(lam * max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3), 1e-12)
            nu = 2.0
            need_jac = True
            viol = continuity_violation(problem, *split(v))
            trace.append(dict(iteration=it, objective=obj, nrmse=_nrmse(problem, *split(v), config),
                              continuity=viol, damping=lam, mu=problem.mu,
                              elapsed=time.perf_counter() - t0))
            if callback is not None:
                callback(trace[-1])
            stalled = rel < config.stall_tol
            stuck = False
        else:
            lam *= nu
            nu *= 2.0
            stalled = stuck = lam > 1e10
        if stalled and viol > config.violation_target and problem.mu < config.mu_max:
            problem.mu = min(problem.mu * config.mu_factor, config.mu_max)
            r, obj = evaluate(v)
            need_jac = True
            lam, nu = config.initial_damping, 2.0
        elif stuck:
            message = "no further decrease"
            break
    theta, X = split(v)
    model = problem.current_model(theta)
    return ShootingResult(model=model, X=X.copy(), trace=trace,
                          continuity=continuity_violation(problem, theta, X), iterations=it,
                          message=message)
