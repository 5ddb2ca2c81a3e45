"""Guided residual search.

Given a fixed linear model, infer the residual signal ``w`` and the states
``x`` with a sliding-window ridge problem, and fit the coupling matrices
``(B_w, D_yw)`` with Levenberg-Marquardt on the resulting output error.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError, DivergenceError
from .lti_core import as_signal, build_window_operators, stacked_windows

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ResidualSearchConfig:
    H: int = 10
    N0: int = 100
    lam: float = 1.0
    epsilon: float = 1e-8
    outer_iterations: int = 25
    restarts: int = 1
    rng_seed: int = 0
    fd_step: float = 1e-6

    def __post_init__(self):
        if self.H < 0 or self.N0 < 0:
            raise ConfigError("H and N0 must be >= 0")
        if self.lam <= 0 or self.epsilon <= 0:
            raise ConfigError("lam and epsilon must be > 0")
        if self.outer_iterations < 1 or self.restarts < 1:
            raise ConfigError("outer_iterations and restarts must be >= 1")

    def check_length(self, N):
        if self.N0 + self.H >= N:
            raise ConfigError(f"N0 + H = {self.N0 + self.H} leaves no samples in a record of length {N}")


@dataclass
class InferredDataset:
    """Inferred latent samples for ``n = start, ..., start + n_samples - 1``.

    ``x_final`` is the inferred state one step past the last sample, so
    one-step predictions can be scored on every retained sample.
    """

    w_star: np.ndarray
    x_star: np.ndarray
    y_star: np.ndarray
    start: int
    x_final: np.ndarray

    @property
    def n_samples(self):
        return self.w_star.shape[0]

    @property
    def stop(self):
        return self.start + self.n_samples

    def x_next(self):
        """States ``x*(n + 1)`` aligned with ``x_star``."""
        return np.vstack([self.x_star[1:], self.x_final[None, :]])


@dataclass
class SearchResult:
    B_w: np.ndarray
    D_yw: np.ndarray
    dataset: InferredDataset
    loss_trace: np.ndarray
    restart: int
    restart_losses: list = field(default_factory=list)
    restart_traces: list = field(default_factory=list)

    def standardized(self):
        """Equivalent result with every inferred residual channel at unit standard deviation.

        Scaling ``w`` by ``1/s`` and the coupling matrices by ``s`` leaves
        states and outputs unchanged; it only fixes the otherwise free
        scale of the latent channel before the network is fitted to it.
        """
        s = self.dataset.w_star.std(axis=0)
        s = np.where(s > 0, s, 1.0)
        ds = replace(self.dataset, w_star=self.dataset.w_star / s)
        return replace(self, B_w=self.B_w * s, D_yw=self.D_yw * s, dataset=ds)


def inner_solve_window(ops, x_star_n, S_u, S_y):
    """Closed-form minimizer of the windowed ridge problem."""
    x_star_n = np.asarray(x_star_n, dtype=float).ravel()
    S_u = np.asarray(S_u, dtype=float).ravel()
    S_y = np.asarray(S_y, dtype=float).ravel()
    if x_star_n.shape[0] != ops.O_x.shape[1]:
        raise DimensionError("x_star", (ops.O_x.shape[1],), x_star_n.shape)
    if S_u.shape[0] != ops.T_u.shape[1]:
        raise DimensionError("S_u", (ops.T_u.shape[1],), S_u.shape)
    if S_y.shape[0] != ops.O_x.shape[0]:
        raise DimensionError("S_y", (ops.O_x.shape[0],), S_y.shape)
    mismatch = ops.O_x @ x_star_n + ops.T_u @ S_u - S_y
    return -ops.solve_G(ops.T_w.T @ mismatch)


def inner_sweep(model, u, y, config, ops=None):
    """Slide the window over the record and collect the inferred dataset.

    Only the first ``n_w`` entries of each window solution are used, so the
    gain ``K`` (first block rows of ``G^-1 T_w^T``) is formed once and the
    state recursion reduces to a closed-loop linear filter.
    """
    u = as_signal(u, model.n_u, "u")
    y = as_signal(y, model.n_y, "y")
    if u.shape[0] != y.shape[0]:
        raise DimensionError("y", (u.shape[0], model.n_y), y.shape)
    N = u.shape[0]
    config.check_length(N)
    H, n_w = config.H, model.n_w
    if ops is None:
        ops = build_window_operators(model, H, config.lam, config.epsilon)

    K = ops.solve_G(ops.T_w.T)[:n_w]
    mismatch = stacked_windows(u, H) @ ops.T_u.T - stacked_windows(y, H)
    c = -mismatch @ K.T                                  # (N - H, n_w)
    KO = K @ ops.O_x
    A_cl = model.A - model.B_w @ KO
    drive = u[:N - H] @ model.B_u.T + c @ model.B_w.T

    x = np.empty((N - H + 1, model.n_x))
    x[0] = 0.0
    for n in range(N - H):
        x[n + 1] = A_cl @ x[n] + drive[n]
    if not np.all(np.isfinite(x)):
        raise DivergenceError("inferred state trajectory is not finite")
    w = c - x[:-1] @ KO.T

    s = slice(config.N0, N - H)
    x_s, w_s = x[s], w[s]
    y_s = x_s @ model.C_y.T + u[s] @ model.D_yu.T + w_s @ model.D_yw.T
    return InferredDataset(w_star=w_s, x_star=x_s, y_star=y_s, start=config.N0,
                           x_final=x[N - H].copy())


def _output_residual(model, u, y, config):
    ds = inner_sweep(model, u, y, config)
    r = (as_signal(y)[ds.start:ds.stop] - ds.y_star) / np.sqrt(ds.n_samples)
    return r.ravel(), ds


def outer_loss(B_w, D_yw, model, u, y, config):
    """Mean squared output error of a fresh inner sweep under ``(B_w, D_yw)``."""
    r, _ = _output_residual(model.with_coupling(B_w, D_yw), u, y, config)
    return float(r @ r)


def levenberg_marquardt(fun, jac, p0, iterations, damping=1e-3, up=10.0, down=10.0,
                        max_damping=1e12, ftol=1e-9, patience=3):
    """Minimize ``||fun(p)||^2`` with a Marquardt damping schedule.

    Each iteration evaluates the Jacobian once and raises the damping
    until a step lowers the cost.  Stops early once the relative decrease
    stays below ``ftol`` for ``patience`` consecutive iterations.

    Returns ``(p, trace)`` where ``trace[0]`` is the initial cost and
    ``trace[k]`` the cost after iteration ``k``.
    """
    p = np.asarray(p0, dtype=float).copy()
    r = fun(p)
    cost = float(r @ r)
    if not np.isfinite(cost):
        raise DivergenceError("non-finite cost at the initial point", {"p": p})
    trace = [cost]
    lam = damping
    stalled = 0
    for _ in range(iterations):
        if cost == 0.0:
            trace.append(cost)
            break
        J = jac(p, r)
        g = J.T @ r
        if not np.any(g):
            trace.append(cost)
            break
        JtJ = J.T @ J
        scale = np.maximum(np.diag(JtJ), 1e-12)
        accepted = False
        while lam <= max_damping:
            try:
                step = np.linalg.solve(JtJ + lam * np.diag(scale), -g)
            except np.linalg.LinAlgError:
                lam *= up
                continue
            r_new = fun(p + step)
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new < cost:
                accepted = True
                break
            lam *= up
        if not accepted:
            trace.append(cost)
            break
        rel = (cost - cost_new) / cost
        p, r, cost = p + step, r_new, cost_new
        lam = max(lam / down, 1e-15)
        trace.append(cost)
        stalled = stalled + 1 if rel < ftol else 0
        if stalled >= patience:
            break
    return p, np.array(trace)


def _forward_difference_jacobian(fun, step):
    def jac(p, r0):
        J = np.empty((r0.size, p.size))
        for j in range(p.size):
            h = step * max(1.0, abs(p[j]))
            q = p.copy()
            q[j] += h
            J[:, j] = (fun(q) - r0) / h
        return J
    return jac


def bilevel_search(model0, u, y, config, n_w=1, initial=None):
    """Alternate inner sweeps with LM updates of the coupling matrices.

    ``initial`` optionally fixes the starting ``(B_w, D_yw)`` for the first
    restart; otherwise every restart draws them from U(-1, 1).
    """
    u = as_signal(u, model0.n_u, "u")
    y = as_signal(y, model0.n_y, "y")
    config.check_length(u.shape[0])
    if initial is not None:
        n_w = np.asarray(initial[0]).shape[1]
    n_x, n_y = model0.n_x, model0.n_y
    nb = n_x * n_w

    def unpack(p):
        return p[:nb].reshape(n_x, n_w), p[nb:].reshape(n_y, n_w)

    def fun(p):
        B_w, D_yw = unpack(p)
        try:
            r, _ = _output_residual(model0.with_coupling(B_w, D_yw), u, y, config)
        except DivergenceError:
            return np.full(u.shape[0] * n_y, np.inf)
        return r

    jac = _forward_difference_jacobian(fun, config.fd_step)
    seeds = np.random.SeedSequence(config.rng_seed).spawn(config.restarts)
    results = []
    for k, seed in enumerate(seeds):
        rng = np.random.default_rng(seed)
        if k == 0 and initial is not None:
            p0 = np.concatenate([np.asarray(initial[0], float).ravel(),
                                 np.asarray(initial[1], float).ravel()])
        else:
            p0 = rng.uniform(-1.0, 1.0, nb + n_y * n_w)
        try:
            p, trace = levenberg_marquardt(fun, jac, p0, config.outer_iterations)
        except DivergenceError as exc:
            log.warning("restart %d diverged: %s", k, exc)
            results.append((np.inf, k, p0, np.array([np.inf])))
            continue
        log.info("restart %d: loss %.3e -> %.3e", k, trace[0], trace[-1])
        results.append((trace[-1], k, p, trace))

    finite = [res for res in results if np.isfinite(res[0])]
    if not finite:
        raise DivergenceError("every restart of the residual search diverged",
                              {"restart_losses": [res[0] for res in results]})
    best_loss, best_k, best_p, best_trace = min(finite, key=lambda res: (res[0], res[1]))
    B_w, D_yw = unpack(best_p)
    ds = inner_sweep(model0.with_coupling(B_w, D_yw), u, y, config)
    return SearchResult(B_w=B_w, D_yw=D_yw, dataset=ds, loss_trace=best_trace, restart=best_k,
                        restart_losses=[res[0] for res in results],
                        restart_traces=[res[3] for res in results])


def output_controllability_check(model, tol=None):
    """Rank test of ``[D_yw, C_y B_w, C_y A B_w, ..., C_y A^(n_x-1) B_w]``.

    Returns ``(controllable, report)``; the report carries the singular
    values, the rank tolerance and the numerical rank.
    """
    if model.n_w < 1:
        raise DimensionError("B_w", "(n_x, n_w) with n_w >= 1", model.B_w.shape)
    blocks = [model.D_yw]
    AkB = model.B_w
    for _ in range(model.n_x):
        blocks.append(model.C_y @ AkB)
        AkB = model.A @ AkB
    M = np.hstack(blocks)
    sv = np.linalg.svd(M, compute_uv=False)
    if tol is None:
        tol = max(M.shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
    rank = int(np.sum(sv > tol))
    return rank == model.n_y, {"singular_values": sv, "tol": tol, "rank": rank, "n_y": model.n_y}
