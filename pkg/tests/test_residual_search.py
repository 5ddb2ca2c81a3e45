import numpy as np
import pytest
from conftest import random_lti, random_model
from scipy.linalg import cholesky

from nllfr import residual_search as rs
from nllfr.data_io import SyntheticSpec, generate_synthetic
from nllfr.errors import ConfigError, DivergenceError
from nllfr.lti_core import LtiSubmodel, build_window_operators, simulate_lti
from nllfr.nllfr_model import NllfrModel, simulate
from nllfr.residual_search import (ResidualSearchConfig, bilevel_search, inner_solve_window,
                                   inner_sweep, levenberg_marquardt, outer_loss,
                                   output_controllability_check)


def dense_window_oracle(ops, x, S_u, S_y):
    """Minimize 0.5||O x + T_u S_u + T_w s - S_y||^2 + 0.5 lam ||s||_Theta^2 by plain lstsq."""
    L = cholesky(np.kron(np.eye(ops.H + 1), ops.Theta), lower=False)
    A = np.vstack([ops.T_w, np.sqrt(ops.lam) * L])
    b = np.concatenate([S_y - ops.O_x @ x - ops.T_u @ S_u, np.zeros(L.shape[0])])
    return np.linalg.lstsq(A, b, rcond=None)[0]


def random_window(rng, H=None):
    n_x, n_y, n_w = (int(rng.integers(1, k + 1)) for k in (4, 2, 2))
    m = random_lti(rng, n_x=n_x, n_u=int(rng.integers(1, 3)), n_y=n_y, n_w=n_w)
    H = int(rng.integers(0, 11)) if H is None else H
    ops = build_window_operators(m, H, float(10 ** rng.uniform(-3, 1)), 1e-8)
    x = rng.standard_normal(n_x)
    S_u = rng.standard_normal(ops.T_u.shape[1])
    S_y = rng.standard_normal(ops.O_x.shape[0])
    return m, ops, x, S_u, S_y


def test_window_solution_matches_dense_oracle(rng):
    for _ in range(20):
        _, ops, x, S_u, S_y = random_window(rng)
        s = inner_solve_window(ops, x, S_u, S_y)
        ref = dense_window_oracle(ops, x, S_u, S_y)
        assert np.linalg.norm(s - ref) <= 1e-8 * max(np.linalg.norm(ref), 1e-12)


def test_window_stationarity(rng):
    for _ in range(100):
        _, ops, x, S_u, S_y = random_window(rng)
        s = inner_solve_window(ops, x, S_u, S_y)
        grad = ops.T_w.T @ (ops.O_x @ x + ops.T_u @ S_u + ops.T_w @ s - S_y) \
            + ops.lam * ops.theta_block() @ s
        assert np.linalg.norm(grad) < 1e-8 * (1 + np.linalg.norm(S_y))


def test_window_zero_when_linear_model_explains(rng):
    _, ops, x, S_u, _ = random_window(rng)
    S_y = ops.O_x @ x + ops.T_u @ S_u
    np.testing.assert_allclose(inner_solve_window(ops, x, S_u, S_y), 0.0, atol=1e-12)


def test_scalar_window_by_hand():
    lam, eps, r = 0.5, 1e-8, 0.7
    m = LtiSubmodel(A=[[0.5]], B_u=[[1.0]], C_y=[[1.0]], D_yu=[[0.0]], B_w=[[0.0]], D_yw=[[1.0]])
    ops = build_window_operators(m, 0, lam, eps)
    s = inner_solve_window(ops, [0.0], [0.0], [r])
    assert s[0] == pytest.approx(r / (1 + lam * (1 + eps / lam)), rel=1e-14)


def test_ridge_shrinkage(rng):
    m, _, x, S_u, S_y = random_window(rng, H=5)
    c = 1e-3
    norms = []
    for lam in np.logspace(-3, 2, 12):
        ops = build_window_operators(m, 5, lam, c * lam)   # Theta fixed across the grid
        s = inner_solve_window(ops, x, S_u, S_y)
        norms.append(s @ ops.theta_block() @ s)
    assert np.all(np.diff(norms) <= 1e-12 * max(norms))


def _linear_data(rng, N=400):
    m = random_lti(rng, n_x=2, n_w=1)
    u = rng.standard_normal(N)
    _, y = simulate_lti(m.linear_part(), u)
    return m, u, y


def test_sweep_on_linear_data_gives_zero_residual(rng):
    m, u, y = _linear_data(rng)
    ds = inner_sweep(m, u, y, ResidualSearchConfig(H=5, N0=20, lam=1e-3))
    assert np.max(np.abs(ds.w_star)) < 1e-8


def test_sweep_recursion_and_output_identity(rng):
    m, u, _ = _linear_data(rng)
    y = rng.standard_normal(u.shape[0])
    cfg = ResidualSearchConfig(H=4, N0=30, lam=0.1)
    ds = inner_sweep(m, u, y, cfg)
    assert ds.n_samples == u.shape[0] - cfg.H - cfg.N0
    s = slice(ds.start, ds.stop)
    x_next = ds.x_star @ m.A.T + u[s, None] @ m.B_u.T + ds.w_star @ m.B_w.T
    np.testing.assert_allclose(ds.x_next(), x_next, atol=1e-12)
    y_def = ds.x_star @ m.C_y.T + u[s, None] @ m.D_yu.T + ds.w_star @ m.D_yw.T
    np.testing.assert_array_equal(ds.y_star, y_def)


def test_sweep_matches_window_by_window_solves(rng):
    m, u, _ = _linear_data(rng, N=60)
    y = rng.standard_normal(60)
    cfg = ResidualSearchConfig(H=3, N0=0, lam=0.2)
    ds = inner_sweep(m, u, y, cfg)
    ops = build_window_operators(m, cfg.H, cfg.lam, cfg.epsilon)
    x = np.zeros(2)
    for n in range(60 - cfg.H):
        s = inner_solve_window(ops, x, u[n:n + cfg.H + 1], y[n:n + cfg.H + 1])
        np.testing.assert_allclose(ds.w_star[n], s[:1], atol=1e-10)
        np.testing.assert_allclose(ds.x_star[n], x, atol=1e-10)
        x = m.A @ x + m.B_u @ u[n:n + 1] + m.B_w @ s[:1]


def test_sweep_rejects_short_records(rng):
    m, u, y = _linear_data(rng, N=50)
    with pytest.raises(ConfigError):
        inner_sweep(m, u, y, ResidualSearchConfig(H=10, N0=40))


def test_zero_coupling_loss_is_linear_error(rng):
    m, u, _ = _linear_data(rng)
    y = rng.standard_normal(u.shape[0])
    cfg = ResidualSearchConfig(H=5, N0=50)
    zero = (np.zeros((2, 1)), np.zeros((1, 1)))
    _, y_lin = simulate_lti(m.linear_part(), u)
    expected = np.mean((y[50:-5] - y_lin[50:-5, 0]) ** 2)
    assert outer_loss(*zero, m, u, y, cfg) == pytest.approx(expected, rel=1e-12)
    assert outer_loss(0 * m.B_w, 0 * m.D_yw, m, u, y, cfg) == outer_loss(*zero, m, u, y, cfg)


def test_loss_sign_flip_invariance(rng):
    m, u, _ = _linear_data(rng)
    y = rng.standard_normal(u.shape[0])
    cfg = ResidualSearchConfig(H=5, N0=50, lam=0.3)
    a = outer_loss(m.B_w, m.D_yw, m, u, y, cfg)
    b = outer_loss(-m.B_w, -m.D_yw, m, u, y, cfg)
    assert a == pytest.approx(b, rel=1e-10)


@pytest.fixture(scope="module")
def planted():
    data, truth = generate_synthetic(SyntheticSpec(system="planted_nllfr", N=2000, rng_seed=2))
    return data, truth


def test_loss_at_truth_is_tiny(rng):
    # a minimum-phase channel from w to y keeps the inverse sweep stable as lam -> 0
    model = random_model(rng, n_x=2, hidden=(6,), coupling=0.3)
    lti = model.lti.with_coupling(model.lti.B_w, np.array([[2.0]]))
    assert np.all(np.abs(np.linalg.eigvals(lti.A - lti.B_w @ lti.C_y / 2.0)) < 1)
    model = NllfrModel(lti, model.residual)
    u = rng.standard_normal(1500)
    y = simulate(model, u).y
    cfg = ResidualSearchConfig(H=10, N0=100, lam=1e-6, epsilon=1e-12)
    assert outer_loss(lti.B_w, lti.D_yw, lti, u, y, cfg) < 1e-10


def test_lm_solves_linear_least_squares(rng):
    A = rng.standard_normal((30, 4))
    b = rng.standard_normal(30)
    p, trace = levenberg_marquardt(lambda p: A @ p - b, lambda p, r: A, np.zeros(4), 50)
    np.testing.assert_allclose(p, np.linalg.lstsq(A, b, rcond=None)[0], atol=1e-8)
    assert np.all(np.diff(trace) <= 0)


def test_stationary_start_is_kept(rng):
    m, u, y = _linear_data(rng)
    cfg = ResidualSearchConfig(H=5, N0=20, outer_iterations=1, restarts=1)
    init = (np.zeros((2, 1)), np.zeros((1, 1)))
    res = bilevel_search(m.linear_part(), u, y, cfg, initial=init)
    np.testing.assert_array_equal(res.B_w, init[0])
    np.testing.assert_array_equal(res.D_yw, init[1])


def test_restarts_monotone_and_best_selected(planted):
    data, truth = planted
    cfg = ResidualSearchConfig(H=10, N0=100, lam=1.0, outer_iterations=25, restarts=3, rng_seed=4)
    res = bilevel_search(truth.model.lti.linear_part(), data.u, data.y, cfg)
    assert len(res.restart_traces) == 3
    for tr in res.restart_traces:
        assert np.all(np.diff(tr) <= 0)
    assert res.loss_trace[-1] <= min(tr[0] for tr in res.restart_traces)
    assert res.loss_trace[-1] == min(res.restart_losses)
    assert res.restart == int(np.argmin(res.restart_losses))


def test_search_is_reproducible(planted):
    data, truth = planted
    cfg = ResidualSearchConfig(outer_iterations=3, rng_seed=7)
    a = bilevel_search(truth.model.lti.linear_part(), data.u, data.y, cfg)
    b = bilevel_search(truth.model.lti.linear_part(), data.u, data.y, cfg)
    np.testing.assert_array_equal(a.B_w, b.B_w)
    np.testing.assert_array_equal(a.dataset.w_star, b.dataset.w_star)


def test_all_restarts_diverging_raises(rng, monkeypatch):
    m, u, y = _linear_data(rng)

    def boom(*args, **kwargs):
        raise DivergenceError("forced")

    monkeypatch.setattr(rs, "inner_sweep", boom)
    with pytest.raises(DivergenceError) as info:
        bilevel_search(m.linear_part(), u, y, ResidualSearchConfig(H=5, N0=20, restarts=2))
    assert len(info.value.diagnostics["restart_losses"]) == 2


def test_standardized_result_is_equivalent(planted):
    data, truth = planted
    cfg = ResidualSearchConfig(outer_iterations=2)
    lti0 = truth.model.lti.linear_part()
    res = bilevel_search(lti0, data.u, data.y, cfg)
    std = res.standardized()
    np.testing.assert_allclose(std.dataset.w_star.std(axis=0), 1.0, rtol=1e-12)
    np.testing.assert_allclose(std.dataset.w_star @ std.B_w.T, res.dataset.w_star @ res.B_w.T,
                               rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(std.dataset.w_star @ std.D_yw.T,
                               res.dataset.w_star @ res.D_yw.T, rtol=1e-10, atol=1e-14)


def test_output_controllability(rng):
    m = random_lti(rng, n_x=3, n_y=1, n_w=1)
    ok, rep = output_controllability_check(m.with_coupling(np.zeros((3, 1)), np.zeros((1, 1))))
    assert not ok and rep["rank"] == 0
    ok, _ = output_controllability_check(m.with_coupling(np.zeros((3, 1)), np.ones((1, 1))))
    assert ok
    for _ in range(10):
        m = random_lti(rng, n_x=3, n_y=2, n_w=int(rng.integers(1, 3)))
        blocks = [m.D_yw] + [m.C_y @ np.linalg.matrix_power(m.A, k) @ m.B_w for k in range(3)]
        expected = np.linalg.matrix_rank(np.hstack(blocks)) == m.n_y
        assert output_controllability_check(m)[0] == expected
