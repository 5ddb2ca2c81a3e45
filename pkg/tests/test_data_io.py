import json
import warnings

import numpy as np
import pytest
from scipy.linalg import expm

from nllfr.data_io import (DUFFING_DEFAULTS, IoDataset, SyntheticSpec, denormalize,
                           denormalize_output, duffing_rk4_step, fit_linear_init,
                           generate_synthetic, load_csv, normalize, save_csv, simulate_duffing)
from nllfr.errors import ConfigError, DataFormatError, ExcitationError
from nllfr.lti_core import LtiSubmodel, simulate_lti
from nllfr.nllfr_model import simulate


def test_csv_round_trip_is_bitwise(rng, tmp_path):
    ds = IoDataset(rng.standard_normal((50, 2)) * 1e3, rng.standard_normal((50, 1)) / 7,
                   sample_rate=610.0)
    save_csv(ds, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.u, ds.u)
    np.testing.assert_array_equal(back.y, ds.y)
    assert back.sample_rate == 610.0


def test_hand_written_file(tmp_path):
    (tmp_path / "d.csv").write_text("y1,u1\n1.5,0\n-2,1e-3\n3.25,  7\n")
    ds = load_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(ds.u.ravel(), [0.0, 1e-3, 7.0])
    np.testing.assert_array_equal(ds.y.ravel(), [1.5, -2.0, 3.25])
    assert ds.sample_rate is None


@pytest.mark.parametrize("text, match", [
    ("", "empty"),
    ("u1,y1\n", "no data"),
    ("u1,y1\n1,2\n3\n", "line 3"),
    ("u1,y1\n1,2\n3,abc\n", "line 3.*abc"),
    ("u1,y2\n1,2\n", "y1"),
    ("u1,u3,y1\n1,2,3\n", "u2"),
])
def test_malformed_files(tmp_path, text, match):
    (tmp_path / "d.csv").write_text(text)
    with pytest.raises(DataFormatError, match=match):
        load_csv(tmp_path / "d.csv")


def test_normalization(rng):
    x = rng.standard_normal((300, 2))
    ds = IoDataset(3.0 * x[:, :1] - 4.0, -0.5 * x[:, 1:] + 10.0)
    n, rec = normalize(ds)
    for s in (n.u, n.y):
        assert np.all(np.abs(s.mean(axis=0)) < 1e-10)
        assert np.all(np.abs(s.std(axis=0) - 1) < 1e-10)
    # two-pass statistics oracle
    col = [float(v) for v in ds.u[:, 0]]
    mean = sum(col) / len(col)
    std = (sum((v - mean) ** 2 for v in col) / len(col)) ** 0.5
    assert rec["u_mean"][0] == pytest.approx(mean, rel=1e-12)
    assert rec["u_std"][0] == pytest.approx(std, rel=1e-12)
    assert rec["y_std"][0] == pytest.approx(0.5 * x[:, 1].std(), rel=1e-12)
    back = denormalize(n)
    np.testing.assert_allclose(back.u, ds.u, rtol=0, atol=1e-12 * 10)
    np.testing.assert_allclose(denormalize_output(n.y, rec), ds.y, rtol=1e-12)
    n2, rec2 = normalize(n)
    np.testing.assert_allclose(n2.u, n.u, atol=1e-12)
    np.testing.assert_allclose(rec2["y_std"], 1.0, atol=1e-12)


def test_constant_channel_rejected(rng):
    with pytest.raises(ExcitationError):
        normalize(IoDataset(np.ones(10), rng.standard_normal(10)))


def test_mismatched_lengths():
    with pytest.raises(DataFormatError):
        IoDataset(np.zeros(5), np.zeros(4))


def test_noise_free_output_equals_clean_output():
    data, truth = generate_synthetic(SyntheticSpec(N=500, rng_seed=1))
    np.testing.assert_array_equal(data.y, truth.y0)


def test_noise_is_zero_mean():
    N, sigma = 20000, 0.1
    data, truth = generate_synthetic(SyntheticSpec(N=N, noise_std=sigma, rng_seed=4))
    v = data.y - truth.y0
    assert abs(v.mean()) < 3 * sigma / np.sqrt(N)
    assert abs(v.std() / sigma - 1) < 0.05


def test_planted_truth_is_consistent():
    for seed in range(3):
        data, truth = generate_synthetic(SyntheticSpec(N=800, rng_seed=seed, n_x=3))
        sim = simulate(truth.model, data.u)
        np.testing.assert_allclose(sim.y, truth.y0, rtol=0, atol=1e-10)
        np.testing.assert_allclose(sim.w, truth.w, atol=1e-10)
        assert np.max(np.abs(np.linalg.eigvals(truth.model.lti.A))) < 0.97


def test_planted_zero_net_is_linear():
    spec = SyntheticSpec(N=400, rng_seed=2, planted={"amplitude": [0.0, 0.0],
                                                     "nonlinear_ratio": [0.0, 1.0]})
    data, truth = generate_synthetic(spec)
    _, y_lin = simulate_lti(truth.model.lti.linear_part(), data.u)
    np.testing.assert_allclose(truth.y0, y_lin, rtol=0, atol=1e-12)


def test_planted_options_validated():
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticSpec(N=100, planted={"poles": 0.9}))


def test_synthetic_is_seeded():
    a, _ = generate_synthetic(SyntheticSpec(N=300, rng_seed=9, excitation="multisine"))
    b, _ = generate_synthetic(SyntheticSpec(N=300, rng_seed=9, excitation="multisine"))
    np.testing.assert_array_equal(a.u, b.u)
    np.testing.assert_array_equal(a.y, b.y)


def test_duffing_without_cubic_term_is_the_sampled_linear_system():
    data, truth = generate_synthetic(SyntheticSpec(system="duffing_cubic", N=2000,
                                                   duffing={"alpha": 0.0}, rng_seed=3))
    p = DUFFING_DEFAULTS
    w, z, fs = p["omega"], p["zeta"], p["sample_rate"]
    # exact zero-order-hold discretization via the augmented matrix exponential
    M = np.zeros((3, 3))
    M[:2, :2] = [[0.0, 1.0], [-w * w, -2 * z * w]]
    M[1, 2] = w * w
    E = expm(M / fs)
    s, y = np.zeros(2), []
    for un in data.u[:, 0]:
        y.append(s[0])
        s = E[:2, :2] @ s + E[:2, 2] * un
    y = np.array(y)
    assert np.max(np.abs(truth.y0[:, 0] - y)) < 1e-8 * np.max(np.abs(y))
    assert truth.ode["alpha"] == 0.0


def test_duffing_integrator_matches_reference_step():
    states = simulate_duffing([0.5, -0.2], 610.0, 300.0, 0.05, 1e4, 9e4, 3)
    s = np.zeros(2)
    for un in (0.5, -0.2):
        for _ in range(3):
            s = duffing_rk4_step(s, un, 1 / 1830, 300.0, 0.05, 1e4, 9e4)
    np.testing.assert_allclose(states[-1], s, rtol=1e-14)


def test_duffing_cubic_share_sets_alpha():
    _, truth = generate_synthetic(SyntheticSpec(system="duffing_cubic", N=1000, rng_seed=0))
    assert truth.ode["alpha"] > 0
    np.testing.assert_allclose(truth.w, -truth.ode["alpha"] * truth.z ** 3)


def test_spec_json(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"N": 123, "noise_std": 0.1}))
    assert SyntheticSpec.from_json(tmp_path / "s.json").N == 123
    (tmp_path / "bad.json").write_text(json.dumps({"N": 10, "colour": "red"}))
    with pytest.raises(ConfigError):
        SyntheticSpec.from_json(tmp_path / "bad.json")
    with pytest.raises(ConfigError):
        SyntheticSpec(noise_std=-1.0)


def _impulse(m, lags):
    imp = np.zeros(lags)
    imp[0] = 1.0
    return simulate_lti(m, imp)[1].ravel()


def test_linear_init_recovers_a_linear_system(rng):
    truth = LtiSubmodel(A=[[0.6, 0.5], [-0.5, 0.6]], B_u=[[1.0], [0.0]], C_y=[[0.7, 0.2]],
                        D_yu=[[0.1]])
    u = rng.standard_normal(2000)
    _, y = simulate_lti(truth, u)
    est = fit_linear_init(IoDataset(u, y), 2)
    np.testing.assert_allclose(_impulse(est, 50), _impulse(truth, 50), rtol=0, atol=1e-6)
    assert est.n_w == 0


def test_linear_init_on_white_noise(rng):
    N = 5000
    est = fit_linear_init(IoDataset(rng.standard_normal(N), rng.standard_normal(N)), 2)
    h = _impulse(est, 30)
    assert np.all(np.abs(h[1:]) < 3 / np.sqrt(N))


def test_linear_init_errors(rng):
    ds = IoDataset(rng.standard_normal(500), rng.standard_normal(500))
    with pytest.raises(ConfigError):
        fit_linear_init(ds, 0)
    with pytest.raises(ExcitationError):
        fit_linear_init(IoDataset(np.ones(500), rng.standard_normal(500)), 2)
    with pytest.raises(ExcitationError):
        fit_linear_init(IoDataset(rng.standard_normal(20), rng.standard_normal(20)), 3)


def test_linear_init_projects_unstable_fits(rng):
    u = rng.standard_normal(400)
    y = np.cumsum(u) * 1.01 ** np.arange(400)
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        est, info = fit_linear_init(IoDataset(u, y), 2, return_info=True)
    assert np.max(np.abs(np.linalg.eigvals(est.A))) < 1.0
