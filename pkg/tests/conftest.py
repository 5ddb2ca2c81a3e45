import numpy as np
import pytest

from nllfr.lti_core import LtiSubmodel
from nllfr.nllfr_model import NllfrModel
from nllfr.static_net import init_residual_map


def random_lti(rng, n_x=2, n_u=1, n_y=1, n_w=1, radius=0.9):
    """Random stable model; ``radius`` bounds the spectral radius of ``A``."""
    A = rng.standard_normal((n_x, n_x))
    A *= radius / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-12) * rng.uniform(0.5, 1.0)
    return LtiSubmodel(
        A=A,
        B_u=rng.standard_normal((n_x, n_u)),
        C_y=rng.standard_normal((n_y, n_x)),
        D_yu=rng.standard_normal((n_y, n_u)),
        B_w=rng.standard_normal((n_x, n_w)) if n_w else None,
        D_yw=rng.standard_normal((n_y, n_w)) if n_w else None,
    )


def random_model(rng, n_x=2, n_u=1, n_y=1, n_w=1, n_z=1, hidden=(4,), activation="tanh",
                 radius=0.8, coupling=0.3):
    lti = random_lti(rng, n_x, n_u, n_y, n_w, radius)
    lti = lti.with_coupling(coupling * lti.B_w, coupling * lti.D_yw)
    res = init_residual_map(n_x, n_u, n_z, n_w, hidden, activation, rng=rng)
    # non-zero biases so every parameter has a visible effect
    net = res.net.from_vector(res.net.to_vector() + 0.1 * rng.standard_normal(res.net.n_params))
    res = type(res)(res.C_z, res.D_zu, net)
    return NllfrModel(lti, res)


def central_difference(fun, p, h=1e-6):
    """Central-difference Jacobian of a vector function (or gradient of a scalar one)."""
    p = np.asarray(p, dtype=float)
    f0 = np.atleast_1d(fun(p))
    J = np.empty((f0.size, p.size))
    for j in range(p.size):
        e = np.zeros_like(p)
        e[j] = h
        J[:, j] = (np.atleast_1d(fun(p + e)) - np.atleast_1d(fun(p - e))) / (2 * h)
    return J if f0.size > 1 else J[0]


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance report ----------------------------------------------------------
ACCEPTANCE = []


def report_criterion(number, title, passed, detail):
    """Record one acceptance verdict; ``passed=None`` marks a skip."""
    verdict = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
    line = f"criterion {number} [{verdict}] {title}: {detail}"
    ACCEPTANCE.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
