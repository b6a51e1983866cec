import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_psd(rng, n, rank=None):
    a = rng.standard_normal((n, rank or n))
    return a @ a.T / (rank or n)


def rel_fro(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def fd_max_rel_error(loss_fn, params, grads, step=1e-5, coords=6, rng=None):
    """Worst relative error of ``grads`` against central differences on sampled coordinates."""
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, g in zip(params, grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for k in rng.choice(flat.size, size=min(coords, flat.size), replace=False):
            old = flat[k]
            flat[k] = old + step
            up = loss_fn()
            flat[k] = old - step
            down = loss_fn()
            flat[k] = old
            num = (up - down) / (2 * step)
            err = abs(num - gflat[k]) / max(abs(num), abs(gflat[k]), 1e-6)
            worst = max(worst, err)
    return worst


def saddle_objective(kx, kz, y, lam, nu, gamma, beta):
    """Finite-sample game value with f = Kx gamma and g = Kz beta, plus both gradients."""
    n = len(y)
    u = kx @ gamma - y
    g = kz @ beta
    val = 2 / n * u @ g - g @ g / n - nu * beta @ g + lam * gamma @ kx @ gamma
    d_gamma = 2 / n * kx @ g + 2 * lam * kx @ gamma
    d_beta = 2 / n * kz @ u - 2 / n * kz @ g - 2 * nu * g
    return val, d_gamma, d_beta


def brute_force_saddle(kx, kz, y, lam, nu):
    """Minimize over gamma the numerically maximized inner game (nested BFGS)."""
    from scipy.optimize import minimize

    n = len(y)
    state = {"beta": np.zeros(n)}

    def inner(gamma):
        def neg(beta):
            v, _, db = saddle_objective(kx, kz, y, lam, nu, gamma, beta)
            return -v, -db
        res = minimize(neg, state["beta"], jac=True, method="BFGS", options={"gtol": 1e-13, "maxiter": 10_000})
        state["beta"] = res.x
        return res.x

    def outer(gamma):
        beta = inner(gamma)
        v, dg, _ = saddle_objective(kx, kz, y, lam, nu, gamma, beta)
        return v, dg

    res = minimize(outer, np.zeros(n), jac=True, method="BFGS", options={"gtol": 1e-12, "maxiter": 10_000})
    return res.x, inner(res.x)


def random_instance(seed, n=None):
    r = np.random.default_rng(seed)
    n = n or int(r.integers(1, 9))
    a = r.standard_normal((n, n))
    b = r.standard_normal((n, n))
    kx = a @ a.T / n + 0.5 * np.eye(n)
    kz = b @ b.T / n + 0.5 * np.eye(n)
    y = r.standard_normal(n)
    lam, nu = r.uniform(0.1, 2.0), r.uniform(0.1, 2.0)
    return kx, kz, y, lam, nu


ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
