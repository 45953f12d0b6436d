import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("default")


def random_pd(rng, p, scale=1.0, ridge=0.5):
    """Random symmetric positive definite matrix with eigenvalues >= ridge."""
    A = rng.standard_normal((p, p)) * scale
    return A @ A.T / p + ridge * np.eye(p)


def random_instance(rng, n, p, G, spread=1.0):
    """Small dataset plus a valid parameter set and variational state."""
    from mplnet.pln import CountDataset, MixtureParams
    from mplnet.variational import VariationalState

    counts = rng.poisson(3.0, size=(n, p))
    scaling = np.exp(0.3 * rng.standard_normal(n))
    data = CountDataset(counts=counts, scaling=scaling)
    pi = rng.dirichlet(np.ones(G) * 3)
    means = rng.normal(1.0, spread, size=(G, p))
    precisions = np.stack([random_pd(rng, p) for _ in range(G)])
    params = MixtureParams(pi, means, precisions)
    P = rng.dirichlet(np.ones(G), size=n)
    M = np.log(counts + 1.0)[None] + 0.3 * rng.standard_normal((G, n, p))
    S = rng.uniform(0.1, 1.5, size=(G, n, p))
    return data, params, VariationalState(M, S, P)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def record_criterion(number, name, ok, detail):
    """Log one acceptance criterion outcome; printed again in the terminal summary."""
    line = f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
