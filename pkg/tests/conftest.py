import numpy as np
import pytest

from enko.distributions import Rng
from enko.models import LinearGaussianSSM


def scalar_lgssm(**over):
    """d_z = d_x = 1 LGSSM with moderate scales."""
    values = dict(mu_q1=[0.1], sigma_q1=0.8, A_q=[[0.7]], sigma_q=0.6,
                  mu_f1=[0.0], sigma_f1=1.0, A_f=[[0.8]], sigma_f=0.5,
                  A_g=[[1.2]], sigma_g=0.7)
    values.update(over)
    return LinearGaussianSSM.from_values(1, 1, **values)


def random_lgssm(d_z, d_x, seed, sigma=1.0):
    """Stable random LGSSM whose proposal shares the transition mean map."""
    g = np.random.default_rng(seed)
    A = 0.5 * np.eye(d_z) + g.uniform(-0.2, 0.2, (d_z, d_z))
    A_g = np.eye(d_x, d_z) + g.uniform(-0.3, 0.3, (d_x, d_z))
    return LinearGaussianSSM.from_values(
        d_z, d_x, mu_q1=np.zeros(d_z), sigma_q1=sigma, A_q=A, sigma_q=sigma,
        mu_f1=np.zeros(d_z), sigma_f1=sigma, A_f=A, sigma_f=sigma, A_g=A_g, sigma_g=sigma)


@pytest.fixture
def tiny_lgssm():
    return scalar_lgssm()


@pytest.fixture
def rng():
    return Rng(1234)


ACCEPTANCE_LINES: list[str] = []


def report(criterion: str, passed: bool, detail: str) -> bool:
    """Record and print one acceptance verdict line."""
    line = f"[{criterion}] {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
