import math

import numpy as np
import pytest

from latentgeo.iwae import IwaeModel, Likelihood
from latentgeo.numerics import Mlp


def softplus_inv(y: float) -> float:
    return math.log(math.expm1(y))


def conjugate_model(a=1.5, c=0.2, var=0.5, q_shift=0.05, q_scale=1.15):
    """1-d linear-Gaussian model x = a z + c + noise with an imperfect Gaussian proposal.

    Returns ``(model, log_marginal)`` where ``log_marginal(x)`` is exact.
    """
    prec = 1.0 + a * a / var
    post_sd = math.sqrt(1.0 / prec)
    gain = a / var / prec
    encoder = Mlp([np.eye(1)], [np.zeros(1)], ["linear"])
    mean_head = Mlp([np.array([[gain]])], [np.array([-gain * c + q_shift])], ["linear"])
    std_head = Mlp([np.zeros((1, 1))], [np.array([softplus_inv(q_scale * post_sd)])], ["softplus"])
    decoder = Mlp([np.array([[a]])], [np.array([c])], ["linear"])
    model = IwaeModel(encoder, mean_head, std_head, decoder, Likelihood.GAUSSIAN, math.log(var))

    def log_marginal(x):
        v = a * a + var
        return -0.5 * (math.log(2 * math.pi * v) + (x - c) ** 2 / v)

    return model, log_marginal


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    """Note an acceptance outcome; printed in the terminal summary."""
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} - {detail}")


@pytest.fixture
def linear_decoder():
    W = np.array([[2.0, 0.0], [0.0, 3.0], [0.0, 0.0]])
    return Mlp([W], [np.zeros(3)], ["linear"]), W
