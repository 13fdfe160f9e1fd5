import numpy as np
import pytest

from harmony.indicators import IndicatorPanel
from harmony.training import TrainConfig, init_params


def make_panel(values, roles=None, levels=None, start=0, stride=600, names=None):
    values = np.asarray(values, dtype=float)
    n, t = values.shape
    roles = roles or ["request"] * n
    levels = levels or [1] * n
    names = names or [f"x{i}" for i in range(n)]
    return IndicatorPanel(values, names, roles, levels, start + stride * np.arange(t, dtype=np.int64))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_model():
    """Random parameters (non-identity flows) for N=3, F=2, T_in=8, D=8."""
    config = TrainConfig(d_model=8, n_blocks=2, n_flows=2, seed=7, variance_bias=0.0)
    params = init_params(3, 2, 8, config)
    rng = np.random.default_rng(99)
    for name in params:
        params[name] = params[name] + 0.2 * rng.standard_normal(params[name].shape)
    return params, np.array([1, 2, 3]), config


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
