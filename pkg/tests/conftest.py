import numpy as np
import pytest

from ssvos.params import ModelConfig, as_tensors, init_params


@pytest.fixture(scope="session")
def model_cfg():
    return ModelConfig()


@pytest.fixture(scope="session")
def params(model_cfg):
    """Random weights with every head live (no zero initialisation)."""
    return init_params(model_cfg, seed=7, zero_heads=False)


@pytest.fixture(scope="session")
def P(params):
    return as_tensors(params)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
