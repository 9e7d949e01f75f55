import numpy as np
import pytest

from ffnsplit.model import ModelConfig, init_model
from ffnsplit.tensor import precision

# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


TINY = ModelConfig(vocab_size=11, d_model=8, d_hidden=16, n_heads=2, n_layers=2, seq_len=6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model64():
    with precision(np.float64):
        yield init_model(TINY, seed=3)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield
