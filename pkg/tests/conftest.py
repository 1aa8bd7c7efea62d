import numpy as np
import pytest

from dmm.networks import Dims, build_model

TINY = Dims(H=6, W=6, L=5, m=4, N=4, encoder_hidden=(7, 6), generator_hidden=(6, 7))


def tiny_model(seed=0, dtype=np.float64, **kw):
    return build_model(TINY, seed=seed, **kw).astype(dtype)


def tiny_batch(seed=0, batch=3):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (batch, TINY.H, TINY.W))
    y = (rng.random((batch, TINY.H, TINY.W)) > 0.5).astype(np.float64)
    return x, y


@pytest.fixture
def tiny():
    return tiny_model()


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
