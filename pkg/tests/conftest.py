import math

import numpy as np
import pytest

ACCEPTANCE = {}


def scalar_cosine(x, y):
    """Plain-loop cosine similarity following the fixed summation order."""
    dot = sxx = syy = 0.0
    for a, b in zip(map(float, x), map(float, y)):
        dot += a * b
        sxx += a * a
        syy += b * b
    return min(1.0, max(-1.0, dot / math.sqrt(sxx * syy)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def acceptance():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
