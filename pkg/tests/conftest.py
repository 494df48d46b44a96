from __future__ import annotations

import numpy as np
import pytest

from conformal_newsvendor.core import Dataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_dataset(X, y):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return Dataset(X, np.asarray(y, dtype=float))


_ACCEPTANCE = []


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line, then assert the outcome.

    ``ok=None`` records a SKIP line and skips the test.
    """

    def record(number, ok, detail):
        tag = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"criterion {number:>2}: {tag}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        if ok is None:
            pytest.skip(detail)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
