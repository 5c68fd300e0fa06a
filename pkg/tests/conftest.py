import sys

import numpy as np
import pytest

from streamcausal.model import DataBatch


def random_batch(rng, n, p, binary=False, batch_index=1, alpha=None):
    x = np.hstack([np.ones((n, 1)), rng.normal(size=(n, p - 1))])
    if alpha is None:
        a = rng.integers(0, 2, n)
        if a.min() == a.max():
            a[0] = 1 - a[0]
    else:
        a = (rng.random(n) < 1 / (1 + np.exp(-x @ alpha))).astype(float)
    y = rng.integers(0, 2, n).astype(float) if binary else rng.normal(size=n)
    return DataBatch(batch_index, y, a, x)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def four_obs():
    """(y, a) = (1,1), (3,1), (0,0), (2,0) with an intercept-only covariate."""
    return DataBatch(1, [1.0, 3.0, 0.0, 2.0], [1, 1, 0, 0], np.ones((4, 1)))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(results):
        passed, detail = results[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
