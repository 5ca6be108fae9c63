import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from multigoal import AreaLevelDataset  # noqa: E402


def random_dataset(seed, m=12, p=2, A=1.0, d_lo=0.5, d_hi=4.0):
    g = np.random.default_rng(seed)
    X = np.column_stack([np.ones(m), g.normal(size=(m, p - 1))]) if p > 1 else np.ones((m, 1))
    D = g.uniform(d_lo, d_hi, m)
    y = X @ g.normal(size=p) + g.normal(scale=np.sqrt(A + D))
    return AreaLevelDataset(y, D, X)


def balanced_dataset(seed, m=20, D=1.0, A=1.0):
    g = np.random.default_rng(seed)
    y = g.normal(scale=np.sqrt(A + D), size=m)
    return AreaLevelDataset(y, np.full(m, D), np.ones(m))


@pytest.fixture
def small_unbalanced():
    return AreaLevelDataset([0.0, 1.0, 2.0, 0.5, -1.0], [1.0, 2.0, 4.0, 0.5, 3.0], np.ones(5))


@pytest.fixture
def rand_data():
    return random_dataset(0)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or rep.when not in ("call", "setup"):
                continue
            name = nodeid.split("::")[-1]
            lines[name] = "PASS" if outcome == "passed" else "FAIL"
    if lines:
        terminalreporter.section("acceptance criteria")
        for name in sorted(lines):
            terminalreporter.write_line(f"{lines[name]}  {name[len('test_'):]}")
