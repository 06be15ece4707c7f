import json
import os
from pathlib import Path

import numpy as np
import pytest

from privrelease.core import Dataset, RandomStream
from privrelease.harness import make_blobs

HERE = Path(__file__).parent


@pytest.fixture(scope="session")
def oracle():
    return json.loads((HERE / "oracle_values.json").read_text())


@pytest.fixture(scope="session")
def blobs():
    """The two-blob set: 50 points around (0, 0) labelled -1, 50 around (0, 5) labelled +1."""
    return make_blobs([[0.0, 0.0], [0.0, 5.0]], [50, 50], RandomStream(11))


@pytest.fixture
def two_point():
    return Dataset([[-1.0], [1.0]], [-1.0, 1.0])


def random_svm_instance(seed):
    """Must match tests/make_oracles.py:random_instance."""
    rng = np.random.default_rng(seed)
    q, p = int(rng.integers(2, 21)), int(rng.integers(1, 6))
    X = rng.normal(size=(q, p))
    y = np.where(rng.random(q) < 0.5, -1.0, 1.0)
    y[0], y[1] = 1.0, -1.0
    return Dataset(X, y)


def wdbc_path():
    """Path to a user-supplied WDBC CSV (header row, label column 'diagnosis'), or None."""
    p = os.environ.get("PRIVRELEASE_WDBC_CSV")
    return Path(p) if p and Path(p).exists() else None


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
