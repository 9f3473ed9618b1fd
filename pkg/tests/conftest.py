import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from crowdsparse.data import ABSENT, Dataset  # noqa: E402
from crowdsparse.em import CrowdParams  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]


def random_dataset(rng, n, d, k, missing=0.0, labels=True):
    x = rng.normal(size=(n, k))
    z = rng.integers(0, 2, n)
    flip = rng.random((n, d)) < 0.3
    v = np.where(flip, 1 - z[:, None], z[:, None])
    if missing:
        drop = rng.random((n, d)) < missing
        drop[np.arange(n), rng.integers(0, d, n)] = False
        v = np.where(drop, ABSENT, v)
    return Dataset(x, v, z if labels else None)


def random_params(rng, d, k, scale=1.0):
    return CrowdParams(rng.normal(scale=scale, size=d), rng.normal(scale=scale, size=k),
                       rng.normal(scale=scale, size=k + 1))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def configs_dir():
    return ROOT / "configs"


_ACCEPTANCE: dict = {}


def record_acceptance(number: int, line: str):
    _ACCEPTANCE[number] = line


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
