import os
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
ML100K_ENV = "COLDSTART_ML100K"

# acceptance verdicts, printed in the terminal summary
VERDICTS = {}


def ml100k_path():
    return Path(os.environ.get(ML100K_ENV, ROOT / "data" / "ml-100k" / "u.data"))


@pytest.fixture(scope="session")
def ml100k():
    from coldstart.dataio import load_dataset, ml100k as descriptor

    path = ml100k_path()
    if not path.is_file():
        pytest.skip(f"ML-100K not found at {path}; set {ML100K_ENV}")
    return load_dataset(descriptor(path))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, d, cond=10.0):
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    eig = np.geomspace(1.0, cond, d)
    return (Q * eig) @ Q.T


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
