import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from inception_mamba import tensor_core as tc  # noqa: E402
from inception_mamba.model import toy_config  # noqa: E402


@pytest.fixture(autouse=True)
def double_precision():
    tc.set_precision("float64")
    yield
    tc.set_precision("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy():
    return toy_config()


# --- acceptance verdicts --------------------------------------------------------------

VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"acceptance {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        VERDICTS[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[number])
