import numpy as np
import pytest

from sigmanet.autodiff.tensor import get_default_dtype, set_default_dtype


@pytest.fixture(autouse=True)
def _restore_dtype():
    before = get_default_dtype()
    yield
    set_default_dtype(before)


@pytest.fixture
def f64():
    set_default_dtype("float64")
    yield np.float64


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion(capsys):
    """Record (and print) one pass/fail line for an acceptance criterion."""

    def report(number: int, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        _CRITERIA[number] = line
        with capsys.disabled():
            print(f"\n{line}")

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
