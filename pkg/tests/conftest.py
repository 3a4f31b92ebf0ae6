import numpy as np
import pytest

from coofdm_sco.ofdm import OfdmConfig


@pytest.fixture
def cfg():
    return OfdmConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def qpsk(rng, shape):
    return np.exp(1j * (np.pi / 4 + np.pi / 2 * rng.integers(0, 4, size=shape)))


def evm_db(received, reference):
    err = np.mean(np.abs(np.asarray(received) - np.asarray(reference)) ** 2)
    with np.errstate(divide="ignore"):
        return 10 * np.log10(err / np.mean(np.abs(reference) ** 2))


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
