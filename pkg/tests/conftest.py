import numpy as np
import pytest

from p2cad import fixtures
from p2cad.trainer import DatasetSpec, random_sequence


@pytest.fixture
def cube_seq():
    return fixtures.cube()


@pytest.fixture
def cut_seq():
    return fixtures.cut_block()


@pytest.fixture
def cylinder_seq():
    return fixtures.cylinder()


@pytest.fixture(scope="session")
def random_sequences():
    """1000 grammar-valid sequences from the synthetic generator."""
    rng = np.random.default_rng(1234)
    spec = DatasetSpec()
    return [random_sequence(rng, spec) for _ in range(1000)]


# ---------------------------------------------------------------- acceptance report

_CRITERIA = []


@pytest.fixture
def criterion():
    """``record(number, ok, detail)``: one line per acceptance criterion."""
    def record(number, ok, detail):
        status = "N/A" if ok is None else ("PASS" if ok else "FAIL")
        _CRITERIA.append((number, status, detail))
        print(f"criterion {number}: {status} {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, detail in sorted(_CRITERIA, key=lambda r: str(r[0])):
        terminalreporter.write_line(f"[{status}] {number}: {detail}")
