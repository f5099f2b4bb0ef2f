import json
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from jumpfilter.config import load_model

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def frozen():
    return json.loads((Path(__file__).parent / "data" / "frozen_oracles.json").read_text())


@pytest.fixture(scope="session")
def desk_a():
    return load_model("desk_a")


@pytest.fixture(scope="session")
def desk_b():
    return load_model("desk_b")


@pytest.fixture(scope="session")
def desk_a_marks():
    return load_model("desk_a_marks")


@pytest.fixture(scope="session")
def uninformative():
    return load_model("uninformative")


ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record a pass/fail line for an acceptance criterion."""
    def record(number, ok, detail):
        ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
