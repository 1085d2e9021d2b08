import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def corpus() -> list[dict]:
    return json.loads((FIXTURES / "corpus.json").read_text())


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.skipped):
        return
    crit = getattr(report, "criterion", None)
    for name, value in report.user_properties:
        if name == "criterion":
            crit = value
    if crit is None:
        return
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    ACCEPTANCE[crit[0]] = f"criterion {crit[0]:>2}: {status}  {crit[1]}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
