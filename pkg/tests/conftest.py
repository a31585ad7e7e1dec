import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ---------------------------------------------------------------

_acceptance = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and report.when == "call":
        props = dict(report.user_properties)
        if "criterion" in props:
            _acceptance.append((props["criterion"], report.passed, props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in sorted(_acceptance):
        terminalreporter.write_line(f"{name}: {'PASS' if passed else 'FAIL'}  {detail}")
