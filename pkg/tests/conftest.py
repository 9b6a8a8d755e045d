import os
import sys

import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=200, deadline=None)
settings.load_profile("default")

_acceptance: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _acceptance[name] = outcome


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance.items():
        terminalreporter.write_line(f"{outcome:<5} {name}")


@pytest.fixture(scope="session")
def coco_val_path():
    """Path to instances_val2017.json, from FCOS_COCO_VAL2017."""
    return os.environ.get("FCOS_COCO_VAL2017", "")


@pytest.fixture(scope="session")
def crowdhuman_path():
    """Path to a CrowdHuman annotation_val.odgt, from FCOS_CROWDHUMAN_ODGT."""
    return os.environ.get("FCOS_CROWDHUMAN_ODGT", "")
