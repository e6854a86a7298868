import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_LINES: dict[str, str] = {}


def record_acceptance(key: str, name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[key] = f"{key} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    print(ACCEPTANCE_LINES[key])


@pytest.fixture(scope="session")
def bench(tmp_path_factory):
    """Training cache shared by every acceptance check.

    MMCOLLAPSE_TEST_CACHE points it at a persistent directory; entries are
    keyed by code version, so stale runs are never reused.
    """
    from mmcollapse.harness import Workbench
    cache = os.environ.get("MMCOLLAPSE_TEST_CACHE") or tmp_path_factory.mktemp("runs")
    return Workbench(cache)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
