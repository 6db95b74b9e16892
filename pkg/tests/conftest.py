import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

# acceptance criterion id -> (passed, detail), filled while tests run
CRITERIA: dict[str, tuple[bool, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.skipped:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        detail = dict(item.user_properties).get("detail", "")
        if rep.failed and not detail:
            detail = str(rep.longrepr).strip().splitlines()[-1]
        CRITERIA[str(marker.args[0])] = (rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    order = sorted(CRITERIA, key=lambda k: (int("".join(c for c in k if c.isdigit())), k))
    for key in order:
        passed, detail = CRITERIA[key]
        terminalreporter.write_line(f"criterion {key:<3} {'PASS' if passed else 'FAIL'}  {detail}")
