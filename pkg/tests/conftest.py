import re

import pytest

# criterion number -> (passed, detail); filled by the acceptance tests
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    def _record(criterion: int, passed: bool, detail: str = "") -> None:
        ACCEPTANCE[criterion] = (bool(passed), detail)

    return _record


def pytest_runtest_makereport(item, call):
    match = re.search(r"test_criterion_(\d+)", item.name)
    if match and call.when == "call" and call.excinfo is not None:
        n = int(match.group(1))
        detail = ACCEPTANCE.get(n, (False, ""))[1]
        ACCEPTANCE[n] = (False, detail or call.excinfo.typename)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip())
