import re

import pytest

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
_CRITERION = re.compile(r"test_criterion_(\d+)_")


@pytest.fixture
def record():
    def _record(number: int, passed: bool, detail: str = "") -> bool:
        # parametrized criteria report once per case; merge them
        if number in ACCEPTANCE:
            before, text = ACCEPTANCE[number]
            ACCEPTANCE[number] = (before and bool(passed), f"{text}; {detail}")
        else:
            ACCEPTANCE[number] = (bool(passed), detail)
        return bool(passed)
    return _record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = _CRITERION.search(item.name)
    if m is None or not report.failed or int(m.group(1)) in ACCEPTANCE:
        return
    # failed before it could record a measurement
    lines = str(call.excinfo.value).splitlines() if call.excinfo else []
    kind = call.excinfo.typename if call.excinfo else "error"
    ACCEPTANCE[int(m.group(1))] = (False, f"{kind}: {lines[0][:120] if lines else ''}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}"
                                    f"  {detail}")
