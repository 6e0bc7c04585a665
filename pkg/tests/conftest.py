"""Shared test plumbing: acceptance criteria summary lines."""

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, description: str, passed: bool) -> None:
    status = "PASS" if passed else "FAIL"
    # first outcome wins so a later rerun cannot mask a failure
    ACCEPTANCE_LINES.setdefault(number, f"[{status}] criterion {number}: {description}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
