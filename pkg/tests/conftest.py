"""Shared pytest hooks: the acceptance suite's one-line-per-criterion summary."""

ACCEPTANCE: dict[int, str] = {}


def record(number: int, passed: bool | None, detail: str) -> None:
    """Store the verdict line for acceptance criterion ``number``.

    ``passed=None`` marks a soft criterion that produced a warning.
    """
    status = "PASS" if passed else ("WARN" if passed is None else "FAIL")
    ACCEPTANCE[number] = f"criterion {number:>2}: {status}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
