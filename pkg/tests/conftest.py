"""Shared test plumbing: the acceptance-criteria result board."""

CRITERION_RESULTS: dict[int, tuple[str, bool, str]] = {}


def record_criterion(num: int, desc: str, passed: bool, detail: str = "") -> None:
    CRITERION_RESULTS[num] = (desc, passed, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERION_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(CRITERION_RESULTS):
        desc, passed, detail = CRITERION_RESULTS[num]
        tag = "PASS" if passed else "FAIL"
        line = f"[{tag}] criterion {num:2d}: {desc}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
