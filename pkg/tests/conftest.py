"""Shared test plumbing: a collector for headline check results.

The acceptance tests each record a single PASS/FAIL line; the collected
lines are echoed in the terminal summary so the verdicts stay visible even
when output capturing is on.
"""

_RESULTS = []


def record(name: str, ok: bool, detail: str = "") -> bool:
    line = f"{name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f" ({detail})"
    _RESULTS.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance checks")
        for line in _RESULTS:
            terminalreporter.write_line(line)
