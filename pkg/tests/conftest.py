"""Shared pytest hooks: the acceptance suite reports one verdict line per criterion."""

VERDICTS = []


def record_verdict(number, title, passed, detail):
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    VERDICTS.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(VERDICTS):
        terminalreporter.write_line(line)
