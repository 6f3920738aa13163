import runs


def pytest_terminal_summary(terminalreporter):
    if not runs.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(runs.VERDICTS):
        terminalreporter.write_line(line)
