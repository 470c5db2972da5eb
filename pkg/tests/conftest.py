import test_acceptance


def pytest_terminal_summary(terminalreporter):
    if test_acceptance.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
