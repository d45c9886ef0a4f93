from tests import helpers


def pytest_terminal_summary(terminalreporter):
    if helpers.ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(helpers.ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
