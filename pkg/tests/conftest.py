import _util


def pytest_terminal_summary(terminalreporter):
    if _util.ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_util.ACCEPTANCE, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
