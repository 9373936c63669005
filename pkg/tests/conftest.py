import pytest

_criterion_lines = []


@pytest.fixture
def record_criterion():
    """Collect one pass/fail line per acceptance criterion; printed in the
    terminal summary so the lines survive output capture."""
    def record(number, description, passed, detail=""):
        status = "PASS" if passed else "FAIL"
        line = f"criterion {number:2d} {status}: {description}"
        if detail:
            line += f" [{detail}]"
        _criterion_lines.append((number, line))
        assert passed, line
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_criterion_lines):
            terminalreporter.write_line(line)
