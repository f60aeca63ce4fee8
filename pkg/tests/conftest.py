"""Shared pytest plumbing for the acceptance suite.

The acceptance tests report one [PASS]/[FAIL] line per numbered criterion.
pytest's default fd-level capture would swallow those lines for passing
tests, so they are collected here and replayed in the terminal summary,
which writes to the real terminal.
"""

CRITERION_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)
