"""Shared pytest plumbing.

The acceptance tests register one result line per criterion; the hook below
replays them in the terminal summary so they are visible even when pytest
captures per-test output (plain ``pytest -v``).
"""

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
