import re

_CRITERION_RE = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Print one pass/fail line per acceptance criterion."""
    outcomes: dict[int, tuple[str, str]] = {}
    for status, label in (("passed", "PASS"), ("failed", "FAIL"), ("error", "FAIL")):
        for report in terminalreporter.stats.get(status, []):
            match = _CRITERION_RE.search(report.nodeid)
            if match:
                number = int(match.group(1))
                current = outcomes.get(number)
                if current is None or label == "FAIL":
                    outcomes[number] = (label, match.group(2))
    if not outcomes:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for number in sorted(outcomes):
        label, name = outcomes[number]
        terminalreporter.write_line(f"criterion {number}: {label} — {name.replace('_', ' ')}")
