import re

import acceptance_log


def pytest_terminal_summary(terminalreporter):
    outcomes = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d)", getattr(rep, "nodeid", ""))
            if m and rep.when == "call" or (m and key == "error"):
                outcomes[int(m.group(1))] = key == "passed"
    if outcomes:
        terminalreporter.section("acceptance criteria")
        for n in sorted(outcomes):
            terminalreporter.write_line(acceptance_log.format_line(n, outcomes[n]))
