import re


def pytest_terminal_summary(terminalreporter):
    rows = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", getattr(rep, "nodeid", ""))
            if m and rep.when == "call":
                measured = dict(rep.user_properties).get("measured", "")
                rows.append((int(m.group(1)), m.group(2), "PASS" if outcome == "passed" else "FAIL", measured))
    if rows:
        terminalreporter.section("acceptance criteria")
        for n, name, verdict, measured in sorted(rows):
            terminalreporter.write_line(f"criterion {n:2d} {name:<28s} {verdict}  {measured}")
