"""Collects one verdict line per acceptance criterion and prints them at the end."""

CRITERION_LINES = {}
CRITERION_NAMES = {
    1: "drift identity",
    2: "bracket formulas",
    3: "gradient identities",
    4: "heat kernel",
    5: "exact mean",
    6: "SHE solver",
    7: "step mass normalization",
    8: "convergence trend",
    9: "moment shapes",
    10: "martingale fields",
    11: "determinism",
}


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number:2d} [{CRITERION_NAMES[number]}]: {'PASS' if passed else 'FAIL'} | {detail}"
    CRITERION_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    ran = any("test_acceptance" in r.nodeid
              for reports in terminalreporter.stats.values() for r in reports if hasattr(r, "nodeid"))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERION_NAMES):
        terminalreporter.write_line(CRITERION_LINES.get(
            n, f"criterion {n:2d} [{CRITERION_NAMES[n]}]: FAIL | not evaluated (error before the verdict)"))
