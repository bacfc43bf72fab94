import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# Filled by test_acceptance.py; one (criterion, passed, detail) per check.
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid, ok, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: (int(r[0].split(".")[0]), r[0])):
        status = {True: "PASS", False: "FAIL", None: "NOT RUN"}[ok]
        terminalreporter.write_line(f"criterion {cid:<5} {status:<8} {detail}")
