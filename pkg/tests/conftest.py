import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# measured quantities the acceptance suite reports after the pass/fail lines
MEASURED = {}


def pytest_terminal_summary(terminalreporter):
    if not MEASURED:
        return
    terminalreporter.section("acceptance measurements")
    for key in sorted(MEASURED):
        terminalreporter.write_line(f"{key}: {MEASURED[key]}")
