import pytest

CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def criterion_report():
    """``report(n, title, ok, detail)`` records one PASS/FAIL line for acceptance criterion ``n``."""

    def report(n: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        CRITERIA[n] = line
        print(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
