import pytest

# criterion number -> (title, status, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@pytest.fixture
def criterion():
    def record(number: int, title: str, passed: bool | None, detail: str = ""):
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        ACCEPTANCE[number] = (title, status, detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} [{status}] {title}" + (f" :: {detail}" if detail else ""))
