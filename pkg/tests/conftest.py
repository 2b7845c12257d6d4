import pytest

# Acceptance verdicts, one per criterion, printed in the terminal summary.
VERDICTS: dict[int, tuple[bool, str, str]] = {}


def record(number: int, title: str, ok: bool, detail: str = "") -> None:
    VERDICTS[number] = (bool(ok), title, detail)
    print(f"[acceptance {number}] {'PASS' if ok else 'FAIL'} {title}: {detail}")


@pytest.fixture
def verdict():
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        ok, title, detail = VERDICTS[number]
        terminalreporter.write_line(f"{number}. {'PASS' if ok else 'FAIL'} {title}: {detail}")
