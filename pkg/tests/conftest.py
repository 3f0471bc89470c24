import pytest

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def record(n: int, passed: bool | None, detail: str) -> None:
    status = "N/A " if passed is None else ("PASS" if passed else "FAIL")
    ACCEPTANCE[n] = (status, detail)
    print(f"criterion {n}: {status} {detail}")


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {status} {detail}")
