import pytest

_CRITERIA: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture
def criterion():
    """record(number, passed, detail) collects one acceptance verdict line."""

    def record(number: int, passed: bool, detail: str) -> bool:
        _CRITERIA.setdefault(number, []).append((bool(passed), detail))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        checks = _CRITERIA[number]
        verdict = "PASS" if all(ok for ok, _ in checks) else "FAIL"
        details = "; ".join(d for _, d in checks)
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {details}")
