import pytest

_CRITERIA = []


class Criteria:
    """Collects one verdict per acceptance criterion for the summary block."""

    def check(self, name: str, ok: bool, detail: str = "") -> None:
        _CRITERIA.append((name, bool(ok), detail))
        assert ok, f"{name}: {detail}"


@pytest.fixture(scope="session")
def criteria():
    return Criteria()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
