import pytest

_RESULTS: dict[str, tuple[bool, str]] = {}


class AcceptanceRecorder:
    def __call__(self, criterion: str, passed: bool, detail: str = "") -> bool:
        _RESULTS[criterion] = (bool(passed), detail)
        print(f"{criterion} {'PASS' if passed else 'FAIL'} {detail}")
        return bool(passed)


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceRecorder()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_RESULTS, key=lambda k: int(k.split("-")[1])):
        passed, detail = _RESULTS[key]
        terminalreporter.write_line(f"{key}: {'PASS' if passed else 'FAIL'}  {detail}")
