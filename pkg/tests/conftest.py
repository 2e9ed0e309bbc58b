import pytest

CRITERIA = {
    1: "distribution constants",
    2: "sampling consistency",
    3: "gradient suite",
    4: "model-level staircase",
    5: "module-level selection",
    6: "oracle equivalence",
    7: "robustness to an extreme model",
    8: "weights untouched by training",
    9: "selection identity",
}

_results: dict = {}


@pytest.fixture
def record():
    """``record(n, ok, detail)`` stores one acceptance outcome for the summary."""

    def _record(n, ok, detail=""):
        _results[n] = (bool(ok), detail)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n in _results:
            ok, detail = _results[n]
            line = f"criterion {n} ({name}): {'PASS' if ok else 'FAIL'}"
        else:
            line, detail = f"criterion {n} ({name}): NOT RUN", ""
        terminalreporter.write_line(f"{line}  {detail}".rstrip())
