import contextlib

RESULTS: list[tuple[str, bool, str]] = []


@contextlib.contextmanager
def criterion(name: str):
    """Record one acceptance criterion; ``detail`` may be filled in by the body."""
    info = {"detail": ""}
    try:
        yield info
    except BaseException:
        RESULTS.append((name, False, info["detail"]))
        raise
    RESULTS.append((name, True, info["detail"]))


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else ""))
