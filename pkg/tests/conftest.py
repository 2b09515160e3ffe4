import contextlib

ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record a PASS/FAIL line for an acceptance criterion.

    The body may fill the yielded dict's ``"detail"`` key with measured values.
    """
    info = {"detail": ""}
    try:
        yield info
    except BaseException:
        ACCEPTANCE[number] = ("FAIL", title, info["detail"])
        raise
    ACCEPTANCE[number] = ("PASS", title, info["detail"])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[number]
        line = f"[{status}] criterion {number}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
