# criterion id -> (passed, detail); filled by test_acceptance, printed at the end
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def _order(key: str):
    num = "".join(ch for ch in key if ch.isdigit())
    return int(num), key


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=_order):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:<3s} {'PASS' if ok else 'FAIL'}  {detail}")
