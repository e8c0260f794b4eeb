# criterion number -> list of (check, ok, detail), filled by test_acceptance
VERDICTS: dict[int, list[tuple[str, bool, str]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(VERDICTS):
        checks = VERDICTS[n]
        ok = all(c[1] for c in checks)
        tr.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}")
        for name, passed, detail in checks:
            tr.write_line(f"    {'ok  ' if passed else 'FAIL'} {name}: {detail}")
