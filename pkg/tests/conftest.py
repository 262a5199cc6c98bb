import time

SUITE_BUDGET_SECONDS = 120.0

# filled by test_acceptance.py: list of (criterion, passed, detail)
ACCEPTANCE_LINES = []


def pytest_sessionstart(session):
    session.config._connshrink_t0 = time.perf_counter()


def _full_run(config):
    return not config.args or any(a.rstrip("/").endswith(("tests", "pkg", ".")) for a in config.args)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    elapsed = time.perf_counter() - config._connshrink_t0
    lines = list(ACCEPTANCE_LINES)
    if lines and _full_run(config):
        ok = elapsed < SUITE_BUDGET_SECONDS
        lines.append(("8b", ok, f"full suite wall time {elapsed:.1f}s (budget {SUITE_BUDGET_SECONDS:.0f}s)"))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in sorted(lines, key=lambda x: str(x[0])):
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'} - {detail}")


def pytest_sessionfinish(session, exitstatus):
    elapsed = time.perf_counter() - session.config._connshrink_t0
    over = elapsed >= SUITE_BUDGET_SECONDS
    if ACCEPTANCE_LINES and _full_run(session.config) and over and session.exitstatus == 0:
        session.exitstatus = 1
