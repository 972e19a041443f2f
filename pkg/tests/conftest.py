"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""
import pytest

_RESULTS: dict[str, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(cid): test belongs to acceptance criterion cid")


@pytest.fixture
def report(request):
    """Append ``name: value`` detail strings that are echoed with the criterion's line."""
    notes: list[str] = []
    request.node.ac_notes = notes
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        entry = _RESULTS.setdefault(mark.args[0], [])
        entry.append((item.name, rep.passed, list(getattr(item, "ac_notes", []))))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid in sorted(_RESULTS, key=lambda c: int(c[2:])):
        runs = _RESULTS[cid]
        ok = all(passed for _, passed, _ in runs)
        tr.write_line(f"{cid} {'PASS' if ok else 'FAIL'}  ({sum(p for _, p, _ in runs)}/{len(runs)} tests)")
        for name, passed, notes in runs:
            flag = "ok  " if passed else "FAIL"
            tr.write_line(f"    {flag} {name}" + (f": {'; '.join(notes)}" if notes else ""))
