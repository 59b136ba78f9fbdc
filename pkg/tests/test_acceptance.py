"""Acceptance suite: all ten criteria at full size and full tolerances.

Prints one PASS/FAIL line per criterion (visible without ``-s``), then
asserts each criterion separately. Takes several minutes on one core.
"""
import pytest

from stoqlab.verify import CHECKS, run_verify


@pytest.fixture(scope="module")
def report(request):
    capman = request.config.pluginmanager.getplugin("capturemanager")
    lines = []

    def show(res):
        lines.append(res.line())
        with capman.global_and_fixture_disabled():
            print("\n" + res.line(), flush=True)
            for s in res.subchecks:
                mark = "ok " if s.ok else "BAD"
                print(f"    [{mark}] {s.label}: {s.value:.4g} (tol {s.tolerance:.4g})", flush=True)
            if res.note:
                print(f"    note: {res.note}", flush=True)

    rep = run_verify(fast=False, progress=show)
    with capman.global_and_fixture_disabled():
        print(f"\nacceptance: {sum(c.status == 'pass' for c in rep.checks)}/{len(rep.checks)} "
              "criteria pass", flush=True)
    return rep


@pytest.mark.slow
@pytest.mark.parametrize("index", range(1, len(CHECKS) + 1),
                         ids=[name for name, _ in CHECKS])
def test_criterion(report, index):
    res = report.checks[index - 1]
    bad = [f"{s.label}: {s.value:.4g} vs {s.tolerance:.4g}" for s in res.subchecks if not s.ok]
    assert res.status == "pass", f"{res.line()} {bad} {res.note}"


@pytest.mark.slow
def test_overall(report):
    assert report.passed, report.failing()
    assert not report.fast
