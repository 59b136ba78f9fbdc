import json
import math

import numpy as np
import pytest

from stoqlab import verify
from stoqlab.core import ScalarField
from stoqlab.verify import CHECKS, CheckResult, SubCheck, VerifyReport, run_verify


def test_report_semantics():
    ok = CheckResult("a", "pass", 1.0, 2.0, 0.1)
    bad = CheckResult("b", "fail", 3.0, 2.0, 0.1)
    skip = CheckResult("c", "skipped", math.nan, math.nan, 0.0)
    assert VerifyReport([ok, skip]).passed
    assert not VerifyReport([ok, bad, skip]).passed
    assert VerifyReport([ok, bad]).failing() == ["b"]
    assert ok.line().startswith("PASS    a: measured=1 tol=2")
    d = json.loads(VerifyReport([ok, bad], fast=True).to_json())
    assert d["overall"] == "fail" and d["fast"] is True
    assert [c["name"] for c in d["checks"]] == ["a", "b"]


def test_fast_context_scaling():
    ctx = verify._Ctx(True, 0, {})
    assert ctx.n(10_000) == 1000 and ctx.n(256) == 26 and ctx.n(5, floor=3) == 3
    assert ctx.stat_tol(0.02) == pytest.approx(0.02 * math.sqrt(10))
    full = verify._Ctx(False, 0, {})
    assert full.n(256) == 256 and full.stat_tol(0.02) == 0.02


def test_checks_cover_every_criterion():
    assert [int(name.split()[0]) for name, _ in CHECKS] == list(range(1, 11))


def test_only_runs_selected_checks():
    report = run_verify(fast=True, only=[1, 2])
    assert [c.status for c in report.checks[:2]] == ["pass", "pass"]
    assert all(c.status == "skipped" for c in report.checks[2:])
    assert report.passed
    assert all(isinstance(s, SubCheck) for s in report.checks[0].subchecks)


def test_flipped_osmotic_velocity_is_caught(monkeypatch):
    # negative control: reverse u in the Nelson drift
    real = verify.osmotic_velocity

    def flipped(psi, *a, **kw):
        u = real(psi, *a, **kw)
        return ScalarField(u.grid, -u.values, u.mask)

    monkeypatch.setattr(verify, "osmotic_velocity", flipped)
    report = run_verify(fast=True, only=[5])
    assert not report.passed
    assert report.failing() == ["5 Nelson sampling"]
    nelson = report.checks[4]
    assert nelson.status == "fail"
    assert nelson.measured > nelson.tolerance


def test_crashing_check_is_a_failure(monkeypatch):
    def boom(ctx):
        raise RuntimeError("broken")

    monkeypatch.setattr(verify, "CHECKS", [("1 oscillator spectrum", boom)])
    report = run_verify(fast=True)
    assert report.failing() == ["1 oscillator spectrum"]
    assert "RuntimeError" in report.checks[0].note
