"""
The acceptance suite: ten checks against analytic quantum-mechanical
oracles, in natural units hbar = m = omega = c = 1.

``fast=True`` shrinks every Monte-Carlo ensemble 10x and widens statistical
tolerances by sqrt(10); deterministic checks keep their tolerances.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy import stats

from .core import Grid1D, PhysicalParams, RandomStreamSpec, ScalarField
from .dynamics import FieldSnapshotPair, residual_continuity, residual_time_symmetric
from .quantum import (Propagator, boost, density, flux_velocity, gaussian_packet,
                      harmonic_potential, heisenberg_product, momentum_stats,
                      osmotic_velocity, osmotic_velocity_from_density, solve_eigenstates,
                      superpose)
from .samplers import (brownian_sample, estimate_diffusion, estimate_flux_velocity,
                       estimate_osmotic_velocity, histogram_l1, nelson_sample)
from .zpf import (ZpfRealization, ZpfSpec, commensurate_dt, commensurate_spec, covariance_phi,
                  fix_diffusion_constant, line_shape_x2, run_sed_ensemble)

__all__ = ["SubCheck", "CheckResult", "VerifyReport", "CHECKS", "run_verify",
           "sed_setup"]

FAST_FACTOR = 10
PASS, FAIL, SKIPPED = "pass", "fail", "skipped"


@dataclass
class SubCheck:
    label: str
    value: float
    tolerance: float
    ok: bool

    def to_dict(self):
        return {"label": self.label, "value": self.value, "tolerance": self.tolerance,
                "ok": bool(self.ok)}


@dataclass
class CheckResult:
    """One acceptance criterion; ``measured``/``tolerance`` echo its headline sub-check."""

    name: str
    status: str
    measured: float
    tolerance: float
    runtime: float
    subchecks: List[SubCheck] = field(default_factory=list)
    note: str = ""

    def line(self) -> str:
        return (f"{self.status.upper():7s} {self.name}: measured={self.measured:.4g} "
                f"tol={self.tolerance:.4g} ({self.runtime:.1f}s)")

    def to_dict(self):
        return {"name": self.name, "status": self.status, "measured": self.measured,
                "tolerance": self.tolerance, "runtime": self.runtime, "note": self.note,
                "subchecks": [s.to_dict() for s in self.subchecks]}


@dataclass
class VerifyReport:
    checks: List[CheckResult]
    fast: bool = False

    @property
    def passed(self) -> bool:
        return all(c.status == PASS for c in self.checks if c.status != SKIPPED)

    def failing(self) -> List[str]:
        return [c.name for c in self.checks if c.status == FAIL]

    def lines(self) -> List[str]:
        return [c.line() for c in self.checks]

    def to_dict(self):
        return {"overall": PASS if self.passed else FAIL, "fast": self.fast,
                "checks": [c.to_dict() for c in self.checks]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


class _Ctx:
    """Shared state between checks (the SED run feeds three of them)."""

    def __init__(self, fast: bool, seed: int, overrides: Dict):
        self.fast = fast
        self.seed = seed
        self.overrides = overrides
        self.cache: Dict = {}

    def n(self, full: int, floor: int = 1) -> int:
        return max(floor, math.ceil(full / FAST_FACTOR)) if self.fast else full

    def stat_tol(self, tol: float) -> float:
        return tol * math.sqrt(FAST_FACTOR) if self.fast else tol


def _result(name, subs, runtime, budget=None, note=""):
    if budget is not None:
        subs = subs + [SubCheck("runtime [s]", runtime, budget, runtime < budget)]
    ok = all(s.ok for s in subs)
    head = subs[0]
    return CheckResult(name, PASS if ok else FAIL, float(head.value), float(head.tolerance),
                       runtime, subs, note)


def _le(label, value, tol):
    return SubCheck(label, float(value), float(tol), bool(value <= tol))


# -- 1 --------------------------------------------------------------------------

def check_spectrum(ctx: _Ctx):
    p = PhysicalParams.quantum()
    g = Grid1D(-10, 10, 1001)
    t = time.perf_counter()
    states = solve_eigenstates(harmonic_potential(g), p, 4)
    rt = time.perf_counter() - t
    err = max(abs(s.energy - (n + 0.5)) for n, s in enumerate(states))
    return [_le("max |E_n - (n+1/2)|, n=0..3", err, 1e-4)], rt, 5.0


# -- 2 --------------------------------------------------------------------------

def _oscillator_states(n_points=1001, k=4):
    p = PhysicalParams.quantum()
    g = Grid1D(-10, 10, n_points)
    V = harmonic_potential(g)
    return p, g, V, solve_eigenstates(V, p, k)


def check_variance(ctx: _Ctx):
    p, g, V, st = _oscillator_states()
    psis = [st[0].wavefunction(p), st[1].wavefunction(p)]
    sup = superpose(st[:2], [1, 1], p)
    prop = Propagator(V, p, 0.005)
    times = [0.3, 1.0, 2.0]
    steps = [int(round(t / 0.005)) for t in times]
    snaps = list(prop.run(sup, steps[-1], every=1))
    psis += [snaps[s] for s in steps]
    err = max(momentum_stats(w).decomposition_error for w in psis)
    heis = abs(heisenberg_product(psis[0]) - 0.5) / 0.5
    return [_le("max rel |var_p - var_mv - var_mu|", err, 1e-3),
            _le("ground-state |dx dp - 1/2| / (1/2)", heis, 1e-3)], None, None


# -- 3 --------------------------------------------------------------------------

def preset_states():
    """States for the velocity identification, keyed by name.

    Every state here is either nodeless or has its nodes on grid points,
    where they are masked. At an off-grid node a distance delta from the
    nearest grid point both routes to u have a pole and their difference
    grows like dx^4 / delta^2, so no sup-norm bound can hold there.
    """
    p, g, V, st = _oscillator_states()
    out = {"ground": st[0].wavefunction(p), "first excited": st[1].wavefunction(p)}
    sup = superpose(st[:2], [1, 1], p)
    snaps = list(Propagator(V, p, 0.005).run(sup, 400, every=1))
    for s in (60, 200, 400):
        out[f"superposition t={snaps[s].time:g}"] = snaps[s]
    out["boosted gaussian"] = boost(gaussian_packet(g, p, 1.0, 0.5), 1.5)
    return p, g, out


def check_osmotic(ctx: _Ctx):
    p, g, states = preset_states()
    tol = 10 * g.dx**2
    worst = 0.0
    for name, w in states.items():
        a = osmotic_velocity(w)
        b = osmotic_velocity_from_density(density(w), p.diffusion_D)
        ok = a.valid & b.valid
        worst = max(worst, float(np.max(np.abs(a.values[ok] - b.values[ok]))))
    return [_le("sup |u_psi - D rho'/rho| over preset states", worst, tol)], None, None


# -- 4 --------------------------------------------------------------------------

def _residuals(n, dt):
    p = PhysicalParams.quantum()
    g = Grid1D(-5.7, 5.7, n)
    V = harmonic_potential(g)
    st = solve_eigenstates(V, p, 2)
    sup = superpose(st, [1, 1], p)
    prop = Propagator(V, p, dt)
    a = list(prop.run(sup, int(round((math.pi / 2) / dt))))[-1]
    b = list(prop.run(a, 1))[-1]
    pair = FieldSnapshotPair.from_wavefunctions(a, b, V)
    return residual_time_symmetric(pair), residual_continuity(pair)


def _ground_residual(n=801):
    # wide enough that the wall sits in the masked tail (u has a pole at a
    # Dirichlet wall), narrow enough that the tail stays under 5% of nodes
    p = PhysicalParams.quantum()
    g = Grid1D(-5.4, 5.4, n)
    V = harmonic_potential(g)
    w = solve_eigenstates(V, p, 1)[0].wavefunction(p)
    return residual_time_symmetric(FieldSnapshotPair.from_wavefunctions(w, None, V))


def check_convergence(ctx: _Ctx):
    coarse = _residuals(401, 0.01)
    fine = _residuals(801, 0.005)
    ground = _ground_residual()
    reports = coarse + fine + (ground,)
    subs = [
        SubCheck("time-symmetric residual reduction", coarse[0].l2_norm / fine[0].l2_norm,
                 3.5, coarse[0].l2_norm / fine[0].l2_norm >= 3.5),
        SubCheck("continuity residual reduction", coarse[1].l2_norm / fine[1].l2_norm,
                 3.5, coarse[1].l2_norm / fine[1].l2_norm >= 3.5),
        _le("ground-state residual l2", ground.l2_norm, 1e-3),
        SubCheck("residual reports valid", float(all(r.valid for r in reports)), 1.0,
                 all(r.valid for r in reports)),
    ]
    return subs, None, None


# -- 5 --------------------------------------------------------------------------

def _ground_fields(D=0.5, omega=1.0):
    p = PhysicalParams(lambda_branch=1, diffusion_D=D)
    g = Grid1D(-8, 8, 801)
    V = harmonic_potential(g, omega)
    w = solve_eigenstates(V, p, 1)[0].wavefunction(p)
    return p, g, V, w


def _gauss_cdf(var):
    return lambda e: stats.norm.cdf(e, scale=math.sqrt(var))


_POOL = slice(500, None, 50)  # records from t = 5 on, every 0.5


def check_nelson(ctx: _Ctx):
    n_traj = ctx.n(10_000, 100)
    p, g, V, w = _ground_fields()
    t = time.perf_counter()
    ens = nelson_sample((flux_velocity(w), osmotic_velocity(w)), p, n_traj, 1e-3, 1001,
                        RandomStreamSpec(ctx.seed, 0), x0=0.0, record_every=10)
    edges = np.linspace(-2.1, 2.1, 13)
    l1 = histogram_l1(ens.positions[:, _POOL], _gauss_cdf(0.5), edges)
    bins = np.linspace(-2, 2, 21)
    window = np.arange(500, 1000, 2)
    bv = estimate_flux_velocity(ens, bins, steps=window)
    bu = estimate_osmotic_velocity(ens, bins, steps=window)
    # an ensemble that has drifted out of the bins scores as an outright miss
    vz = float(np.max(np.abs(bv.values / bv.std_errors)[bv.valid])) if bv.valid.any() else math.inf
    slope = bu.fit_line()[0] if bu.valid.sum() >= 2 else math.inf
    D_hat = estimate_diffusion(ens)
    rt = time.perf_counter() - t
    ctx.cache["nelson_ens"] = ens
    # v has no tolerance of its own: bins must be consistent with 0 at a
    # Bonferroni-corrected 3.5 sigma
    subs = [_le("L1(pooled histogram, |psi0|^2)", l1, ctx.stat_tol(0.02)),
            _le("max |v_hat| / se over bins", vz, 3.5 + (1.0 if ctx.fast else 0.0)),
            _le("|u slope + 1|", abs(slope + 1), ctx.stat_tol(0.05)),
            _le("|D_hat - 0.5| / 0.5", abs(D_hat - 0.5) / 0.5, ctx.stat_tol(0.02))]
    if ens.flagged:
        subs.append(SubCheck("exit fraction", ens.exit_fraction, 0.01, False))
    return subs, rt, 60.0


# -- 6 --------------------------------------------------------------------------

BROWNIAN_D = 0.1
BROWNIAN_FRICTION = 1.0


def check_two_brands(ctx: _Ctx):
    n_traj = ctx.n(10_000, 100)
    g = Grid1D(-8, 8, 801)
    force = ScalarField(g, -g.x)
    p = PhysicalParams.brownian(BROWNIAN_D)
    ens = brownian_sample(force, BROWNIAN_FRICTION, BROWNIAN_D, n_traj, 1e-3, 1001,
                          RandomStreamSpec(ctx.seed, 0), p, x0=0.0, record_every=10)
    ou_var = BROWNIAN_D * BROWNIAN_FRICTION * p.mass  # D m gamma / (m omega^2)
    edges = np.linspace(-1.2, 1.2, 13)
    l1 = histogram_l1(ens.positions[:, _POOL], _gauss_cdf(ou_var), edges)
    # distinguishability from |psi0|^2 on the final snapshot (independent samples)
    x = ens.positions[:, -1]
    s2 = float(np.var(x, ddof=1))
    se = math.sqrt(2.0 / (x.size - 1)) * s2
    z = abs(s2 - 0.5) / se
    return [_le("L1(pooled histogram, OU density)", l1, ctx.stat_tol(0.02)),
            SubCheck("variance separation from |psi0|^2 [sigma]", z, 5.0, z >= 5.0)], None, None


# -- 7 --------------------------------------------------------------------------

def check_zpf_covariance(ctx: _Ctx):
    n_real = ctx.n(100, 10)
    spec = ZpfSpec(20.0, 1000, RandomStreamSpec(ctx.seed, 0))
    dt = commensurate_dt(spec, 0.01)
    n = int(spec.recurrence_time / dt)
    lags = np.array([0, 1, 5, 20])
    t = time.perf_counter()
    est = np.empty((n_real, lags.size))
    for i in range(n_real):
        E = ZpfRealization.draw(spec, i).sample(n, dt)
        est[i] = [np.mean(E[: n - k] * E[k:]) for k in lags]
    rt = time.perf_counter() - t
    mean = est.mean(axis=0)
    se = est.std(axis=0, ddof=1) / math.sqrt(n_real)
    phi = covariance_phi(lags * dt, spec)
    z = np.abs(mean - phi) / se
    subs = [SubCheck(f"|C({k} dt) - phi| / se", float(zk), 3.0, bool(zk <= 3.0))
            for k, zk in zip(lags, z)]
    subs.sort(key=lambda s: -s.value)
    return subs, rt, 30.0


# -- 8, 9, 10 -------------------------------------------------------------------

SED_GAMMA = 1e-3
SED_CUTOFF_RATIO = 20.0
SED_DURATION_GAMMAS = 40.0


def sed_setup(omega0=1.0, hbar=1.0, seed=0, gamma_ratio=SED_GAMMA):
    """Canonical SED run parameters: (params, spec, duration, dt)."""
    gamma = gamma_ratio * omega0
    params = PhysicalParams.sed(gamma, omega0, hbar=hbar)
    duration = SED_DURATION_GAMMAS / gamma
    spec, dt = commensurate_spec(SED_CUTOFF_RATIO * omega0, duration, 1e-2 / omega0,
                                 RandomStreamSpec(seed, 0), hbar=hbar)
    return params, spec, duration, dt


def _sed_edges(hbar=1.0, omega0=1.0):
    s = math.sqrt(hbar / (2 * omega0))
    return np.linspace(-3 * s, 3 * s, 13)


def _sed_run(ctx: _Ctx, key, omega0, hbar, n_real, seed_offset):
    if key not in ctx.cache:
        params, spec, duration, dt = sed_setup(omega0, hbar, ctx.seed + seed_offset)
        summary = run_sed_ensemble(params, omega0, spec, n_real, duration, dt,
                                   hist_edges=_sed_edges(hbar, omega0))
        ctx.cache[key] = summary
    return ctx.cache[key]


def check_sed_ground_state(ctx: _Ctx):
    params, spec, duration, dt = sed_setup(1.0, 1.0, ctx.seed)
    oracle = line_shape_x2(params, 1.0, spec)
    t = time.perf_counter()
    s = _sed_run(ctx, "sed", 1.0, 1.0, ctx.n(256, 20), 0)
    rt = time.perf_counter() - t
    x2, _ = s.mean_x2()
    h = s.histogram()
    exact = np.diff(_gauss_cdf(0.5)(s.hist_edges))
    l1 = float(np.abs(h - exact).sum() + abs((1 - h.sum()) - (1 - exact.sum())))
    tol = 0.15 if ctx.fast else 0.05
    subs = [_le("|<x^2> - 1/2| / (1/2)", abs(x2 - 0.5) / 0.5, tol),
            _le("L1(position histogram, |psi0|^2)", l1, ctx.stat_tol(0.05)),
            _le("line-shape oracle |I - 1/2| / (1/2)", abs(oracle - 0.5) / 0.5, 0.01)]
    return subs, rt, 60.0 if ctx.fast else 600.0


def check_energy_balance(ctx: _Ctx):
    s = _sed_run(ctx, "sed", 1.0, 1.0, ctx.n(256, 20), 0)
    b = s.balance()
    pa, pr = s.early_balance()
    return [_le("|P_abs - P_rad| / P_rad (stationary)", abs(b.imbalance), ctx.stat_tol(0.1)),
            SubCheck("early P_abs / P_rad (cold start)", pa / pr, 1.0, pa > pr)], None, None


def check_closing_loop(ctx: _Ctx):
    base = _sed_run(ctx, "sed", 1.0, 1.0, ctx.n(256, 20), 0)
    n_var = ctx.n(64, 8)
    t = time.perf_counter()
    w2 = _sed_run(ctx, "sed_w2", 2.0, 1.0, n_var, 1)
    h2 = _sed_run(ctx, "sed_h2", 1.0, 2.0, n_var, 2)
    D, dD = fix_diffusion_constant(base)
    Dw, dDw = fix_diffusion_constant(w2)
    Dh, dDh = fix_diffusion_constant(h2)
    tol = 0.15 if ctx.fast else 0.05
    z_w = abs(Dw - D) / math.hypot(dD, dDw)
    ratio = Dh / D
    z_h = abs(ratio - 2.0) / (ratio * math.hypot(dD / D, dDh / Dh))

    # inject D_inferred into the quantum branch and compare stationary densities
    p, g, V, w = _ground_fields(D=D)
    n_traj = ctx.n(10_000, 100)
    ens = nelson_sample((flux_velocity(w), osmotic_velocity(w)), p, n_traj, 1e-3, 1001,
                        RandomStreamSpec(ctx.seed, 1), x0=0.0, record_every=10)
    edges = base.hist_edges
    pooled = ens.positions[:, _POOL]
    groups = np.array_split(np.arange(n_traj), 20)
    per_group = np.array([np.histogram(pooled[gi], edges)[0] / pooled[gi].size
                          for gi in groups])
    p_n = per_group.mean(axis=0)
    se_n = per_group.std(axis=0, ddof=1) / math.sqrt(len(groups))
    per_real = base.hist_counts / base.samples_per_realization
    p_s = per_real.mean(axis=0)
    se_s = per_real.std(axis=0, ddof=1) / math.sqrt(per_real.shape[0])
    chi2 = float(np.sum((p_n - p_s) ** 2 / (se_n**2 + se_s**2)))
    pval = float(stats.chi2.sf(chi2, df=edges.size - 1))
    rt = time.perf_counter() - t
    return [_le("|D_inferred - 1/2| / (1/2)", abs(D - 0.5) / 0.5, tol),
            _le("omega0 doubled: |D' - D| / se", z_w, 3.0),
            _le("hbar doubled: |D'/D - 2| / se", z_h, 3.0),
            SubCheck("Nelson(D_inferred) vs SED histogram chi2 p-value", pval, 1e-3,
                     pval >= 1e-3)], rt, None


CHECKS: List[Tuple[str, Callable]] = [
    ("1 oscillator spectrum", check_spectrum),
    ("2 variance decomposition", check_variance),
    ("3 velocity identification", check_osmotic),
    ("4 dynamical-equation equivalence", check_convergence),
    ("5 Nelson sampling", check_nelson),
    ("6 two brands", check_two_brands),
    ("7 ZPF covariance", check_zpf_covariance),
    ("8 SED ground state", check_sed_ground_state),
    ("9 energy balance", check_energy_balance),
    ("10 closing the loop", check_closing_loop),
]


def run_verify(fast: bool = False, seed: int = 12345, only=None,
               progress: Optional[Callable[[CheckResult], None]] = None,
               **overrides) -> VerifyReport:
    """Run the checks in order (``only``: iterable of 1-based indices)."""
    ctx = _Ctx(fast, seed, overrides)
    results = []
    for i, (name, fn) in enumerate(CHECKS, 1):
        if only is not None and i not in set(only):
            res = CheckResult(name, SKIPPED, float("nan"), float("nan"), 0.0)
        else:
            t = time.perf_counter()
            try:
                subs, rt, budget = fn(ctx)
                total = time.perf_counter() - t
                res = _result(name, subs, total if rt is None else rt, budget)
                res.runtime = total
            except Exception as exc:  # a crashing check is a failing check
                res = CheckResult(name, FAIL, float("nan"), float("nan"),
                                  time.perf_counter() - t, note=f"{type(exc).__name__}: {exc}")
        results.append(res)
        if progress is not None:
            progress(res)
    return VerifyReport(results, fast)
