"""
Scenario runners behind the command line.

Each run writes its artifacts plus ``manifest.json`` into the output
directory. Manifest schema (all keys always present)::

    {
      "scenario":   str,
      "status":     "ok" | "flagged" | "check-failed" | "invalid" | "error",
      "exit_code":  0 | 1 | 2 | 3,
      "config":     {dotted key: value, ...},   # full echo, defaults filled
      "seed":       int,
      "versions":   {"stoqlab": ..., "numpy": ..., "scipy": ..., "python": ...},
      "wall_clock": {"started": ISO-8601 UTC, "elapsed_s": float},
      "artifacts":  [{"path": relative path, "description": str}, ...],
      "flags":      [str, ...],
      "summary":    {...},                      # scenario-specific numbers
      "errors":     [str, ...]
    }

Exit codes: 0 success, 1 check failure or flagged run condition, 2 invalid
config or precondition, 3 internal error.
"""
from __future__ import annotations

import csv
import datetime as _dt
import json
import math
import os
import platform
import time
import traceback
from typing import Dict, List, Optional

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, ScenarioConfig
from .core import ScalarField, derivative
from .dynamics import osmotic_relation_residual
from .quantum import (Propagator, density, energy_expectation, flux_velocity, gaussian_packet,
                      heisenberg_product, momentum_stats, osmotic_velocity, quantum_potential,
                      solve_eigenstates, superpose, boost, write_field_csv)
from .samplers import (brownian_sample, estimate_diffusion, estimate_flux_velocity,
                       estimate_osmotic_velocity, grid_cdf, histogram_l1, nelson_sample,
                       write_binned_csv, write_ensemble_csv)
from .zpf import (PreconditionError, ZpfRealization, ZpfSpec, check_sed_preconditions,
                  commensurate_dt,
                  commensurate_spec, covariance_phi, energy_balance, fix_diffusion_constant,
                  line_shape_x2, run_sed_ensemble, sed_integrate, write_trajectory_csv)

__all__ = ["EXIT_OK", "EXIT_CHECK", "EXIT_INVALID", "EXIT_INTERNAL", "run_scenario"]

EXIT_OK, EXIT_CHECK, EXIT_INVALID, EXIT_INTERNAL = 0, 1, 2, 3


class _Run:
    """Collects artifacts, flags and summary numbers for one scenario run."""

    def __init__(self, cfg: ScenarioConfig, out_dir: str, fast: bool):
        self.cfg = cfg
        self.out_dir = out_dir
        self.fast = fast
        self.artifacts: List[Dict[str, str]] = []
        self.flags: List[str] = []
        self.summary: Dict = {}
        self.check_failed = False

    def path(self, name: str, description: str) -> str:
        self.artifacts.append({"path": name, "description": description})
        return os.path.join(self.out_dir, name)

    def write_json(self, name: str, description: str, obj) -> None:
        with open(self.path(name, description), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row])


# -- quantum-side helpers ------------------------------------------------------

def _potential(cfg: ScenarioConfig):
    return cfg.potential.build(cfg.grid, cfg["params.mass"])


def _initial_state(cfg: ScenarioConfig, V):
    p, g = cfg.params, cfg.grid
    kind = cfg["state.kind"]
    if kind == "gaussian":
        return boost(gaussian_packet(g, p, cfg["state.sigma"], cfg["state.x0"]), cfg["state.k0"])
    k = max(2, cfg["state.index"] + 1)
    states = solve_eigenstates(V, p, k, order=cfg["integrator.order"])
    if kind == "superposition":
        return superpose(states[:2], [1, 1], p)
    index = 0 if kind == "ground" else cfg["state.index"]
    return states[index].wavefunction(p)


def _run_eigen(run: _Run):
    cfg = run.cfg
    V = _potential(cfg)
    states = solve_eigenstates(V, cfg.params, cfg["eigen.k"], order=cfg["integrator.order"])
    _csv(run.path("energies.csv", "eigenvalues: index,energy"), ["index", "energy"],
         [(s.index, float(s.energy)) for s in states])
    for s in states:
        write_field_csv(run.path(f"state_{s.index}.csv", f"fields of eigenstate {s.index}"),
                        s.wavefunction(cfg.params), V, order=cfg["integrator.order"])
    run.summary["energies"] = [float(s.energy) for s in states]


def _run_evolve(run: _Run):
    cfg = run.cfg
    V = _potential(cfg)
    order = cfg["integrator.order"]
    psi0 = _initial_state(cfg, V)
    prop = Propagator(V, cfg.params, cfg["integrator.dt"], order)
    rows, last = [], psi0
    x = cfg.grid.x
    for w in prop.run(psi0, cfg["integrator.steps"], every=cfg["integrator.record_every"]):
        rho = np.abs(w.values) ** 2
        rows.append((float(w.time), float(w.norm()),
                     float(np.trapezoid(x * rho, dx=cfg.grid.dx)),
                     float(energy_expectation(w, V, order))))
        last = w
    _csv(run.path("observables.csv", "t,norm,mean_x,energy every record_every steps"),
         ["t", "norm", "mean_x", "energy"], rows)
    write_field_csv(run.path("final.csv", "fields of the final state"), last, V, order=order)
    drift = max(abs(r[1] - 1.0) for r in rows)
    e0 = rows[0][3]
    run.summary.update(norm_drift=drift, energy_drift=max(abs(r[3] - e0) for r in rows) / abs(e0),
                       final_time=rows[-1][0])
    if drift > 1e-8:
        run.flags.append(f"norm drift {drift:.3g} exceeds 1e-8")


def _run_fields(run: _Run):
    cfg = run.cfg
    V = _potential(cfg)
    order = cfg["integrator.order"]
    psi = _initial_state(cfg, V)
    write_field_csv(run.path("fields.csv", "x,re_psi,im_psi,rho,v,u,V_Q"), psi, V, order=order)
    ms = momentum_stats(psi, order)
    rho = density(psi)
    rep = osmotic_relation_residual(rho, osmotic_velocity(psi, order), cfg.params.diffusion_D, order)
    qp = quantum_potential(rho, cfg.params, order)
    ok = qp.sqrt_form.valid & qp.velocity_form.valid
    vq_diff = float(np.max(np.abs(qp.sqrt_form.values[ok] - qp.velocity_form.values[ok])))
    report = {"momentum": {k: float(getattr(ms, k)) for k in
                           ("mean_p", "mean_p2", "var_p", "var_mv", "var_mu", "masked_fraction")},
              "decomposition_error": ms.decomposition_error,
              "heisenberg_product": heisenberg_product(psi, order),
              "osmotic_relation": rep.to_dict(),
              "quantum_potential_form_difference": vq_diff}
    run.write_json("report.json", "momentum statistics and identity residuals", report)
    run.summary.update(report)
    if not rep.valid:
        run.flags.append(f"osmotic relation report invalid (masked fraction {rep.masked_fraction:.3f})")


def _dump_ensemble(run, ens, n):
    if n <= 0:
        return
    from .samplers import TrajectoryEnsemble
    sub = TrajectoryEnsemble(ens.positions[:n], ens.dt, ens.seed, ens.process_tag, ens.t0)
    write_ensemble_csv(run.path("ensemble.csv", f"traj_id,step,t,x for the first {n} trajectories"),
                       sub)


def _n_traj(run):
    n = run.cfg["ensemble.n_traj"]
    return max(1, n // 10) if run.fast else n


def _sampler_grid_and_records(cfg):
    every = cfg["integrator.record_every"]
    steps = cfg["integrator.steps"]
    return every, steps // every + 1


def _run_nelson(run: _Run):
    cfg = run.cfg
    V = _potential(cfg)
    psi = _initial_state(cfg, V)
    v, u, rho = flux_velocity(psi), osmotic_velocity(psi), density(psi)
    every, n_rec = _sampler_grid_and_records(cfg)
    ens = nelson_sample((v, u), cfg.params, _n_traj(run), cfg["integrator.dt"], n_rec,
                        cfg.seed, rho0=rho, record_every=every)
    _dump_ensemble(run, ens, cfg["ensemble.dump_traj"])
    bins = np.linspace(*np.percentile(ens.positions, [1, 99]), 21)
    est_u = estimate_osmotic_velocity(ens, bins)
    est_v = estimate_flux_velocity(ens, bins)
    write_binned_csv(run.path("u_binned.csv", "x,value,std_err,count of the osmotic estimate"), est_u)
    write_binned_csv(run.path("v_binned.csv", "x,value,std_err,count of the flux estimate"), est_v)
    cdf = grid_cdf(rho)
    edges = np.linspace(bins[0], bins[-1], 13)
    l1 = histogram_l1(ens.positions[:, -1], lambda e: np.interp(e, cfg.grid.x, cdf), edges)
    run.summary.update(D_hat=estimate_diffusion(ens), exit_fraction=ens.exit_fraction,
                       l1_final=l1, n_traj=ens.n_traj)
    run.flags.extend(ens.flags)


def _run_brownian(run: _Run):
    cfg = run.cfg
    V = _potential(cfg)
    force = ScalarField(V.grid, -derivative(V).values)
    every, n_rec = _sampler_grid_and_records(cfg)
    friction = cfg["brownian.friction"]
    ens = brownian_sample(force, friction, cfg.params.diffusion_D, _n_traj(run),
                          cfg["integrator.dt"], n_rec, cfg.seed, cfg.params,
                          x0=cfg["state.x0"], record_every=every)
    _dump_ensemble(run, ens, cfg["ensemble.dump_traj"])
    final = ens.positions[:, -1]
    run.summary.update(final_mean=float(final.mean()), final_variance=float(final.var(ddof=1)),
                       exit_fraction=ens.exit_fraction, n_traj=ens.n_traj)
    pot = cfg.potential
    if pot.kind == "harmonic":
        run.summary["ou_variance"] = (cfg.params.diffusion_D * cfg["params.mass"] * friction
                                      / (cfg["params.mass"] * pot.value**2))
    run.flags.extend(ens.flags)


# -- SED -----------------------------------------------------------------------

def _sed_setup(cfg: ScenarioConfig):
    omega0, gamma = cfg["sed.omega0"], cfg["sed.gamma"]
    p = cfg.params
    from .core import PhysicalParams
    params = PhysicalParams.sed(gamma, omega0, hbar=p.hbar, mass=p.mass,
                                light_speed=p.light_speed)
    duration = cfg["sed.duration"] or 40.0 / gamma
    dt_max = cfg["integrator.dt"] or 1e-2 / omega0
    check_sed_preconditions(params, omega0, duration, dt_max)
    cutoff = cfg["zpf.omega_cutoff"] or 20.0 * omega0
    if cfg["zpf.n_modes"] is None:
        spec, dt = commensurate_spec(cutoff, duration, dt_max, cfg.seed, params.hbar,
                                     params.light_speed)
    else:
        spec = ZpfSpec(cutoff, cfg["zpf.n_modes"], cfg.seed, params.hbar, params.light_speed)
        dt = commensurate_dt(spec, dt_max)
    return params, omega0, spec, duration, dt


def _run_sed(run: _Run):
    params, omega0, spec, duration, dt = _sed_setup(run.cfg)
    traj = sed_integrate(params, omega0, ZpfRealization.draw(spec, 0), duration, dt)
    write_trajectory_csv(run.path("trajectory.csv", "t,x,xdot of realization 0"), traj,
                         run.cfg["sed.dump_stride"])
    burn = 10.0 / params.damping_rate(omega0)
    b = energy_balance(traj, (burn, duration))
    run.write_json("balance.json", "power balance of realization 0 over [10/Gamma, end]",
                   b.to_dict())
    run.summary.update(b.to_dict(), dt=dt, n_modes=spec.n_modes)
    run.flags.extend(traj.flags)


def _run_balance(run: _Run):
    params, omega0, spec, duration, dt = _sed_setup(run.cfg)
    n = run.cfg["ensemble.n_realizations"]
    n = max(1, math.ceil(n / 10)) if run.fast else n
    s = run_sed_ensemble(params, omega0, spec, n, duration, dt)
    b = s.balance()
    D, dD = fix_diffusion_constant(s)
    out = b.to_dict()
    out.update(D_inferred=D, D_std_error=dD, n_realizations=n,
               line_shape_x2=line_shape_x2(params, omega0, spec))
    run.write_json("balance.json", "ensemble-averaged power balance and D_inferred", out)
    _csv(run.path("realizations.csv", "per-realization stationary reductions"),
         ["index", "x2", "xdot2", "P_abs", "P_rad", "trend_z"],
         [(i, float(a), float(b_), float(c), float(d), float(z)) for i, (a, b_, c, d, z) in
          enumerate(zip(s.x2, s.xdot2, s.P_abs, s.P_rad, s.trend_z))])
    run.summary.update(out)
    run.flags.extend(s.flags)


def _run_zpf_check(run: _Run):
    cfg = run.cfg
    cutoff = cfg["zpf.omega_cutoff"] or 20.0 * cfg["sed.omega0"]
    spec = ZpfSpec(cutoff, cfg["zpf.n_modes"], cfg.seed, cfg.params.hbar, cfg.params.light_speed)
    dt = commensurate_dt(spec, cfg["integrator.dt"])
    n_real = cfg["ensemble.n_realizations"]
    n_real = max(2, math.ceil(n_real / 10)) if run.fast else n_real
    n = int(spec.recurrence_time / dt)
    lags = np.array([0, 1, 5, 20])
    est = np.array([[np.mean(E[: n - k] * E[k:]) for k in lags]
                    for E in (ZpfRealization.draw(spec, i).sample(n, dt) for i in range(n_real))])
    mean = est.mean(axis=0)
    se = est.std(axis=0, ddof=1) / math.sqrt(n_real)
    phi = covariance_phi(lags * dt, spec)
    z = (mean - phi) / se
    tol = 3.0 * (math.sqrt(10) if run.fast else 1.0)
    _csv(run.path("covariance.csv", "lag,t,phi,empirical,std_err,z"),
         ["lag", "t", "phi", "empirical", "std_err", "z"],
         [(int(k), float(k * dt), float(f), float(m), float(s), float(zz))
          for k, f, m, s, zz in zip(lags, phi, mean, se, z)])
    run.summary.update(max_abs_z=float(np.max(np.abs(z))), tolerance=tol, n_realizations=n_real)
    if np.max(np.abs(z)) > tol:
        run.check_failed = True


def _run_verify(run: _Run):
    from .verify import run_verify
    report = run_verify(fast=run.fast or run.cfg["verify.fast"], seed=run.cfg["seed"],
                        progress=lambda c: print(c.line(), flush=True))
    run.write_json("verify.json", "acceptance-suite report", report.to_dict())
    run.summary.update(overall="pass" if report.passed else "fail", failing=report.failing())
    if not report.passed:
        run.check_failed = True


_RUNNERS = {"eigen": _run_eigen, "evolve": _run_evolve, "fields": _run_fields,
            "nelson": _run_nelson, "brownian": _run_brownian, "sed": _run_sed,
            "balance": _run_balance, "zpf-check": _run_zpf_check, "verify": _run_verify}


def _versions():
    return {"stoqlab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(out_dir, scenario, status, code, config, seed, started, elapsed,
                   artifacts=(), flags=(), summary=None, errors=()):
    manifest = {"scenario": scenario, "status": status, "exit_code": code, "config": config,
                "seed": seed, "versions": _versions(),
                "wall_clock": {"started": started, "elapsed_s": elapsed},
                "artifacts": list(artifacts), "flags": list(flags),
                "summary": _jsonable(summary or {}), "errors": list(errors)}
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def run_scenario(cfg: ScenarioConfig, out_dir: Optional[str] = None, fast: bool = False) -> int:
    """Run ``cfg`` and write artifacts plus ``manifest.json``; returns the exit code."""
    out_dir = out_dir or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    started = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    run = _Run(cfg, out_dir, fast)
    errors: List[str] = []
    try:
        _RUNNERS[cfg.scenario](run)
        if run.check_failed:
            code, status = EXIT_CHECK, "check-failed"
        elif run.flags:
            code, status = EXIT_CHECK, "flagged"
        else:
            code, status = EXIT_OK, "ok"
    except (PreconditionError, ConfigError) as exc:
        code, status = EXIT_INVALID, "invalid"
        errors.append(str(exc))
    except Exception as exc:  # reported, never swallowed silently
        code, status = EXIT_INTERNAL, "error"
        errors.append(f"{type(exc).__name__}: {exc}")
        errors.append(traceback.format_exc())
    write_manifest(out_dir, cfg.scenario, status, code, dict(cfg.values), cfg["seed"], started,
                   time.perf_counter() - t0, run.artifacts, run.flags, run.summary, errors)
    return code
