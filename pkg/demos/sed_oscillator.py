"""
A charged oscillator in the zero-point field, and the D it implies.

The oscillator absorbs from the field and radiates; once the two powers
balance its position spread is hbar/(2 m omega0), the quantum ground
state. Reading off D = omega0 <x^2> and feeding it to the Nelson sampler
closes the loop. A damping rate of 0.01 omega0 keeps the run to a few
seconds; the acceptance suite uses 1e-3 and far more realizations.

Run with ``python3 demos/sed_oscillator.py``.
"""
import numpy as np

from stoqlab import Grid1D, PhysicalParams, RandomStreamSpec
from stoqlab.quantum import flux_velocity, harmonic_potential, osmotic_velocity, solve_eigenstates
from stoqlab.samplers import nelson_sample
from stoqlab.zpf import (commensurate_spec, fix_diffusion_constant, line_shape_x2,
                         line_shape_xdot2, run_sed_ensemble)

gamma, omega0 = 1e-2, 1.0
params = PhysicalParams.sed(gamma, omega0)
duration = 40 / gamma
spec, dt = commensurate_spec(20 * omega0, duration, 1e-2 / omega0, RandomStreamSpec(3))
print(f"{spec.n_modes} field modes up to omega_c = {spec.omega_cutoff}, dt = {dt:.5f}")
print(f"line-shape oracle: <x^2> = {line_shape_x2(params, omega0, spec):.4f}, "
      f"<xdot^2> = {line_shape_xdot2(params, omega0, spec):.4f} "
      "(the excess over 1/2 is the off-resonant tail)")

run = run_sed_ensemble(params, omega0, spec, 24, duration, dt)
x2, se = run.mean_x2()
bal = run.balance()
pa, pr = run.early_balance()
print(f"\n24 realizations: <x^2> = {x2:.4f} +- {se:.4f}")
print(f"stationary balance: P_abs = {bal.P_abs:.3e}, P_rad = {bal.P_rad:.3e}, "
      f"imbalance = {bal.imbalance:+.4f}")
print(f"cold start: P_abs / P_rad = {pa / pr:.2f} (absorption dominates)")

D, dD = fix_diffusion_constant(run)
print(f"\nD inferred = {D:.4f} +- {dD:.4f} (hbar/2m = 0.5)")

q = PhysicalParams(lambda_branch=1, diffusion_D=D)
grid = Grid1D(-8, 8, 801)
psi = solve_eigenstates(harmonic_potential(grid), q, 1)[0].wavefunction(q)
ens = nelson_sample((flux_velocity(psi), osmotic_velocity(psi)), q, 4000, 1e-3, 1001,
                    RandomStreamSpec(4), x0=0.0, record_every=10)
print(f"Nelson with that D: stationary <x^2> = {np.mean(ens.positions[:, 500:]**2):.4f}")
