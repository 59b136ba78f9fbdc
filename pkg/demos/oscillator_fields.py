"""
Velocity fields of the harmonic oscillator.

Solves for the lowest states, builds the flux and osmotic velocities and
the quantum potential, and splits the momentum variance into its two
parts. Units: hbar = m = omega = 1, so D = 1/2.

Run with ``python3 demos/oscillator_fields.py``.
"""
import numpy as np

from stoqlab import Grid1D, PhysicalParams
from stoqlab.quantum import (Propagator, density, flux_velocity, harmonic_potential,
                             heisenberg_product, momentum_stats, osmotic_velocity,
                             quantum_potential, solve_eigenstates, superpose)

p = PhysicalParams.quantum()
grid = Grid1D(-10, 10, 1001)
V = harmonic_potential(grid)
states = solve_eigenstates(V, p, 4)

print("levels (exact n + 1/2):")
for s in states:
    print(f"  n={s.index}  E={s.energy:.8f}")

ground = states[0].wavefunction(p)
u = osmotic_velocity(ground)
qp = quantum_potential(density(ground), p)
x = grid.x
sel = np.abs(x) <= 4
print("\nground state on |x| <= 4")
print(f"  max |u + x|              = {np.max(np.abs(u.values[sel] + x[sel])):.2e}")
print(f"  max |V_Q - (1 - x^2)/2|  = "
      f"{np.max(np.abs(qp.sqrt_form.values[sel] - 0.5 + 0.5 * x[sel]**2)):.2e}")
print(f"  Heisenberg product       = {heisenberg_product(ground):.6f}")

# a superposition carries current: v oscillates, u breathes
sup = superpose(states[:2], [1, 1], p)
print("\n(psi0 + psi1)/sqrt 2 over half a period")
print("      t      <v>     var_p   var_mv   var_mu")
for w in Propagator(V, p, 0.01).run(sup, 314, every=63):
    v = flux_velocity(w)
    rho = density(w).values
    mean_v = np.trapezoid(np.where(v.valid, v.values * rho, 0.0), dx=grid.dx)
    ms = momentum_stats(w)
    print(f"  {w.time:5.2f}  {mean_v:+.4f}  {ms.var_p:.4f}   {ms.var_mv:.4f}   {ms.var_mu:.4f}")
