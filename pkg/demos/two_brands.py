"""
Same trap, two kinds of diffusion.

The quantum branch drifts with v + u built from the ground state and
settles on |psi0|^2 (variance 1/2). The Brownian branch is an overdamped
Langevin particle in the same trap and settles on its Ornstein-Uhlenbeck
density (variance D gamma / omega^2). Both histograms are printed side
by side against their analytic targets.

Run with ``python3 demos/two_brands.py``.
"""
import numpy as np
from scipy import stats

from stoqlab import Grid1D, PhysicalParams, RandomStreamSpec, ScalarField
from stoqlab.quantum import (density, flux_velocity, harmonic_potential, osmotic_velocity,
                             solve_eigenstates)
from stoqlab.samplers import (brownian_sample, estimate_diffusion, estimate_osmotic_velocity,
                              nelson_sample)

n_traj = 4000
grid = Grid1D(-8, 8, 801)
p = PhysicalParams.quantum()
psi0 = solve_eigenstates(harmonic_potential(grid), p, 1)[0].wavefunction(p)

quantum = nelson_sample((flux_velocity(psi0), osmotic_velocity(psi0)), p, n_traj, 1e-3, 1001,
                        RandomStreamSpec(1), x0=0.0, record_every=10)
D_b, gamma = 0.1, 1.0
brown = brownian_sample(ScalarField(grid, -grid.x), gamma, D_b, n_traj, 1e-3, 1001,
                        RandomStreamSpec(2), PhysicalParams.brownian(D_b), x0=0.0,
                        record_every=10)

pool = slice(500, None, 50)
edges = np.linspace(-2.1, 2.1, 15)
hq = np.histogram(quantum.positions[:, pool], edges)[0] / quantum.positions[:, pool].size
hb = np.histogram(brown.positions[:, pool], edges)[0] / brown.positions[:, pool].size
eq = np.diff(stats.norm.cdf(edges, scale=np.sqrt(0.5)))
eb = np.diff(stats.norm.cdf(edges, scale=np.sqrt(D_b * gamma)))

print("   bin     quantum (|psi0|^2)    Brownian (OU)")
for lo, a, b, c, d in zip(edges[:-1], hq, eq, hb, eb):
    print(f"  {lo:+.1f}   {a:.4f} ({b:.4f})      {c:.4f} ({d:.4f})")

u = estimate_osmotic_velocity(quantum, np.linspace(-1.5, 1.5, 11),
                              steps=np.arange(500, 1000, 2))
print(f"\nquantum:  var = {quantum.positions[:, -1].var():.4f} (0.5), "
      f"u slope = {u.fit_line()[0]:+.3f} (-1), D = {estimate_diffusion(quantum):.4f} (0.5)")
print(f"Brownian: var = {brown.positions[:, -1].var():.4f} ({D_b * gamma}), "
      f"D = {estimate_diffusion(brown):.4f} ({D_b})")
