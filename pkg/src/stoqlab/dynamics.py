"""
Stochastic-mechanics differential operators and residuals of the coupled
dynamical equations, evaluated on grid fields.

With f = -V' and no vector potential, the two dynamical equations read

    m (dv/dt + v v' - lam (u u' + D u'')) = f            (time-even part)
    d rho/dt + (rho v)' = 0                               (time-odd part, integrated)

lam = +1 gives the quantum branch, lam = -1 the Brownian one. The SED
radiationless equation is the lam = +1 form with the velocity-correlation
tensor T = u' and D = hbar/2m.

Time derivatives use two snapshots: a forward difference centred at
t + dt/2, with the remaining terms built from the snapshot average.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import Grid1D, PhysicalParams, ScalarField, _d1, _d2
from .quantum import (RHO_FLOOR, Wavefunction, density, flux_velocity,
                      osmotic_velocity)
from .samplers import BinnedEstimate, TrajectoryEnsemble, bin_samples

__all__ = [
    "FieldSnapshotPair",
    "ResidualReport",
    "TensorCheck",
    "VALID_MASKED_FRACTION",
    "apply_Dc",
    "apply_Ds",
    "residual_time_symmetric",
    "residual_brownian",
    "residual_continuity",
    "osmotic_relation_residual",
    "correlation_tensor",
    "correlation_tensor_check",
    "ensemble_tensor_estimate",
]

VALID_MASKED_FRACTION = 0.05


@dataclass(frozen=True, eq=False)
class FieldSnapshotPair:
    """Fields at t and t + dt. ``dt=None`` marks a stationary pair (d/dt = 0).

    ``radiative`` is the optional correction R entering as f + R/rho; it
    defaults to zero (radiationless approximation).
    """

    v: tuple
    u: tuple
    rho: tuple
    force: ScalarField
    params: PhysicalParams
    dt: Optional[float] = None
    radiative: Optional[ScalarField] = None

    def __post_init__(self):
        fields = [*self.v, *self.u, *self.rho, self.force]
        if self.radiative is not None:
            fields.append(self.radiative)
        grid = self.force.grid
        if any(f.grid != grid for f in fields):
            raise ValueError("all snapshots must share one grid")
        if any(len(t) != 2 for t in (self.v, self.u, self.rho)):
            raise ValueError("v, u and rho need exactly two snapshots each")
        if self.dt is not None and not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")

    @property
    def grid(self) -> Grid1D:
        return self.force.grid

    @classmethod
    def stationary(cls, v, u, rho, force, params, radiative=None):
        return cls((v, v), (u, u), (rho, rho), force, params, None, radiative)

    @classmethod
    def from_wavefunctions(cls, psi_a: Wavefunction, psi_b: Optional[Wavefunction],
                           V: ScalarField, order: int = 4):
        """Derive v, u, rho from psi; ``psi_b=None`` gives a stationary pair."""
        force = ScalarField(V.grid, -_d1(V.values, V.grid.dx, order))
        a = (flux_velocity(psi_a, order), osmotic_velocity(psi_a, order), density(psi_a))
        if psi_b is None:
            return cls.stationary(*a, force, psi_a.params)
        b = (flux_velocity(psi_b, order), osmotic_velocity(psi_b, order), density(psi_b))
        return cls((a[0], b[0]), (a[1], b[1]), (a[2], b[2]), force, psi_a.params,
                   psi_b.time - psi_a.time)

    def mean(self, name):
        a, b = getattr(self, name)
        return 0.5 * (a.values + b.values)

    def rate(self, name):
        a, b = getattr(self, name)
        if self.dt is None:
            return np.zeros(self.grid.n_points)
        return (b.values - a.values) / self.dt


@dataclass(frozen=True, eq=False)
class ResidualReport:
    """Residual field with norms over its unmasked nodes.

    ``l2`` is the root-mean-square over unmasked nodes, ``linf`` the
    maximum magnitude. Both are in units of ``scale``.
    """

    residual_field: ScalarField
    l2_norm: float
    linf_norm: float
    masked_fraction: float
    scale: float = 1.0
    std_errors: Optional[np.ndarray] = None

    @property
    def valid(self) -> bool:
        return self.masked_fraction < VALID_MASKED_FRACTION

    @property
    def max_z(self) -> float:
        """Largest |residual| / standard error (ensemble comparisons only)."""
        if self.std_errors is None:
            raise ValueError("report carries no standard errors")
        r = self.residual_field.values * self.scale
        ok = self.residual_field.valid
        return float(np.max(np.abs(r[ok]) / self.std_errors[ok]))

    def to_dict(self):
        return {"l2": self.l2_norm, "linf": self.linf_norm,
                "masked_fraction": self.masked_fraction, "valid": self.valid}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def build(cls, grid: Grid1D, residual: np.ndarray, mask: np.ndarray,
              scale: float = 1.0, std_errors=None) -> "ResidualReport":
        mask = np.asarray(mask, bool) | ~np.isfinite(residual)
        scaled = np.where(mask, np.nan, residual / scale)
        good = scaled[~mask]
        l2 = float(np.sqrt(np.mean(good**2))) if good.size else float("nan")
        linf = float(np.max(np.abs(good))) if good.size else float("nan")
        return cls(ScalarField(grid, scaled, mask), l2, linf, float(mask.mean()),
                   scale, std_errors)


# -- operators -----------------------------------------------------------------

def apply_Dc(g: tuple, v: ScalarField, dt: Optional[float], order: int = 2) -> ScalarField:
    """(d/dt + v d/dx) g for ``g = (g(t), g(t+dt))``.

    A single field (or ``dt=None``) is treated as static.
    """
    if isinstance(g, ScalarField):
        g = (g, g)
        dt = None
    ga, gb = g
    gm = 0.5 * (ga.values + gb.values)
    dgdt = 0.0 if dt is None else (gb.values - ga.values) / dt
    out = dgdt + v.values * _d1(gm, ga.grid.dx, order)
    return ScalarField(ga.grid, out, ~np.isfinite(out))


def apply_Ds(g: ScalarField, u: ScalarField, D: float, order: int = 2) -> ScalarField:
    """(u d/dx + D d^2/dx^2) g."""
    out = u.values * _d1(g.values, g.grid.dx, order) + D * _d2(g.values, g.grid.dx, order)
    return ScalarField(g.grid, out, ~np.isfinite(out))


def _floor_mask(pair: FieldSnapshotPair) -> np.ndarray:
    mask = np.zeros(pair.grid.n_points, dtype=bool)
    for r in pair.rho:
        rv = np.where(r.mask, 0.0, r.values)
        mask |= r.mask | (rv <= RHO_FLOOR * rv.max())
    return mask


def _span(mask, x):
    ok = ~mask
    if not ok.any():
        return 1.0
    return max(0.5 * (x[ok].max() - x[ok].min()), np.finfo(float).tiny)


def _force_scale(pair, mask, v, u):
    m = pair.params.mass
    ok = ~mask & np.isfinite(v) & np.isfinite(u)
    if not ok.any():
        return 1.0
    f = np.abs(pair.force.values[ok]).max()
    kin = m * (v[ok] ** 2 + u[ok] ** 2).max() / _span(mask, pair.grid.x)
    s = max(f, kin)
    return s if s > 0 else 1.0


def _dynamical_residual(pair, lam, order, friction=None, scale=None):
    m, D = pair.params.mass, pair.params.diffusion_D
    dx = pair.grid.dx
    v, u = pair.mean("v"), pair.mean("u")
    accel = (pair.rate("v") + v * _d1(v, dx, order)
             - lam * (u * _d1(u, dx, order) + D * _d2(u, dx, order)))
    total_force = pair.force.values.copy()
    if pair.radiative is not None:
        total_force = total_force + pair.radiative.values / pair.mean("rho")
    if friction is not None:
        total_force = total_force - m * friction * (v + u)
    resid = m * accel - total_force
    mask = _floor_mask(pair)
    if scale is None:
        scale = _force_scale(pair, mask | ~np.isfinite(resid), v, u)
    return ResidualReport.build(pair.grid, resid, mask, scale)


def residual_time_symmetric(pair: FieldSnapshotPair, order: int = 4,
                            scale: Optional[float] = None) -> ResidualReport:
    """Residual of m(dv/dt + v v' - u u' - D u'') - f (quantum branch).

    Scaled by max(|f|, m max(v^2 + u^2) / half-width of the valid region)
    unless ``scale`` is given.
    """
    return _dynamical_residual(pair, +1, order, scale=scale)


def residual_brownian(pair: FieldSnapshotPair, friction: Optional[float] = None,
                      order: int = 4, scale: Optional[float] = None) -> ResidualReport:
    """Residual of the lambda = -1 equation m(dv/dt + v v' + u u' + D u'') - f.

    With ``friction`` the drag -m*friction*(v + u) on the forward drift is
    added to the force, which is the overdamped stationary balance
    f = m*friction*u. The acceleration terms are then of relative order
    (omega/friction)^2 for a harmonic trap, which bounds the residual of an
    exact Ornstein-Uhlenbeck stationary state.
    """
    return _dynamical_residual(pair, -1, order, friction=friction, scale=scale)


def residual_continuity(pair: FieldSnapshotPair, order: int = 4,
                        scale: Optional[float] = None) -> ResidualReport:
    """Residual of d rho/dt + (rho v)'.

    The current is averaged over the two snapshots. Default scale is
    max(rho) * max(|u| + |v|) / half-width of the valid region.
    """
    dx = pair.grid.dx
    (ra, rb), (va, vb) = pair.rho, pair.v
    j = 0.5 * (ra.values * va.values + rb.values * vb.values)
    resid = pair.rate("rho") + _d1(j, dx, order)
    mask = _floor_mask(pair)
    if scale is None:
        ok = ~mask & np.isfinite(resid)
        v, u = pair.mean("v"), pair.mean("u")
        s = (pair.mean("rho")[ok].max() * (np.abs(u[ok]) + np.abs(v[ok])).max()
             / _span(mask, pair.grid.x)) if ok.any() else 1.0
        scale = s if s > 0 else 1.0
    return ResidualReport.build(pair.grid, resid, mask, scale)


def osmotic_relation_residual(rho: ScalarField, u: ScalarField, D: float,
                              order: int = 4) -> ResidualReport:
    """Pointwise u - D rho'/rho on nodes above the density floor (unscaled)."""
    r = rho.values
    rv = np.where(rho.mask, 0.0, r)
    mask = rho.mask | u.mask | (rv <= RHO_FLOOR * rv.max())
    with np.errstate(divide="ignore", invalid="ignore"):
        resid = u.values - D * _d1(r, rho.grid.dx, order) / r
    return ResidualReport.build(rho.grid, resid, mask)


# -- correlation tensor ------------------------------------------------------

def correlation_tensor(u: ScalarField, order: int = 4) -> ScalarField:
    """T = du/dx, the 1-D velocity-correlation tensor of the SED equation."""
    t = _d1(u.values, u.grid.dx, order)
    return ScalarField(u.grid, t, ~np.isfinite(t) | u.mask)


@dataclass(frozen=True, eq=False)
class TensorCheck:
    tensor: ScalarField
    report: ResidualReport
    estimate: Optional[BinnedEstimate] = None


def ensemble_tensor_estimate(ens: TrajectoryEnsemble, params: PhysicalParams,
                             bins, lag: int = 1, n_batches: int = 20,
                             min_count: int = 100) -> BinnedEstimate:
    """Binned T(x) from trajectories.

    SED ensembles (with velocities) use the local velocity variance directly:
    T = -(2m/hbar) (<xdot^2>_x - <xdot>_x^2).

    Position-only diffusion ensembles have no velocity; there the symmetric
    increment s = (x(t+h) - x(t-h)) / 2h has conditional variance
    D/h + D T + O(h), so T = (Var_x(s) - D/h) / D, Richardson-extrapolated
    from lags h and 2h. Note the opposite sign of the finite part compared
    with the smooth-velocity form.

    Standard errors are batch means over groups of trajectories.
    """
    n_batches = max(2, min(n_batches, ens.n_traj))
    groups = np.array_split(np.arange(ens.n_traj), n_batches)
    edges = np.asarray(bins, dtype=float)

    def tensor_for(rows):
        if ens.velocities is not None:
            xs = ens.positions[rows].ravel()
            vel = ens.velocities[rows].ravel()
            mean = bin_samples(xs, vel, edges, 1)
            sq = bin_samples(xs, vel**2, edges, 1)
            var = sq.values - mean.values**2
            return -(2 * params.mass / params.hbar) * var, mean.counts
        D = params.diffusion_D
        ests = []
        for k in (lag, 2 * lag):
            p = ens.positions[rows]
            now = p[:, k:-k]
            s = (p[:, 2 * k:] - p[:, :-2 * k]) / (2 * k * ens.dt)
            mean = bin_samples(now, s, edges, 1)
            sq = bin_samples(now, s * s, edges, 1)
            ests.append(((sq.values - mean.values**2) - D / (k * ens.dt)) / D)
            if k == lag:
                counts = mean.counts
        return 2 * ests[0] - ests[1], counts

    per_batch = []
    counts = np.zeros(edges.size - 1, dtype=int)
    for rows in groups:
        t, c = tensor_for(rows)
        per_batch.append(t)
        counts += c
    per_batch = np.array(per_batch)
    values = np.nanmean(per_batch, axis=0)
    se = np.nanstd(per_batch, axis=0, ddof=1) / np.sqrt(len(groups))
    low = counts < min_count
    values[low] = np.nan
    se[low] = np.nan
    return BinnedEstimate(0.5 * (edges[1:] + edges[:-1]), values, se, counts, min_count)


def correlation_tensor_check(pair: FieldSnapshotPair,
                             ensemble: Optional[TrajectoryEnsemble] = None,
                             bins=None, order: int = 4, **kw) -> TensorCheck:
    """Check T = u' two ways.

    Without an ensemble: the SED form m(dv/dt - T u - (hbar/2m) T' + v v') - f
    built from T is compared with the stochastic-mechanics residual; the
    difference is a pure discretization effect. With an ensemble: the binned
    trajectory estimate is compared with T interpolated to the bin centres,
    and the report carries the per-bin standard errors.
    """
    u_mean = ScalarField(pair.grid, pair.mean("u"), np.any([f.mask for f in pair.u], axis=0))
    T = correlation_tensor(u_mean, order)
    if ensemble is None:
        p = pair.params
        dx = pair.grid.dx
        v = pair.mean("v")
        u = u_mean.values
        h = p.hbar
        sed_form = p.mass * (pair.rate("v") - T.values * u
                             - h / (2 * p.mass) * _d1(T.values, dx, order)
                             + v * _d1(v, dx, order)) - pair.force.values
        sqm_form = p.mass * (pair.rate("v") + v * _d1(v, dx, order)
                             - u * _d1(u, dx, order)
                             - p.diffusion_D * _d2(u, dx, order)) - pair.force.values
        mask = _floor_mask(pair)
        scale = _force_scale(pair, mask | ~np.isfinite(sed_form - sqm_form), v, u)
        return TensorCheck(T, ResidualReport.build(pair.grid, sed_form - sqm_form, mask, scale))

    if bins is None or np.size(bins) < 9:
        raise ValueError("an ensemble comparison needs at least 8 bins")
    est = ensemble_tensor_estimate(ensemble, pair.params, bins, **kw)
    ok = T.valid
    T_at = np.interp(est.bin_centers, pair.grid.x[ok], T.values[ok])
    diff = est.values - T_at
    centers = est.bin_centers
    bin_grid = Grid1D(centers[0], centers[-1], centers.size)
    report = ResidualReport.build(bin_grid, diff, ~est.valid, 1.0, est.std_errors)
    return TensorCheck(T, report, est)
