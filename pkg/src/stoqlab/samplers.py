"""
Trajectory ensembles for both brands of diffusion and the kinematic
estimators that recover v, u and D from raw positions.

Quantum branch (lambda = +1): Euler-Maruyama with forward drift b = v + u,
    x <- x + (v + u) dt + sqrt(2 D dt) xi
Brownian branch (lambda = -1, overdamped):
    x <- x + f/(m gamma) dt + sqrt(2 D dt) xi

b = v + u is the forward drift whose Fokker-Planck stationary density obeys
u = D rho'/rho; it is a derived choice, not a quoted update rule.

Trajectory i draws everything (initial uniform, then its Gaussian
increments) from stream ``seed.child(i)``, so results do not depend on how
trajectories are split across workers.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .core import Grid1D, PhysicalParams, RandomStreamSpec, ScalarField, worker_count

__all__ = [
    "TrajectoryEnsemble",
    "BinnedEstimate",
    "nelson_sample",
    "brownian_sample",
    "estimate_flux_velocity",
    "estimate_osmotic_velocity",
    "estimate_diffusion",
    "bin_samples",
    "histogram_l1",
    "grid_cdf",
    "write_ensemble_csv",
    "write_binned_csv",
]

MIN_OCCUPANCY = 100
EXIT_FLAG_FRACTION = 0.01
_BLOCK = 512


@dataclass(frozen=True, eq=False)
class TrajectoryEnsemble:
    """Recorded positions, shape ``(n_traj, n_steps)``, spaced ``dt`` apart.

    ``velocities`` is only present for SED ensembles, whose trajectories are
    differentiable.
    """

    positions: np.ndarray
    dt: float
    seed: RandomStreamSpec
    process_tag: str
    t0: float = 0.0
    velocities: Optional[np.ndarray] = None
    exit_fraction: float = 0.0
    flags: Tuple[str, ...] = ()

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim != 2 or pos.shape[0] < 1 or pos.shape[1] < 2:
            raise ValueError(f"positions must be (n_traj>=1, n_steps>=2), got {pos.shape}")
        if not np.isfinite(pos).all():
            raise ValueError("trajectory positions must be finite")
        if self.process_tag not in ("quantum", "brownian", "sed"):
            raise ValueError(f"unknown process_tag {self.process_tag!r}")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @property
    def n_traj(self) -> int:
        return self.positions.shape[0]

    @property
    def n_steps(self) -> int:
        return self.positions.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps)

    @property
    def flagged(self) -> bool:
        return bool(self.flags)


@dataclass(frozen=True, eq=False)
class BinnedEstimate:
    """Per-bin mean of a sample; bins under the occupancy minimum hold nan."""

    bin_centers: np.ndarray
    values: np.ndarray
    std_errors: np.ndarray
    counts: np.ndarray
    min_count: int = MIN_OCCUPANCY

    @property
    def valid(self) -> np.ndarray:
        return self.counts >= self.min_count

    def fit_line(self):
        """Weighted least-squares line through the valid bins.

        Returns ``(slope, intercept, slope_std_error)``.
        """
        ok = self.valid
        x, y, s = self.bin_centers[ok], self.values[ok], self.std_errors[ok]
        w = 1.0 / s**2
        A = np.stack([x, np.ones_like(x)], axis=1)
        cov = np.linalg.inv(A.T @ (A * w[:, None]))
        slope, intercept = cov @ (A.T @ (w * y))
        return float(slope), float(intercept), float(np.sqrt(cov[0, 0]))


# -- sampling engine ---------------------------------------------------------

def _fill_masked(f: ScalarField) -> np.ndarray:
    # masked drift nodes are bridged linearly; constant beyond the outermost valid node
    ok = f.valid
    if ok.all():
        return np.array(f.values)
    x = f.grid.x
    return np.interp(x, x[ok], f.values[ok])


def grid_cdf(rho: ScalarField) -> np.ndarray:
    """Cumulative trapezoidal integral of ``rho`` normalized to end at 1."""
    r = np.where(rho.valid, rho.values, 0.0)
    c = np.concatenate([[0.0], np.cumsum(0.5 * (r[1:] + r[:-1]) * rho.grid.dx)])
    return c / c[-1]


class _Drift:
    """Drift b(x, t) by linear interpolation in x (and in t between snapshots)."""

    def __init__(self, grid: Grid1D, tables, times=None):
        self.x = grid.x
        self.tables = [np.asarray(t, dtype=float) for t in tables]
        self.times = None if times is None else np.asarray(times, dtype=float)

    def __call__(self, pos, t):
        if self.times is None:
            return np.interp(pos, self.x, self.tables[0])
        j = int(np.clip(np.searchsorted(self.times, t, side="right") - 1,
                        0, len(self.times) - 2))
        t0, t1 = self.times[j], self.times[j + 1]
        a = np.clip((t - t0) / (t1 - t0), 0.0, 1.0)
        b0 = np.interp(pos, self.x, self.tables[j])
        b1 = np.interp(pos, self.x, self.tables[j + 1])
        return (1 - a) * b0 + a * b1


def _run_block(ids, drift, D, dt, n_steps, every, grid, init, seed, t0):
    n_total = (n_steps - 1) * every
    draws = []
    x = np.empty(len(ids))
    for j, i in enumerate(ids):
        gen = seed.child(int(i)).generator()
        x[j] = init(gen)
        draws.append(gen.standard_normal(n_total))
    noise = np.ascontiguousarray(np.array(draws).T) if n_total else None
    sig = np.sqrt(2.0 * D * dt)
    lo, hi = grid.x_min, grid.x_max
    out = np.empty((len(ids), n_steps))
    out[:, 0] = x
    exited = np.zeros(len(ids), dtype=bool)
    t = t0
    for s in range(n_total):
        x = x + drift(x, t) * dt + sig * noise[s]
        t = t0 + (s + 1) * dt
        below, above = x < lo, x > hi
        if below.any() or above.any():
            exited |= below | above
            x = np.where(below, 2 * lo - x, x)
            x = np.where(above, 2 * hi - x, x)
            x = np.clip(x, lo, hi)
        if (s + 1) % every == 0:
            out[:, (s + 1) // every] = x
    return out, exited


def _simulate(drift, D, dt, n_traj, n_steps, seed, grid, init, tag,
              record_every=1, t0=0.0) -> TrajectoryEnsemble:
    if n_traj < 1 or n_steps < 2:
        raise ValueError("need n_traj >= 1 and n_steps >= 2")
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    if isinstance(seed, int):
        seed = RandomStreamSpec(seed)
    blocks = [np.arange(i, min(i + _BLOCK, n_traj)) for i in range(0, n_traj, _BLOCK)]
    args = (drift, D, dt, n_steps, record_every, grid, init, seed, t0)
    workers = min(worker_count(), len(blocks))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda b: _run_block(b, *args), blocks))
    else:
        results = [_run_block(b, *args) for b in blocks]
    pos = np.concatenate([r[0] for r in results])
    exited = np.concatenate([r[1] for r in results])
    frac = float(exited.mean())
    flags = (f"exit fraction {frac:.3%} exceeds {EXIT_FLAG_FRACTION:.0%}",) \
        if frac > EXIT_FLAG_FRACTION else ()
    return TrajectoryEnsemble(pos, dt * record_every, seed, tag, t0,
                              exit_fraction=frac, flags=flags)


def _initializer(grid, rho0=None, x0=None):
    # one uniform is consumed either way so the increments sit at the same
    # stream offset regardless of how the start is chosen
    if rho0 is not None:
        cdf = grid_cdf(rho0)
        xs = grid.x

        def draw(gen):
            return float(np.interp(gen.random(), cdf, xs))
    else:
        value = 0.0 if x0 is None else float(x0)

        def draw(gen):
            gen.random()
            return value
    return draw


FieldsArg = Union[Tuple[ScalarField, ScalarField],
                  Sequence[Tuple[float, ScalarField, ScalarField]]]


def nelson_sample(fields: FieldsArg, params: PhysicalParams, n_traj: int,
                  dt: float, n_steps: int, seed, rho0: Optional[ScalarField] = None,
                  x0: Optional[float] = None, record_every: int = 1,
                  t0: float = 0.0) -> TrajectoryEnsemble:
    """Sample the quantum-branch process driven by flux and osmotic velocities.

    Parameters
    ----------
    fields : (v, u) or sequence of (t, v, u)
        Stationary velocity fields, or time-indexed snapshots interpolated
        linearly in time.
    rho0 : ScalarField, optional
        Initial density, sampled by inverse CDF on the grid. Without it all
        trajectories start at ``x0`` (default 0).
    n_steps : int
        Number of recorded positions; ``record_every`` integrator steps of
        size ``dt`` separate consecutive records.
    """
    if fields and isinstance(fields[0], ScalarField):
        v, u = fields
        grid = v.grid
        drift = _Drift(grid, [_fill_masked(v) + _fill_masked(u)])
    else:
        grid = fields[0][1].grid
        drift = _Drift(grid, [_fill_masked(v) + _fill_masked(u) for _, v, u in fields],
                       [t for t, _, _ in fields])
    return _simulate(drift, params.diffusion_D, dt, n_traj, n_steps, seed, grid,
                     _initializer(grid, rho0, x0), "quantum", record_every, t0)


def brownian_sample(force: ScalarField, friction: float, D: float, n_traj: int,
                    dt: float, n_steps: int, seed, params: PhysicalParams = PhysicalParams(),
                    rho0: Optional[ScalarField] = None, x0: Optional[float] = None,
                    record_every: int = 1) -> TrajectoryEnsemble:
    """Overdamped Langevin ensemble with mobility 1/(m * friction)."""
    if not friction > 0:
        raise ValueError(f"friction must be > 0, got {friction}")
    if D < 0:
        raise ValueError(f"D must be >= 0, got {D}")
    drift = _Drift(force.grid, [_fill_masked(force) / (params.mass * friction)])
    return _simulate(drift, D, dt, n_traj, n_steps, seed, force.grid,
                     _initializer(force.grid, rho0, x0), "brownian", record_every)


# -- estimators ----------------------------------------------------------------

def _edges(bins, samples):
    if np.ndim(bins) == 0:
        lo, hi = np.percentile(samples, [0.5, 99.5])
        return np.linspace(lo, hi, int(bins) + 1)
    return np.asarray(bins, dtype=float)


def bin_samples(x, values, bins, min_count=MIN_OCCUPANCY) -> BinnedEstimate:
    """Mean of ``values`` binned by ``x``; standard error = std/sqrt(count)."""
    x = np.ravel(x)
    values = np.ravel(values)
    edges = _edges(bins, x)
    idx = np.digitize(x, edges) - 1
    nb = edges.size - 1
    inside = (idx >= 0) & (idx < nb)
    idx, vals = idx[inside], values[inside]
    counts = np.bincount(idx, minlength=nb)
    s1 = np.bincount(idx, vals, minlength=nb)
    s2 = np.bincount(idx, vals * vals, minlength=nb)
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = s1 / counts
        var = (s2 - counts * mean**2) / (counts - 1)
        se = np.sqrt(np.clip(var, 0.0, None) / counts)
    low = counts < min_count
    mean[low] = np.nan
    se[low] = np.nan
    return BinnedEstimate(0.5 * (edges[1:] + edges[:-1]), mean, se, counts, min_count)


def _triplets(ens: TrajectoryEnsemble, lag: int, steps):
    if lag < 1 or 2 * lag >= ens.n_steps:
        raise ValueError(f"lag {lag} incompatible with {ens.n_steps} recorded steps")
    if steps is None:
        steps = np.arange(lag, ens.n_steps - lag)
    steps = np.asarray(steps)
    if steps.min() < lag or steps.max() >= ens.n_steps - lag:
        raise ValueError("requested steps too close to the ends of the record")
    p = ens.positions
    return p[:, steps - lag], p[:, steps], p[:, steps + lag]


def estimate_flux_velocity(ens: TrajectoryEnsemble, bins=40, lag: int = 1,
                           steps=None, min_count=MIN_OCCUPANCY) -> BinnedEstimate:
    """Binned (x(t+h) - x(t-h)) / 2h, with h = lag * ens.dt, binned by x(t)."""
    back, now, fwd = _triplets(ens, lag, steps)
    h = lag * ens.dt
    return bin_samples(now, (fwd - back) / (2 * h), bins, min_count)


def estimate_osmotic_velocity(ens: TrajectoryEnsemble, bins=40, lag: int = 1,
                              steps=None, min_count=MIN_OCCUPANCY) -> BinnedEstimate:
    """Binned (x(t+h) + x(t-h) - 2x(t)) / 2h, binned by x(t).

    For an Ornstein-Uhlenbeck process with rate k the estimate carries the
    factor (1 - exp(-k h)) / (k h), i.e. a relative bias of about k h / 2.
    """
    back, now, fwd = _triplets(ens, lag, steps)
    h = lag * ens.dt
    return bin_samples(now, (fwd + back - 2 * now) / (2 * h), bins, min_count)


def estimate_diffusion(ens: TrajectoryEnsemble, lag: int = 1) -> float:
    """Mean squared increment over 2h; biased upward by about <b^2> h / 2."""
    p = ens.positions
    inc = p[:, lag:] - p[:, :-lag]
    return float(np.mean(inc**2) / (2 * lag * ens.dt))


def histogram_l1(samples, cdf, edges) -> float:
    """Sum over bins of |empirical - exact| probability.

    ``cdf`` maps bin edges to cumulative probability; mass outside the
    edges is counted as its own bin on each side.
    """
    samples = np.ravel(samples)
    edges = np.asarray(edges, dtype=float)
    counts, _ = np.histogram(samples, edges)
    emp = counts / samples.size
    c = np.asarray(cdf(edges), dtype=float)
    exact = np.diff(c)
    outside_emp = 1.0 - emp.sum()
    outside_exact = c[0] + (1.0 - c[-1])
    return float(np.abs(emp - exact).sum() + abs(outside_emp - outside_exact))


def write_ensemble_csv(path, ens: TrajectoryEnsemble) -> None:
    """``traj_id,step,t,x`` one row per recorded position."""
    times = ens.times
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["traj_id", "step", "t", "x"])
        for i, row in enumerate(ens.positions):
            for s, (t, x) in enumerate(zip(times, row)):
                w.writerow([i, s, f"{t:.17g}", f"{x:.17g}"])


def write_binned_csv(path, est: BinnedEstimate) -> None:
    """``x,value,std_err,count``; withheld bins are written with nan."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "value", "std_err", "count"])
        for x, v, s, c in zip(est.bin_centers, est.values, est.std_errors, est.counts):
            w.writerow([f"{x:.17g}", f"{v:.17g}", f"{s:.17g}", int(c)])
