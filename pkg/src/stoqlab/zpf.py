"""
Zero-point field synthesis, the Braffort-Marshall oscillator and its
power balance.

Field model
-----------
One Cartesian component of the field is a sum of cosines at half-integer
frequencies omega_k = (k - 1/2) d_omega, k = 1..n_modes, with fixed
amplitudes sqrt(2 S(omega_k) d_omega) and independent uniform phases,

    S(omega) = (2 hbar / (3 pi c^3)) omega^3 ,

so that <E(t) E(t')> is the mode-sum version of

    phi(t) = (2 hbar / (3 pi c^3)) int_0^omega_c omega^3 cos(omega t) d omega .

The overall factor is pinned by the resonance line-shape integral, which has
to return hbar/(2 m omega0) for the oscillator driven by this field.

Oscillator
----------
m x'' = -m omega0^2 x + m tau x''' + e E(t) is integrated in its order-tau
reduced form x'' = -omega0^2 x - Gamma x' + (e/m) E(t), Gamma = tau omega0^2
(x''' ~ -omega0^2 x' near resonance); the third-order form has runaway
solutions. The step is the trapezoidal (Cayley) rule, which conserves the
oscillator energy exactly when Gamma = 0 and satisfies the discrete energy
identity H_{n+1} - H_n = dt (e E_mid v_mid - m Gamma v_mid^2).
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import scipy.fft as sfft
import scipy.integrate as sint
import scipy.signal as ssig

from .core import PhysicalParams, RandomStreamSpec, worker_count
from .samplers import TrajectoryEnsemble

__all__ = [
    "PreconditionError",
    "ZpfSpec",
    "ZpfRealization",
    "FieldSamples",
    "SedTrajectory",
    "BalanceReport",
    "SedRunSummary",
    "spectral_density",
    "covariance_phi",
    "mode_covariance",
    "commensurate_spec",
    "commensurate_dt",
    "synthesize",
    "line_shape_x2",
    "line_shape_xdot2",
    "sed_integrate",
    "energy_trend_z",
    "check_sed_preconditions",
    "energy_balance",
    "run_sed_ensemble",
    "sed_sample_ensemble",
    "fix_diffusion_constant",
    "write_trajectory_csv",
]


class PreconditionError(ValueError):
    """A run was requested outside the regime the integrator is valid for."""


@dataclass(frozen=True)
class ZpfSpec:
    omega_cutoff: float
    n_modes: int
    seed: RandomStreamSpec = RandomStreamSpec(0)
    hbar: float = 1.0
    light_speed: float = 1.0

    def __post_init__(self):
        if not self.omega_cutoff > 0:
            raise ValueError(f"omega_cutoff must be > 0, got {self.omega_cutoff}")
        if int(self.n_modes) != self.n_modes or self.n_modes < 100:
            raise ValueError(f"n_modes must be an integer >= 100, got {self.n_modes}")

    @property
    def d_omega(self) -> float:
        return self.omega_cutoff / self.n_modes

    @property
    def frequencies(self) -> np.ndarray:
        return (np.arange(1, self.n_modes + 1) - 0.5) * self.d_omega

    @property
    def prefactor(self) -> float:
        return 2.0 * self.hbar / (3.0 * math.pi * self.light_speed**3)

    @property
    def recurrence_time(self) -> float:
        """Longest duration free of the discrete spectrum's recurrence (pi/d_omega)."""
        return math.pi / self.d_omega


def spectral_density(omega, spec: ZpfSpec):
    return spec.prefactor * np.asarray(omega, dtype=float) ** 3


@dataclass(frozen=True, eq=False)
class ZpfRealization:
    amplitudes: np.ndarray
    phases: np.ndarray
    spec: ZpfSpec

    @classmethod
    def draw(cls, spec: ZpfSpec, stream_index: Optional[int] = None) -> "ZpfRealization":
        """Random phases from ``spec.seed`` (or its child ``stream_index``)."""
        stream = spec.seed if stream_index is None else spec.seed.child(stream_index)
        phases = stream.generator().uniform(0.0, 2.0 * math.pi, spec.n_modes)
        amps = np.sqrt(2.0 * spectral_density(spec.frequencies, spec) * spec.d_omega)
        return cls(amps, phases, spec)

    def __call__(self, t) -> np.ndarray:
        """Direct mode sum at arbitrary times (O(n_modes * len(t)))."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        w = self.spec.frequencies
        out = np.empty(t.size)
        chunk = max(1, 2_000_000 // w.size)
        for i in range(0, t.size, chunk):
            tt = t[i:i + chunk, None]
            out[i:i + chunk] = np.cos(tt * w + self.phases) @ self.amplitudes
        return out

    def sample(self, n_samples: int, dt: float) -> np.ndarray:
        """E at t = 0, dt, ..., (n_samples-1) dt; FFT when dt fits the mode grid."""
        n_fft = _fft_length(self.spec, dt)
        if n_fft is None or n_fft < n_samples or n_fft <= self.spec.n_modes:
            return self(np.arange(n_samples) * dt)
        c = np.zeros(n_fft, dtype=complex)
        c[1:self.spec.n_modes + 1] = self.amplitudes * np.exp(1j * self.phases)
        # modes sit at (k - 1/2) d_omega; the half-step shift is a phase ramp
        z = sfft.ifft(c, overwrite_x=True)[:n_samples] * n_fft
        j = np.arange(n_samples)
        return (z * np.exp(-1j * math.pi * j / n_fft)).real


def _fft_length(spec: ZpfSpec, dt: float) -> Optional[int]:
    n = 2.0 * math.pi / (spec.d_omega * dt)
    r = round(n)
    return int(r) if abs(n - r) <= 1e-9 * n else None


def covariance_phi(t, spec: ZpfSpec):
    """Closed form of the cut-off covariance integral.

    With a = omega_c t,
    int_0^wc w^3 cos(w t) dw = wc^4 [sin a/a + 3 cos a/a^2 - 6 sin a/a^3 - 6 (cos a - 1)/a^4].
    The bracket cancels catastrophically for small a, so |a| < 1 uses the
    series sum_n (-1)^n a^(2n) / ((2n)! (2n + 4)).
    """
    t = np.asarray(t, dtype=float)
    wc = spec.omega_cutoff
    a = np.abs(t) * wc
    out = np.empty_like(a)
    small = a < 1.0
    if small.any():
        a2 = a[small] ** 2
        term = np.ones_like(a2)
        acc = term / 4.0
        for n in range(1, 13):
            term = -term * a2 / ((2 * n - 1) * (2 * n))
            acc = acc + term / (2 * n + 4)
        out[small] = acc
    big = ~small
    if big.any():
        ab = a[big]
        s, c = np.sin(ab), np.cos(ab)
        out[big] = s / ab + 3 * c / ab**2 - 6 * s / ab**3 - 6 * (c - 1) / ab**4
    res = spec.prefactor * wc**4 * out
    return res if res.ndim else float(res)


def mode_covariance(t, spec: ZpfSpec):
    """Exact covariance of the discrete mode sum (midpoint rule of phi)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    w = spec.frequencies
    weights = spectral_density(w, spec) * spec.d_omega
    return np.cos(np.outer(t, w)) @ weights


def commensurate_spec(omega_cutoff: float, duration: float, dt_max: float,
                      seed: RandomStreamSpec = RandomStreamSpec(0), hbar: float = 1.0,
                      light_speed: float = 1.0, min_modes: int = 100) -> Tuple[ZpfSpec, float]:
    """Mode grid and time step that allow exact FFT synthesis over ``duration``.

    Picks n_modes so that duration * d_omega <= pi, then the largest
    dt <= dt_max with 2 pi / (d_omega dt) a fast FFT length.
    Returns ``(spec, dt)``.
    """
    n_modes = max(min_modes, math.ceil(omega_cutoff * duration / math.pi))
    spec = ZpfSpec(omega_cutoff, n_modes, seed, hbar, light_speed)
    return spec, commensurate_dt(spec, dt_max)


def commensurate_dt(spec: ZpfSpec, dt_max: float) -> float:
    """Largest dt <= dt_max for which FFT synthesis on ``spec`` is exact."""
    n_fft = sfft.next_fast_len(math.ceil(2 * math.pi / (spec.d_omega * dt_max)))
    return 2 * math.pi / (n_fft * spec.d_omega)


@dataclass(frozen=True, eq=False)
class FieldSamples:
    times: np.ndarray
    values: np.ndarray
    flags: Tuple[str, ...] = ()


def synthesize(spec: ZpfSpec, duration: float, dt: float,
               stream_index: Optional[int] = None) -> FieldSamples:
    """Sampled E(t) of one realization on t = 0, dt, ..., <= duration.

    Durations beyond pi/d_omega are flagged: the discrete spectrum then
    starts to reproduce itself.
    """
    n = int(math.floor(duration / dt + 1e-9)) + 1
    real = ZpfRealization.draw(spec, stream_index)
    flags = ()
    if duration * spec.d_omega > math.pi * (1 + 1e-12):
        flags = (f"duration*d_omega = {duration * spec.d_omega:.4g} > pi "
                 "(recurrence of the discrete spectrum)",)
    return FieldSamples(np.arange(n) * dt, real.sample(n, dt), flags)


def _line_shape(params: PhysicalParams, omega0: float, spec: ZpfSpec, power: int) -> float:
    gamma = params.damping_rate(omega0)
    pref = (params.charge / params.mass) ** 2

    def f(w):
        return w**power * spectral_density(w, spec) / ((omega0**2 - w**2) ** 2 + gamma**2 * w**2)

    wc = spec.omega_cutoff
    pts = sorted({0.0, wc, *[min(max(omega0 + k * gamma, 0.0), wc)
                             for k in (-200, -20, -2, 0, 2, 20, 200)]})
    total = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        if b > a:
            total += sint.quad(f, a, b, limit=400, epsabs=0, epsrel=1e-12)[0]
    return pref * total


def line_shape_x2(params: PhysicalParams, omega0: float, spec: ZpfSpec) -> float:
    """Stationary <x^2> of the damped oscillator driven by the cut-off field.

    (e/m)^2 int_0^wc S(w) / ((w0^2 - w^2)^2 + Gamma^2 w^2) dw, by adaptive
    quadrature split around the resonance.
    """
    return _line_shape(params, omega0, spec, 0)


def line_shape_xdot2(params: PhysicalParams, omega0: float, spec: ZpfSpec) -> float:
    """Stationary <xdot^2>, the same integral with an extra w^2.

    Besides the resonant hbar omega0 / 2m it contains an off-resonant tail
    of about (e/m)^2 (2 hbar / 3 pi c^3) wc^2 / 2 = hbar Gamma wc^2 / (2 pi m omega0^2),
    so equipartition with omega0^2 <x^2> only holds when that tail is small.
    """
    return _line_shape(params, omega0, spec, 2)


# -- integrator ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SedTrajectory:
    times: np.ndarray
    x: np.ndarray
    xdot: np.ndarray
    forcing: Optional[np.ndarray]
    params: PhysicalParams
    omega0: float
    field: Optional[ZpfRealization]
    flags: Tuple[str, ...] = ()

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def gamma(self) -> float:
        return self.params.damping_rate(self.omega0)

    def energy(self) -> np.ndarray:
        m = self.params.mass
        return 0.5 * m * self.xdot**2 + 0.5 * m * self.omega0**2 * self.x**2


def _trapezoid_system(omega0, gamma, dt, coupling):
    A = np.array([[0.0, 1.0], [-omega0**2, -gamma]])
    I = np.eye(2)
    M = np.linalg.inv(I - 0.5 * dt * A)
    Ad = M @ (I + 0.5 * dt * A)
    Bd = M @ np.array([0.0, 0.5 * dt * coupling])
    return Ad, Bd


def _homogeneous(Ad, z0, n):
    if not z0.any():
        return np.zeros((2, n))
    lam, P = np.linalg.eig(Ad)
    c = np.linalg.solve(P, z0.astype(complex))
    powers = np.exp(np.outer(np.log(lam.astype(complex)), np.arange(n)))  # (2, n)
    return (P @ (c[:, None] * powers)).real


def _forced(Ad, Bd, w):
    num, den = ssig.ss2tf(Ad, Bd[:, None], np.eye(2), np.zeros((2, 1)))
    return np.stack([ssig.lfilter(num[i], den, w) for i in range(2)])


def _check_regime(gamma, omega0, duration, dt, driven):
    problems = []
    if gamma / omega0 > 0.1:
        problems.append(f"Gamma/omega0 = {gamma / omega0:.3g} > 0.1 "
                        "(order-tau reduction invalid)")
    if dt > 1e-2 / omega0 * (1 + 1e-9):
        problems.append(f"dt = {dt:.3g} > 1e-2/omega0")
    if driven and gamma > 0 and duration < 20.0 / gamma * (1 - 1e-9):
        problems.append(f"duration = {duration:.4g} < 20/Gamma = {20 / gamma:.4g}")
    if problems:
        raise PreconditionError("; ".join(problems))


def check_sed_preconditions(params: PhysicalParams, omega0: float, duration: float,
                            dt: float, driven: bool = True) -> None:
    """Raise :class:`PreconditionError` outside the integrator's regime."""
    _check_regime(params.damping_rate(omega0), omega0, duration, dt, driven)


def sed_integrate(params: PhysicalParams, omega0: float, field: Optional[ZpfRealization],
                  duration: float, dt: float, x0: float = 0.0, v0: float = 0.0,
                  gamma: Optional[float] = None, check: bool = True) -> SedTrajectory:
    """Integrate the reduced Braffort-Marshall oscillator.

    ``field=None`` switches the zero-point field off (e E = 0) while keeping
    the damping; ``gamma`` overrides tau*omega0^2 for such undriven runs.
    """
    driven = field is not None
    if gamma is None:
        gamma = params.damping_rate(omega0)
    if check:
        _check_regime(gamma, omega0, duration, dt, driven)
    n = int(math.floor(duration / dt + 1e-9)) + 1
    times = np.arange(n) * dt
    coupling = params.charge / params.mass
    Ad, Bd = _trapezoid_system(omega0, gamma, dt, coupling)
    z = _homogeneous(Ad, np.array([x0, v0], dtype=float), n)
    forcing = None
    if driven:
        forcing = field.sample(n, dt)
        w = np.empty(n)
        w[:-1] = forcing[:-1] + forcing[1:]
        w[-1] = 0.0
        z = z + _forced(Ad, Bd, w)
    traj = SedTrajectory(times, z[0], z[1], forcing, params, omega0, field)
    flags = _trend_flag(energy_trend_z(traj)) if driven and gamma > 0 else ()
    return SedTrajectory(times, z[0], z[1], forcing, params, omega0, field, flags)


def energy_trend_z(traj: SedTrajectory) -> float:
    """Standardized energy trend over the last half of a driven run.

    The statistic is the difference of the mean energy over the two
    quarters making up the last half. Its standard error uses the
    stationary correlation time 1/Gamma of the oscillator energy: a window
    of length T averages the variance down by 2/(Gamma T).
    """
    half = traj.x.size // 2
    e = traj.energy()[half:]
    q = e.size // 2
    if q < 2:
        return 0.0
    window = q * traj.dt
    se = float(e.std()) * math.sqrt(2 * max(2.0 / (traj.gamma * window), 1.0 / q))
    return float(e[q:].mean() - e[:q].mean()) / se if se > 0 else 0.0


def _trend_flag(z: float, what: str = "energy trend over last half"):
    if abs(z) > 3.0:
        return (f"non-stationary: {what} at {z:+.2f} sigma (limit 3)",)
    return ()


# -- diagnostics -----------------------------------------------------------------

@dataclass(frozen=True)
class BalanceReport:
    P_abs: float
    P_rad: float
    imbalance: float
    x2_mean: float
    xdot2_mean: float
    D_inferred: float

    def to_dict(self):
        return {"P_abs": self.P_abs, "P_rad": self.P_rad, "imbalance": self.imbalance,
                "x2_mean": self.x2_mean, "D_inferred": self.D_inferred}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _window(traj: SedTrajectory, window):
    t0, t1 = (0.0, traj.times[-1]) if window is None else window
    i0 = int(np.searchsorted(traj.times, t0 - 1e-12))
    i1 = int(np.searchsorted(traj.times, t1 + 1e-12, side="right"))
    return slice(i0, i1)


def energy_balance(traj: SedTrajectory, window=None) -> BalanceReport:
    """Absorbed vs radiated power over a time window.

    P_abs = <e E v>, P_rad = m Gamma <v^2>, both time averages of step
    midpoint values so that their difference is exactly the energy change
    over the window divided by its length.
    """
    sl = _window(traj, window)
    v = traj.xdot[sl]
    x = traj.x[sl]
    vm = 0.5 * (v[1:] + v[:-1])
    p = traj.params
    P_rad = p.mass * traj.gamma * float(np.mean(vm**2))
    if traj.forcing is None:
        P_abs = 0.0
    else:
        E = traj.forcing[sl]
        P_abs = p.charge * float(np.mean(0.5 * (E[1:] + E[:-1]) * vm))
    x2 = float(np.mean(x**2))
    imbalance = (P_abs - P_rad) / P_rad if P_rad > 0 else float("nan")
    return BalanceReport(P_abs, P_rad, imbalance, x2, float(np.mean(v**2)),
                         traj.omega0 * x2)


@dataclass(frozen=True, eq=False)
class SedRunSummary:
    """Per-realization reductions of an SED ensemble run."""

    params: PhysicalParams
    omega0: float
    spec: ZpfSpec
    dt: float
    duration: float
    window: Tuple[float, float]
    early_window: Tuple[float, float]
    x2: np.ndarray
    xdot2: np.ndarray
    P_abs: np.ndarray
    P_rad: np.ndarray
    early_P_abs: np.ndarray
    early_P_rad: np.ndarray
    hist_edges: np.ndarray
    hist_counts: np.ndarray
    trend_z: np.ndarray
    flags: Tuple[str, ...] = ()

    @property
    def n_realizations(self) -> int:
        return self.x2.size

    def mean_x2(self) -> Tuple[float, float]:
        return float(self.x2.mean()), float(self.x2.std(ddof=1) / math.sqrt(self.x2.size))

    def mean_xdot2(self) -> Tuple[float, float]:
        return float(self.xdot2.mean()), float(self.xdot2.std(ddof=1) / math.sqrt(self.xdot2.size))

    def balance(self) -> BalanceReport:
        """Ensemble-averaged stationary balance."""
        pa, pr = float(self.P_abs.mean()), float(self.P_rad.mean())
        x2 = float(self.x2.mean())
        return BalanceReport(pa, pr, (pa - pr) / pr, x2, float(self.xdot2.mean()),
                             self.omega0 * x2)

    def early_balance(self) -> Tuple[float, float]:
        return float(self.early_P_abs.mean()), float(self.early_P_rad.mean())

    def histogram(self) -> np.ndarray:
        """Pooled bin probabilities (mass outside the edges is excluded from bins)."""
        total = self.hist_counts.sum(axis=0)
        return total / self.samples_per_realization / self.n_realizations

    @property
    def samples_per_realization(self) -> int:
        i0 = int(round(self.window[0] / self.dt))
        i1 = int(round(self.window[1] / self.dt))
        return i1 - i0 + 1


def run_sed_ensemble(params: PhysicalParams, omega0: float, spec: ZpfSpec,
                     n_realizations: int, duration: float, dt: float,
                     burn_in: Optional[float] = None, early: Optional[float] = None,
                     hist_edges=None) -> SedRunSummary:
    """Run independent realizations (stream i for realization i) and reduce each.

    The stationary window is [burn_in, duration], default burn_in = 10/Gamma;
    the early window is [0, early], default 1/Gamma.
    """
    gamma = params.damping_rate(omega0)
    check_sed_preconditions(params, omega0, duration, dt)
    burn_in = 10.0 / gamma if burn_in is None else burn_in
    early = 1.0 / gamma if early is None else early
    if hist_edges is None:
        s = math.sqrt(params.hbar / (2 * params.mass * omega0))
        hist_edges = np.linspace(-3 * s, 3 * s, 13)
    hist_edges = np.asarray(hist_edges, dtype=float)

    def one(i):
        traj = sed_integrate(params, omega0, ZpfRealization.draw(spec, i), duration, dt)
        st = energy_balance(traj, (burn_in, duration))
        ea = energy_balance(traj, (0.0, early))
        counts, _ = np.histogram(traj.x[_window(traj, (burn_in, duration))], hist_edges)
        return st, ea, counts, energy_trend_z(traj)

    workers = min(worker_count(), n_realizations)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, range(n_realizations)))
    else:
        results = [one(i) for i in range(n_realizations)]
    trend = np.array([r[3] for r in results])
    # single realizations exceed 3 sigma by chance; the ensemble flag pools them
    flags = _trend_flag(float(trend.mean() * math.sqrt(trend.size)), "pooled energy trend")
    return SedRunSummary(
        params, omega0, spec, dt, duration, (burn_in, duration), (0.0, early),
        x2=np.array([r[0].x2_mean for r in results]),
        xdot2=np.array([r[0].xdot2_mean for r in results]),
        P_abs=np.array([r[0].P_abs for r in results]),
        P_rad=np.array([r[0].P_rad for r in results]),
        early_P_abs=np.array([r[1].P_abs for r in results]),
        early_P_rad=np.array([r[1].P_rad for r in results]),
        hist_edges=hist_edges,
        hist_counts=np.array([r[2] for r in results]),
        trend_z=trend,
        flags=flags,
    )


def sed_sample_ensemble(params: PhysicalParams, omega0: float, spec: ZpfSpec,
                        n_realizations: int, duration: float, dt: float,
                        burn_in: Optional[float] = None, stride: int = 10) -> TrajectoryEnsemble:
    """Stationary SED trajectories (positions and velocities) as an ensemble."""
    gamma = params.damping_rate(omega0)
    burn_in = 10.0 / gamma if burn_in is None else burn_in
    i0 = int(round(burn_in / dt))
    pos, vel = [], []
    for i in range(n_realizations):
        traj = sed_integrate(params, omega0, ZpfRealization.draw(spec, i), duration, dt)
        pos.append(traj.x[i0::stride])
        vel.append(traj.xdot[i0::stride])
    return TrajectoryEnsemble(np.array(pos), dt * stride, spec.seed, "sed",
                              t0=i0 * dt, velocities=np.array(vel))


def fix_diffusion_constant(summary: SedRunSummary) -> Tuple[float, float]:
    """Infer D = omega0 <x^2> with its standard error across realizations.

    Stationary <x^2> = hbar/(2 m omega0), so omega0 <x^2> = hbar/2m: the
    diffusion constant of the quantum branch, read off the balance regime.
    """
    x2, se = summary.mean_x2()
    return summary.omega0 * x2, summary.omega0 * se


def write_trajectory_csv(path, traj: SedTrajectory, stride: int = 1) -> None:
    """``t,x,xdot`` every ``stride`` samples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "xdot"])
        for t, x, v in zip(traj.times[::stride], traj.x[::stride], traj.xdot[::stride]):
            w.writerow([f"{t:.17g}", f"{x:.17g}", f"{v:.17g}"])
