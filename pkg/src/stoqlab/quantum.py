"""
Schroedinger-like solver on a uniform grid and the fields derived from psi.

The Hamiltonian is ``-(2 m D^2) d^2/dx^2 + V`` with Dirichlet walls; with
``D = hbar/2m`` it is the ordinary one. Everywhere below the combination
``2 m D`` plays the role of hbar, so a run with a free ``D`` is the generic
equation and the "quantum" preset is the true Schroedinger equation.

Velocities follow from the logarithmic derivative of psi::

    v = 2D Im(psi'/psi)      (flux / current velocity)
    u = 2D Re(psi'/psi)      (osmotic velocity, = D rho'/rho)

Nodes with ``rho <= RHO_FLOOR * max(rho)`` are masked.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, NamedTuple, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import ComplexField, Grid1D, PhysicalParams, ScalarField, _d1, _d2

__all__ = [
    "RHO_FLOOR",
    "Wavefunction",
    "EigenSolution",
    "MomentumStats",
    "QuantumPotential",
    "SolverError",
    "hamiltonian",
    "solve_eigenstates",
    "Propagator",
    "evolve",
    "energy_expectation",
    "density",
    "flux_velocity",
    "osmotic_velocity",
    "osmotic_velocity_from_density",
    "quantum_potential",
    "momentum_stats",
    "heisenberg_product",
    "harmonic_potential",
    "gaussian_packet",
    "superpose",
    "boost",
    "write_field_csv",
]

RHO_FLOOR = 1e-12


class SolverError(RuntimeError):
    """Eigen or linear solve failed; message carries the residual norm."""


@dataclass(frozen=True, eq=False)
class Wavefunction:
    psi: ComplexField
    time: float = 0.0
    params: PhysicalParams = PhysicalParams()

    @property
    def grid(self) -> Grid1D:
        return self.psi.grid

    @property
    def values(self) -> np.ndarray:
        return self.psi.values

    @classmethod
    def from_values(cls, grid, values, params=PhysicalParams(), time=0.0,
                    normalize=True):
        values = np.asarray(values, dtype=complex)
        if normalize:
            norm = np.sqrt(np.trapezoid(np.abs(values) ** 2, dx=grid.dx))
            if not norm > 0:
                raise ValueError("cannot normalize a zero wavefunction")
            values = values / norm
        return cls(ComplexField(grid, values), time, params)

    def norm(self) -> float:
        return float(np.trapezoid(np.abs(self.values) ** 2, dx=self.grid.dx))

    def at(self, values, time) -> "Wavefunction":
        return Wavefunction(ComplexField(self.grid, values), time, self.params)


@dataclass(frozen=True, eq=False)
class EigenSolution:
    energy: float
    psi: ComplexField
    index: int

    def wavefunction(self, params: PhysicalParams, time=0.0) -> Wavefunction:
        return Wavefunction(self.psi, time, params)


@dataclass(frozen=True)
class MomentumStats:
    """Momentum moments of a state and their velocity decomposition.

    ``mean_p2`` is the spectral value; ``mean_p2_fields`` is m^2<v^2+u^2>.
    The mean momentum splits as m<v> - i m<u>; the second part vanishes
    for normalizable states and is kept as a diagnostic.
    """

    mean_p: float
    mean_mv: float
    mean_mu: float
    mean_p2: float
    mean_p2_fields: float
    var_p: float
    var_mv: float
    var_mu: float
    masked_fraction: float

    @property
    def decomposition_error(self) -> float:
        """Relative mismatch between var_p and var_mv + var_mu."""
        return abs(self.var_p - (self.var_mv + self.var_mu)) / self.var_p


class QuantumPotential(NamedTuple):
    sqrt_form: ScalarField
    velocity_form: ScalarField


def _hbar_eff(params: PhysicalParams) -> float:
    return 2.0 * params.mass * params.diffusion_D


def _values(V) -> np.ndarray:
    return V.values if isinstance(V, ScalarField) else np.asarray(V, dtype=float)


def hamiltonian(V: ScalarField, params: PhysicalParams, order: int = 4) -> sp.csr_matrix:
    """Discrete Hamiltonian on the interior nodes (Dirichlet walls).

    ``order=2`` is the symmetric tridiagonal 3-point form; ``order=4`` the
    symmetric pentadiagonal 5-point form, using the odd reflection
    psi(-h) = -psi(h) at the node next to each wall.
    """
    diag, offdiag = _banded_parts(V, params, order)
    offsets = [0] + [k + 1 for k in range(len(offdiag))]
    bands = [diag] + offdiag
    full = sp.diags(bands + offdiag, offsets + [-o for o in offsets[1:]], format="csr")
    return full


def _banded_parts(V, params, order):
    if V.mask.any():
        raise ValueError("potential has masked nodes")
    grid = V.grid
    kin = 2.0 * params.mass * params.diffusion_D**2 / grid.dx**2
    v_int = V.values[1:-1]
    n = v_int.size
    if order == 2:
        diag = v_int + 2.0 * kin
        off = [np.full(n - 1, -kin)]
    elif order == 4:
        diag = v_int + kin * 30.0 / 12.0
        diag[0] = v_int[0] + kin * 29.0 / 12.0
        diag[-1] = v_int[-1] + kin * 29.0 / 12.0
        off = [np.full(n - 1, -kin * 16.0 / 12.0), np.full(n - 2, kin / 12.0)]
    else:
        raise ValueError(f"order must be 2 or 4, got {order}")
    return diag, off


def _sign_convention(vec: np.ndarray) -> np.ndarray:
    # first lobe that rises above 1e-3 of the peak is made positive
    big = np.flatnonzero(np.abs(vec) > 1e-3 * np.abs(vec).max())
    return -vec if vec[big[0]] < 0 else vec


def solve_eigenstates(V: ScalarField, params: PhysicalParams, k: int,
                      order: int = 4) -> List[EigenSolution]:
    """Lowest ``k`` eigenpairs of the discrete Hamiltonian.

    Eigenvectors are real, normalized under the trapezoidal inner product and
    signed so that their first significant lobe is positive (the ground
    state is then non-negative everywhere).
    """
    grid = V.grid
    if k < 1 or k > grid.n_points // 4:
        raise ValueError(f"k must be in [1, n_points/4], got {k}")
    diag, off = _banded_parts(V, params, order)
    try:
        if order == 2:
            w, vecs = sla.eigh_tridiagonal(diag, off[0], select="i",
                                           select_range=(0, k - 1))
        else:
            band = np.zeros((3, diag.size))
            band[0] = diag
            band[1, :-1] = off[0]
            band[2, :-2] = off[1]
            w, vecs = sla.eig_banded(band, lower=True, select="i",
                                     select_range=(0, k - 1))
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SolverError(f"eigen solve failed: {exc}") from exc

    H = hamiltonian(V, params, order)
    resid = np.linalg.norm(H @ vecs - vecs * w, axis=0)
    if np.any(resid > 1e-8 * max(1.0, np.abs(w).max())):
        raise SolverError(f"eigen solve did not converge: residual norms {resid}")

    out = []
    for i in range(k):
        full = np.zeros(grid.n_points)
        full[1:-1] = _sign_convention(vecs[:, i]) / np.sqrt(grid.dx)
        out.append(EigenSolution(float(w[i]), ComplexField(grid, full.astype(complex)), i))
    return out


class Propagator:
    """Cayley (Crank-Nicolson) propagator ``(1 + iH dt/2h)^-1 (1 - iH dt/2h)``.

    Unitary for the discrete Hamiltonian, so norm and <H> are conserved up
    to rounding. The LU factorization is computed once.
    """

    def __init__(self, V: ScalarField, params: PhysicalParams, dt: float, order: int = 4):
        if not dt > 0:
            raise ValueError(f"dt must be > 0, got {dt}")
        self.grid = V.grid
        self.params = params
        self.dt = dt
        H = hamiltonian(V, params, order).tocsc()
        a = 1j * dt / (2.0 * _hbar_eff(params))
        eye = sp.identity(H.shape[0], dtype=complex, format="csc")
        self._rhs = (eye - a * H).tocsr()
        try:
            self._lu = spla.splu((eye + a * H).tocsc())
        except RuntimeError as exc:
            raise SolverError(f"factorization of the Cayley matrix failed: {exc}") from exc

    def step(self, interior: np.ndarray, n: int = 1) -> np.ndarray:
        for _ in range(n):
            interior = self._lu.solve(self._rhs @ interior)
        return interior

    def run(self, psi0: Wavefunction, steps: int, every: Optional[int] = None):
        """Advance ``steps`` steps; yield a snapshot every ``every`` steps
        (including the start) if given, else only the final state."""
        if psi0.grid != self.grid:
            raise ValueError("wavefunction and potential live on different grids")
        state = np.array(psi0.values[1:-1])
        t = psi0.time
        full = np.zeros(self.grid.n_points, dtype=complex)
        if every:
            full[1:-1] = state
            yield psi0.at(full.copy(), t)
        done = 0
        while done < steps:
            chunk = min(every or steps, steps - done)
            state = self.step(state, chunk)
            done += chunk
            if every or done == steps:
                full[1:-1] = state
                yield psi0.at(full.copy(), t + done * self.dt)


def evolve(psi0: Wavefunction, V: ScalarField, dt: float, steps: int,
           order: int = 4) -> Wavefunction:
    """Propagate ``psi0`` by ``steps`` Cayley steps of size ``dt``."""
    norm = psi0.norm()
    if abs(norm - 1.0) > 1e-8:
        raise ValueError(f"psi0 must be normalized (norm={norm:.12g})")
    prop = Propagator(V, psi0.params, dt, order)
    *_, last = prop.run(psi0, steps)
    return last


def energy_expectation(psi: Wavefunction, V: ScalarField, order: int = 4) -> float:
    H = hamiltonian(V, psi.params, order)
    inner = psi.values[1:-1]
    return float(np.real(np.vdot(inner, H @ inner)) * psi.grid.dx)


# -- derived fields ------------------------------------------------------------

def density(psi: Wavefunction) -> ScalarField:
    return ScalarField(psi.grid, np.abs(psi.values) ** 2)


def _node_mask(rho: np.ndarray) -> np.ndarray:
    return rho <= RHO_FLOOR * rho.max()


def _log_derivative(psi: Wavefunction, order: int):
    vals = psi.values
    rho = np.abs(vals) ** 2
    mask = _node_mask(rho)
    dpsi = _d1(vals, psi.grid.dx, order)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(mask, np.nan, dpsi / np.where(mask, 1.0, vals))
    return ratio, mask


def flux_velocity(psi: Wavefunction, order: int = 4) -> ScalarField:
    """v = 2D Im(psi'/psi); nodes below the density floor are masked."""
    ratio, mask = _log_derivative(psi, order)
    return ScalarField(psi.grid, 2 * psi.params.diffusion_D * ratio.imag, mask)


def osmotic_velocity(psi: Wavefunction, order: int = 4) -> ScalarField:
    """u = 2D Re(psi'/psi)."""
    ratio, mask = _log_derivative(psi, order)
    return ScalarField(psi.grid, 2 * psi.params.diffusion_D * ratio.real, mask)


def osmotic_velocity_from_density(rho: ScalarField, D: float, order: int = 4) -> ScalarField:
    """u = D rho'/rho, the diffusive form used for the cross-check."""
    r = rho.values
    mask = _node_mask(np.where(rho.mask, 0.0, r)) | rho.mask
    with np.errstate(divide="ignore", invalid="ignore"):
        u = D * _d1(r, rho.grid.dx, order) / r
    return ScalarField(rho.grid, np.where(mask, np.nan, u), mask)


def quantum_potential(rho: ScalarField, params: PhysicalParams,
                      order: int = 4) -> QuantumPotential:
    """Both forms of the fluctuation energy term.

    ``sqrt_form``:     -h^2 (sqrt(rho))'' / (2 m sqrt(rho))
    ``velocity_form``: -(m u^2 + h u') / 2, with u = D rho'/rho

    where h = 2mD.
    """
    h = _hbar_eff(params)
    m = params.mass
    r = rho.values
    mask = _node_mask(r) | rho.mask
    sq = np.sqrt(np.clip(r, 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        vq1 = -h**2 * _d2(sq, rho.grid.dx, order) / (2 * m * sq)
    vq1[mask] = np.nan
    u = osmotic_velocity_from_density(rho, params.diffusion_D, order)
    du = _d1(u.values, rho.grid.dx, order)
    vq2 = -0.5 * (m * u.values**2 + h * du)
    return QuantumPotential(
        ScalarField(rho.grid, vq1, mask),
        ScalarField(rho.grid, vq2, ~np.isfinite(vq2) | mask),
    )


def _rho_average(rho: np.ndarray, g: np.ndarray, x: np.ndarray, dx: float) -> float:
    """Integral of rho*g with masked nodes bridged by interpolation.

    rho*g stays smooth through isolated nodes of psi even where g does not,
    so the gaps are filled from neighbouring valid integrand values; masked
    tails (outside the outermost valid nodes) contribute zero.
    """
    integrand = rho * g
    ok = np.isfinite(integrand)
    if not ok.all():
        integrand = np.interp(x, x[ok], integrand[ok], left=0.0, right=0.0)
    return float(np.trapezoid(integrand, dx=dx))


def momentum_stats(psi: Wavefunction, order: int = 4) -> MomentumStats:
    """Momentum moments computed spectrally and from the velocity fields."""
    grid, m = psi.grid, psi.params.mass
    h = _hbar_eff(psi.params)
    dx, x = grid.dx, grid.x
    vals = psi.values

    k = 2 * np.pi * np.fft.fftfreq(grid.n_points, d=dx)
    spec = np.abs(np.fft.fft(vals)) ** 2 * dx / grid.n_points
    mean_p = float(np.sum(h * k * spec))
    mean_p2 = float(np.sum((h * k) ** 2 * spec))

    rho = np.abs(vals) ** 2
    v = flux_velocity(psi, order)
    u = osmotic_velocity(psi, order)
    mv = _rho_average(rho, v.values, x, dx)
    mu = _rho_average(rho, u.values, x, dx)
    mv2 = _rho_average(rho, v.values**2, x, dx)
    mu2 = _rho_average(rho, u.values**2, x, dx)
    return MomentumStats(
        mean_p=mean_p,
        mean_mv=m * mv,
        mean_mu=m * mu,
        mean_p2=mean_p2,
        mean_p2_fields=m**2 * (mv2 + mu2),
        var_p=mean_p2 - mean_p**2,
        var_mv=m**2 * (mv2 - mv**2),
        var_mu=m**2 * (mu2 - mu**2),
        masked_fraction=float(u.mask.mean()),
    )


def heisenberg_product(psi: Wavefunction, order: int = 4) -> float:
    """Delta x * Delta p, with Delta p from :func:`momentum_stats`."""
    rho = np.abs(psi.values) ** 2
    x, dx = psi.grid.x, psi.grid.dx
    mean_x = np.trapezoid(rho * x, dx=dx)
    var_x = np.trapezoid(rho * x**2, dx=dx) - mean_x**2
    return float(np.sqrt(var_x * momentum_stats(psi, order).var_p))


# -- convenience constructors ----------------------------------------------------

def harmonic_potential(grid: Grid1D, omega: float = 1.0, mass: float = 1.0,
                       center: float = 0.0) -> ScalarField:
    return ScalarField(grid, 0.5 * mass * omega**2 * (grid.x - center) ** 2)


def gaussian_packet(grid: Grid1D, params: PhysicalParams, sigma: float,
                    x0: float = 0.0, k0: float = 0.0) -> Wavefunction:
    """Normalized Gaussian with position spread ``sigma`` and wavenumber ``k0``."""
    x = grid.x
    vals = np.exp(-((x - x0) ** 2) / (4 * sigma**2) + 1j * k0 * x)
    return Wavefunction.from_values(grid, vals, params)


def superpose(states, coeffs, params: PhysicalParams) -> Wavefunction:
    """Normalized linear combination of eigen solutions (or wavefunctions)."""
    grid = states[0].psi.grid
    vals = sum(c * s.psi.values for c, s in zip(coeffs, states))
    return Wavefunction.from_values(grid, vals, params)


def boost(psi: Wavefunction, k0: float) -> Wavefunction:
    """Multiply by exp(i k0 x): shifts the mean momentum by h k0."""
    return psi.at(psi.values * np.exp(1j * k0 * psi.grid.x), psi.time)


def write_field_csv(path, psi: Wavefunction, V: Optional[ScalarField] = None,
                    order: int = 4) -> None:
    """Dump ``x,re_psi,im_psi,rho,v,u,V_Q`` with 17 significant digits.

    Masked entries are written as ``nan``.
    """
    rho = density(psi)
    v = flux_velocity(psi, order)
    u = osmotic_velocity(psi, order)
    vq = quantum_potential(rho, psi.params, order).sqrt_form
    cols = [psi.grid.x, psi.values.real, psi.values.imag, rho.values,
            v.values, u.values, vq.values]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "re_psi", "im_psi", "rho", "v", "u", "V_Q"])
        for row in zip(*cols):
            w.writerow([f"{val:.17g}" for val in row])
