"""
Shared domain types, grid calculus and the seeded random-stream contract.

Everything here is immutable after construction. Fields carry an optional
boolean ``mask`` (``True`` = excluded node); masked nodes hold ``nan`` so
that any stencil touching them propagates the exclusion instead of
silently producing a number.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

__all__ = [
    "PhysicalParams",
    "Grid1D",
    "ScalarField",
    "ComplexField",
    "RandomStreamSpec",
    "derivative",
    "laplacian",
    "integrate",
    "worker_count",
]


def _radiation_tau(charge: float, mass: float, light_speed: float) -> float:
    return 2.0 * charge**2 / (3.0 * mass * light_speed**3)


@dataclass(frozen=True)
class PhysicalParams:
    """Physical constants of one run.

    ``tau`` is the radiation-reaction time 2e^2/(3 m c^3); it is derived from
    the charge when not given, and checked against it when given.
    ``diffusion_D`` defaults to hbar/(2m), the value that turns the generic
    Schroedinger-like equation into the true one.
    """

    hbar: float = 1.0
    mass: float = 1.0
    charge: float = 0.0
    light_speed: float = 1.0
    lambda_branch: int = 1
    diffusion_D: Optional[float] = None
    tau: Optional[float] = None

    def __post_init__(self):
        errors = []
        if not self.hbar > 0:
            errors.append(f"hbar must be > 0, got {self.hbar}")
        if not self.mass > 0:
            errors.append(f"mass must be > 0, got {self.mass}")
        if not self.charge >= 0:
            errors.append(f"charge must be >= 0, got {self.charge}")
        if not self.light_speed > 0:
            errors.append(f"light_speed must be > 0, got {self.light_speed}")
        if self.lambda_branch not in (1, -1):
            errors.append("lambda_branch must be +1 or -1, got "
                          f"{self.lambda_branch}")
        if errors:
            raise ValueError("; ".join(errors))
        if self.diffusion_D is None:
            object.__setattr__(self, "diffusion_D", self.hbar / (2.0 * self.mass))
        elif self.diffusion_D < 0:
            raise ValueError(f"diffusion_D must be >= 0, got {self.diffusion_D}")
        tau = _radiation_tau(self.charge, self.mass, self.light_speed)
        if self.tau is None:
            object.__setattr__(self, "tau", tau)
        elif self.charge > 0 and not math.isclose(self.tau, tau, rel_tol=1e-12):
            raise ValueError(f"tau={self.tau} inconsistent with charge "
                             f"(2e^2/3mc^3 = {tau})")
        elif self.tau < 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")

    @classmethod
    def quantum(cls, hbar=1.0, mass=1.0, **kw) -> "PhysicalParams":
        """lambda = +1 with D fixed to hbar/2m."""
        return cls(hbar=hbar, mass=mass, lambda_branch=1,
                   diffusion_D=hbar / (2.0 * mass), **kw)

    @classmethod
    def brownian(cls, diffusion_D, hbar=1.0, mass=1.0) -> "PhysicalParams":
        return cls(hbar=hbar, mass=mass, lambda_branch=-1,
                   diffusion_D=diffusion_D)

    @classmethod
    def sed(cls, gamma, omega0=1.0, hbar=1.0, mass=1.0,
            light_speed=1.0) -> "PhysicalParams":
        """Choose the charge so that the damping rate tau*omega0^2 equals ``gamma``."""
        tau = gamma / omega0**2
        charge = math.sqrt(1.5 * mass * light_speed**3 * tau)
        return cls(hbar=hbar, mass=mass, charge=charge,
                   light_speed=light_speed, lambda_branch=1)

    @property
    def is_quantum(self) -> bool:
        return (self.lambda_branch == 1 and
                math.isclose(self.diffusion_D, self.hbar / (2 * self.mass),
                             rel_tol=1e-12))

    def damping_rate(self, omega0: float) -> float:
        return self.tau * omega0**2

    def with_(self, **changes) -> "PhysicalParams":
        """Copy with changes; ``tau`` and ``diffusion_D`` are re-derived unless given."""
        base = {"hbar": self.hbar, "mass": self.mass, "charge": self.charge,
                "light_speed": self.light_speed,
                "lambda_branch": self.lambda_branch}
        base.update(changes)
        return PhysicalParams(**base)


@dataclass(frozen=True)
class Grid1D:
    x_min: float
    x_max: float
    n_points: int

    def __post_init__(self):
        if not self.x_max > self.x_min:
            raise ValueError(f"x_max ({self.x_max}) must exceed x_min ({self.x_min})")
        if int(self.n_points) != self.n_points or self.n_points < 8:
            raise ValueError(f"n_points must be an integer >= 8, got {self.n_points}")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_points - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_points)

    def refined(self) -> "Grid1D":
        """Same interval, spacing halved."""
        return Grid1D(self.x_min, self.x_max, 2 * self.n_points - 1)


def _frozen(values, dtype):
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Real values on the nodes of a :class:`Grid1D`.

    ``mask`` marks excluded nodes (True = excluded); those hold ``nan``.
    Unmasked values must be finite.
    """

    grid: Grid1D
    values: np.ndarray
    mask: Optional[np.ndarray] = None

    _dtype = np.float64

    def __post_init__(self):
        values = np.asarray(self.values)
        if np.iscomplexobj(values) and self._dtype is np.float64:
            raise TypeError("ScalarField values must be real")
        values = np.array(values, dtype=self._dtype)
        if values.shape != (self.grid.n_points,):
            raise ValueError(f"expected {self.grid.n_points} values, "
                             f"got shape {values.shape}")
        if self.mask is None:
            mask = np.zeros(values.shape, dtype=bool)
        else:
            mask = np.array(self.mask, dtype=bool)
            if mask.shape != values.shape:
                raise ValueError("mask shape does not match values")
        bad = ~np.isfinite(values) & ~mask
        if bad.any():
            idx = np.flatnonzero(bad)
            raise ValueError(f"non-finite values at {bad.sum()} unmasked node(s), "
                             f"first at index {idx[0]} (x={self.grid.x[idx[0]]:.6g})")
        values[mask] = np.nan
        object.__setattr__(self, "values", _frozen(values, self._dtype))
        object.__setattr__(self, "mask", _frozen(mask, bool))

    @property
    def x(self) -> np.ndarray:
        return self.grid.x

    @property
    def valid(self) -> np.ndarray:
        return ~self.mask

    @property
    def masked_fraction(self) -> float:
        return float(self.mask.mean())

    @classmethod
    def from_function(cls, grid: Grid1D, func):
        return cls(grid, func(grid.x))

    @classmethod
    def constant(cls, grid: Grid1D, value=0.0):
        return cls(grid, np.full(grid.n_points, value, dtype=cls._dtype))

    def _with_values(self, values, mask=None):
        if mask is None:
            mask = ~np.isfinite(values)
        return type(self)(self.grid, values, mask | self.mask)

    def __len__(self):
        return self.grid.n_points


@dataclass(frozen=True, eq=False)
class ComplexField(ScalarField):
    _dtype = np.complex128

    def __post_init__(self):
        super().__post_init__()


def _check_field(f: ScalarField, what: str):
    if not isinstance(f, ScalarField):
        raise TypeError(f"{what} expects a ScalarField, got {type(f).__name__}")


# -- grid calculus -----------------------------------------------------------
#
# The raw-array helpers below accept nan and let it propagate; the public
# wrappers validate the field first.

def _d1(f: np.ndarray, dx: float, order: int = 2) -> np.ndarray:
    f = np.asarray(f)
    n = f.size
    out = np.empty_like(f)
    if order == 2:
        out[1:-1] = (f[2:] - f[:-2]) / (2 * dx)
        out[0] = (-3 * f[0] + 4 * f[1] - f[2]) / (2 * dx)
        out[-1] = (3 * f[-1] - 4 * f[-2] + f[-3]) / (2 * dx)
    elif order == 4:
        if n < 5:
            raise ValueError("order-4 stencils need at least 5 nodes")
        out[2:-2] = (f[:-4] - 8 * f[1:-3] + 8 * f[3:-1] - f[4:]) / (12 * dx)
        out[0] = (-25 * f[0] + 48 * f[1] - 36 * f[2] + 16 * f[3] - 3 * f[4]) / (12 * dx)
        out[1] = (-3 * f[0] - 10 * f[1] + 18 * f[2] - 6 * f[3] + f[4]) / (12 * dx)
        out[-1] = (25 * f[-1] - 48 * f[-2] + 36 * f[-3] - 16 * f[-4] + 3 * f[-5]) / (12 * dx)
        out[-2] = (3 * f[-1] + 10 * f[-2] - 18 * f[-3] + 6 * f[-4] - f[-5]) / (12 * dx)
    else:
        raise ValueError(f"order must be 2 or 4, got {order}")
    return out


def _d2(f: np.ndarray, dx: float, order: int = 2) -> np.ndarray:
    f = np.asarray(f)
    out = np.empty_like(f)
    h2 = dx * dx
    if order == 2:
        out[1:-1] = (f[2:] - 2 * f[1:-1] + f[:-2]) / h2
        out[0] = (2 * f[0] - 5 * f[1] + 4 * f[2] - f[3]) / h2
        out[-1] = (2 * f[-1] - 5 * f[-2] + 4 * f[-3] - f[-4]) / h2
    elif order == 4:
        out[2:-2] = (-f[:-4] + 16 * f[1:-3] - 30 * f[2:-2]
                     + 16 * f[3:-1] - f[4:]) / (12 * h2)
        out[0] = (45 * f[0] - 154 * f[1] + 214 * f[2] - 156 * f[3]
                  + 61 * f[4] - 10 * f[5]) / (12 * h2)
        out[1] = (10 * f[0] - 15 * f[1] - 4 * f[2] + 14 * f[3]
                  - 6 * f[4] + f[5]) / (12 * h2)
        out[-1] = (45 * f[-1] - 154 * f[-2] + 214 * f[-3] - 156 * f[-4]
                   + 61 * f[-5] - 10 * f[-6]) / (12 * h2)
        out[-2] = (10 * f[-1] - 15 * f[-2] - 4 * f[-3] + 14 * f[-4]
                   - 6 * f[-5] + f[-6]) / (12 * h2)
    else:
        raise ValueError(f"order must be 2 or 4, got {order}")
    return out


def derivative(f: ScalarField, order: int = 2) -> ScalarField:
    """First derivative on the grid.

    Central differences in the interior, one-sided differences of the same
    order at the two ends. Masked nodes spread to every output node whose
    stencil touches them.
    """
    _check_field(f, "derivative")
    return f._with_values(_d1(f.values, f.grid.dx, order))


def laplacian(f: ScalarField, order: int = 2) -> ScalarField:
    """Second derivative; 3-point stencil for ``order=2``, 5-point for ``order=4``."""
    _check_field(f, "laplacian")
    return f._with_values(_d2(f.values, f.grid.dx, order))


def integrate(f: ScalarField) -> float:
    """Trapezoidal integral over the whole grid.

    Raises if any node is masked; callers that tolerate masking decide how
    to fill the gaps themselves.
    """
    _check_field(f, "integrate")
    if f.mask.any():
        raise ValueError(f"cannot integrate a field with {f.mask.sum()} masked node(s)")
    return np.trapezoid(f.values, dx=f.grid.dx).item()


@dataclass(frozen=True)
class RandomStreamSpec:
    """Address of one reproducible pseudo-random stream.

    The generator is a pure function of ``(master_seed, stream_index)``:
    numpy's ``SeedSequence`` with the index as spawn key, so distinct
    indices give independent PCG64 streams.
    """

    master_seed: int
    stream_index: int = 0

    def __post_init__(self):
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        if self.stream_index < 0:
            raise ValueError("stream_index must be >= 0")

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(self.stream_index,))
        return np.random.Generator(np.random.PCG64(seq))

    def child(self, index: int) -> "RandomStreamSpec":
        return replace(self, stream_index=index)


def worker_count() -> int:
    """Worker cap from ``STOQLAB_THREADS`` (0 or unset = one per CPU)."""
    raw = os.environ.get("STOQLAB_THREADS", "0").strip() or "0"
    n = int(raw)
    if n < 0:
        raise ValueError("STOQLAB_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)
