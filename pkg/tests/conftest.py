import numpy as np
import pytest

from stoqlab.core import Grid1D, PhysicalParams
from stoqlab.quantum import harmonic_potential, solve_eigenstates


@pytest.fixture(scope="session")
def quantum_params():
    return PhysicalParams.quantum()


@pytest.fixture(scope="session")
def oscillator(quantum_params):
    """Harmonic oscillator on [-10, 10] x 1001 with its four lowest states."""
    g = Grid1D(-10.0, 10.0, 1001)
    V = harmonic_potential(g)
    states = solve_eigenstates(V, quantum_params, 4)
    return g, V, states


@pytest.fixture(scope="session")
def ground(oscillator, quantum_params):
    return oscillator[2][0].wavefunction(quantum_params)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
