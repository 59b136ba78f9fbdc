import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stoqlab.core import Grid1D, PhysicalParams, ScalarField
from stoqlab.quantum import (Propagator, SolverError, Wavefunction, boost, density,
                             energy_expectation, evolve, flux_velocity, gaussian_packet,
                             harmonic_potential, heisenberg_product, momentum_stats,
                             osmotic_velocity, osmotic_velocity_from_density,
                             quantum_potential, solve_eigenstates, superpose, write_field_csv)


@pytest.fixture(scope="module")
def box():
    p = PhysicalParams.quantum()
    g = Grid1D(0.0, 1.0, 1001)
    V = ScalarField.constant(g, 0.0)
    return p, g, V, solve_eigenstates(V, p, 3)


# -- eigenstates ----------------------------------------------------------------

def test_oscillator_spectrum(oscillator):
    _, _, states = oscillator
    for n, s in enumerate(states):
        assert s.energy == pytest.approx(n + 0.5, abs=1e-4)


def test_box_ground_energy(box):
    _, _, _, states = box
    assert states[0].energy == pytest.approx(math.pi**2 / 2, rel=1e-3)


def test_eigen_orthonormal(oscillator):
    g, _, states = oscillator
    M = np.array([[np.trapezoid(np.conj(a.psi.values) * b.psi.values, dx=g.dx).real
                   for b in states] for a in states])
    np.testing.assert_allclose(M, np.eye(len(states)), atol=1e-6)


def test_energies_nondecreasing(oscillator):
    e = [s.energy for s in oscillator[2]]
    assert all(b >= a for a, b in zip(e, e[1:]))


def test_ground_state_nonnegative(oscillator):
    assert np.all(oscillator[2][0].psi.values.real >= -1e-12)


def test_gauge_shift(oscillator, quantum_params):
    g, V, states = oscillator
    shifted = solve_eigenstates(ScalarField(g, V.values + 2.5), quantum_params, 4)
    for a, b in zip(states, shifted):
        assert b.energy - a.energy == pytest.approx(2.5, abs=1e-9)
        np.testing.assert_allclose(b.psi.values, a.psi.values, atol=1e-10)


def test_eigen_k_bound(quantum_params):
    g = Grid1D(-1, 1, 40)
    with pytest.raises(ValueError):
        solve_eigenstates(harmonic_potential(g), quantum_params, 11)


def test_generic_D_scales_spectrum():
    # with hbar_eff = 2 m D the oscillator levels are (n + 1/2) 2 m D omega
    p = PhysicalParams(lambda_branch=1, diffusion_D=0.25)
    g = Grid1D(-10, 10, 1001)
    st0 = solve_eigenstates(harmonic_potential(g), p, 2)
    assert st0[0].energy == pytest.approx(0.25, abs=1e-4)
    assert st0[1].energy == pytest.approx(0.75, abs=1e-4)


# -- evolution ---------------------------------------------------------------------

def test_stationary_state_evolution(oscillator, quantum_params):
    g, V, states = oscillator
    psi0 = states[0].wavefunction(quantum_params)
    t_end = 1.0
    psi = evolve(psi0, V, 0.001, 1000)
    np.testing.assert_allclose(np.abs(psi.values), np.abs(psi0.values), atol=1e-6)
    i = g.n_points // 2
    phase = np.angle(psi.values[i] / psi0.values[i])
    assert phase == pytest.approx(-states[0].energy * t_end, abs=1e-4)


def test_free_packet_spreading(quantum_params):
    g = Grid1D(-40, 40, 2001)
    V = ScalarField.constant(g, 0.0)
    s0 = 1.0
    psi0 = gaussian_packet(g, quantum_params, s0)
    for t in (1.0, 3.0):
        psi = evolve(psi0, V, 0.01, int(round(t / 0.01)))
        rho = np.abs(psi.values) ** 2
        var = np.trapezoid(g.x**2 * rho, dx=g.dx)
        assert var == pytest.approx(s0**2 * (1 + (t / (2 * s0**2)) ** 2), rel=0.01)


def test_parity_conserved(quantum_params):
    g = Grid1D(-20, 20, 801)
    V = ScalarField.constant(g, 0.0)
    prop = Propagator(V, quantum_params, 0.02)
    for psi in prop.run(gaussian_packet(g, quantum_params, 0.7), 200, every=20):
        mean_x = np.trapezoid(g.x * np.abs(psi.values) ** 2, dx=g.dx)
        assert abs(mean_x) < 1e-6


def test_norm_and_energy_conservation(oscillator, quantum_params):
    g, V, states = oscillator
    psi0 = superpose(states[:3], [1, 0.5, 0.3j], quantum_params)
    e0 = energy_expectation(psi0, V)
    psi = evolve(psi0, V, 0.001, 10_000)
    assert abs(psi.norm() - 1) <= 1e-8
    assert abs(energy_expectation(psi, V) - e0) / e0 <= 1e-6


def test_norm_drift_per_step(oscillator, quantum_params):
    g, V, states = oscillator
    psi = superpose(states[:2], [1, 1], quantum_params)
    prop = Propagator(V, quantum_params, 0.01)
    norms = [w.norm() for w in prop.run(psi, 50, every=1)]
    assert np.max(np.abs(np.diff(norms))) <= 1e-10


def test_evolve_requires_normalized(oscillator, quantum_params):
    g, V, states = oscillator
    bad = states[0].wavefunction(quantum_params)
    bad = bad.at(bad.values * 2, 0.0)
    with pytest.raises(ValueError, match="normalized"):
        evolve(bad, V, 0.01, 1)


def test_invalid_dt(oscillator, quantum_params):
    with pytest.raises(ValueError):
        Propagator(oscillator[1], quantum_params, 0.0)


# -- flux velocity ----------------------------------------------------------------------

def test_real_state_has_no_flux(oscillator, quantum_params):
    for s in oscillator[2]:
        v = flux_velocity(s.wavefunction(quantum_params))
        np.testing.assert_allclose(v.values[v.valid], 0.0, atol=1e-12)


def test_plane_wave_flux(quantum_params):
    g = Grid1D(-30, 30, 1201)
    k0 = 1.3
    psi = gaussian_packet(g, quantum_params, 5.0, 0.0, k0)
    v = flux_velocity(psi)
    assert v.values[g.n_points // 2] == pytest.approx(k0, rel=0.01)


def test_superposition_flux_beats_at_omega(oscillator, quantum_params):
    g, V, states = oscillator
    psi0 = superpose(states[:2], [1, 1], quantum_params)
    dt, n = 0.01, 629  # one period 2 pi
    means = []
    for w in Propagator(V, quantum_params, dt).run(psi0, n - 1, every=1):
        v = flux_velocity(w)
        rho = density(w).values
        ok = v.valid
        means.append(np.trapezoid(np.where(ok, v.values * rho, 0.0), dx=g.dx))
    means = np.array(means)
    t = dt * np.arange(means.size)
    amp = np.max(np.abs(means))
    assert abs(np.mean(means)) <= 0.01 * amp
    # <v> = -A sin(omega t) for (psi0 + psi1)/sqrt 2 with real eigenvectors
    A = np.linalg.lstsq(np.stack([np.sin(t), np.cos(t)], 1), means, rcond=None)[0]
    fit = np.stack([np.sin(t), np.cos(t)], 1) @ A
    assert np.max(np.abs(fit - means)) <= 0.01 * amp


# -- osmotic velocity -----------------------------------------------------------------

def test_ground_osmotic_velocity(ground):
    u = osmotic_velocity(ground)
    x = ground.grid.x
    sel = np.abs(x) <= 4
    np.testing.assert_allclose(u.values[sel], -x[sel], atol=1e-3)


def test_plane_wave_osmotic_zero(quantum_params):
    g = Grid1D(0, 2 * math.pi, 201)
    psi = Wavefunction.from_values(g, np.exp(3j * g.x), quantum_params)
    # one-sided edge stencils are only approximate for a non-polynomial phase
    np.testing.assert_allclose(osmotic_velocity(psi).values[2:-2], 0.0, atol=1e-9)


def test_box_osmotic_velocity(box):
    p, g, _, states = box
    u = osmotic_velocity(states[0].wavefunction(p))
    x = g.x
    sel = (x > 0.05) & (x < 0.95)
    exact = math.pi / np.tan(math.pi * x[sel])
    np.testing.assert_allclose(u.values[sel], exact, rtol=0.01, atol=1e-3)


def test_osmotic_routes_agree(ground, quantum_params):
    a = osmotic_velocity(ground)
    b = osmotic_velocity_from_density(density(ground), quantum_params.diffusion_D)
    ok = a.valid & b.valid
    assert np.max(np.abs(a.values[ok] - b.values[ok])) <= 10 * ground.grid.dx**2


def test_node_is_masked(oscillator, quantum_params):
    # psi_1 vanishes on the centre node
    w = oscillator[2][1].wavefunction(quantum_params)
    u = osmotic_velocity(w)
    v = flux_velocity(w)
    c = oscillator[0].n_points // 2
    assert u.mask[c] and v.mask[c]
    assert np.isnan(u.values[c])


# -- quantum potential --------------------------------------------------------------

def test_ground_quantum_potential(ground, quantum_params):
    qp = quantum_potential(density(ground), quantum_params)
    x = ground.grid.x
    sel = np.abs(x) <= 4
    exact = 0.5 - 0.5 * x**2
    np.testing.assert_allclose(qp.sqrt_form.values[sel], exact[sel], atol=1e-3)
    np.testing.assert_allclose(qp.velocity_form.values[sel], exact[sel], atol=1e-3)


def test_quantum_potential_forms_agree(ground, quantum_params):
    qp = quantum_potential(density(ground), quantum_params)
    ok = qp.sqrt_form.valid & qp.velocity_form.valid
    diff = np.abs(qp.sqrt_form.values[ok] - qp.velocity_form.values[ok])
    assert diff.max() <= 10 * ground.grid.dx**2


def test_uniform_density_no_quantum_potential(quantum_params):
    g = Grid1D(0, 1, 51)
    qp = quantum_potential(ScalarField.constant(g, 1.0), quantum_params)
    np.testing.assert_allclose(qp.sqrt_form.values, 0.0, atol=1e-12)
    np.testing.assert_allclose(qp.velocity_form.values, 0.0, atol=1e-12)


def test_box_quantum_potential_constant(box):
    p, g, _, states = box
    qp = quantum_potential(density(states[0].wavefunction(p)), p)
    sel = (g.x > 0.1) & (g.x < 0.9)
    np.testing.assert_allclose(qp.sqrt_form.values[sel], states[0].energy, rtol=0.01)


# -- momentum statistics -----------------------------------------------------------

def test_ground_momentum_stats(ground):
    ms = momentum_stats(ground)
    assert ms.mean_p2 == pytest.approx(0.5, abs=1e-3)
    assert ms.var_mv == pytest.approx(0.0, abs=1e-3)
    assert ms.var_mu == pytest.approx(0.5, abs=1e-3)
    assert ms.mean_p2_fields == pytest.approx(ms.mean_p2, abs=1e-3)


def test_box_momentum_all_osmotic(box):
    p, _, _, states = box
    ms = momentum_stats(states[0].wavefunction(p))
    assert ms.mean_p2 == pytest.approx(math.pi**2, rel=5e-3)
    assert ms.var_mv == pytest.approx(0.0, abs=1e-9)
    assert ms.var_mu == pytest.approx(ms.var_p, rel=5e-3)


def test_boost_shifts_mean_only(ground):
    k0 = 0.8
    a = momentum_stats(ground)
    b = momentum_stats(boost(ground, k0))
    assert b.mean_p - a.mean_p == pytest.approx(k0, abs=1e-3)
    assert b.var_p == pytest.approx(a.var_p, abs=1e-3)


def test_decomposition_every_state(oscillator, quantum_params):
    for s in oscillator[2]:
        assert momentum_stats(s.wavefunction(quantum_params)).decomposition_error < 1e-3


def test_heisenberg_products(oscillator, quantum_params):
    st0 = oscillator[2]
    assert heisenberg_product(st0[0].wavefunction(quantum_params)) == pytest.approx(0.5, abs=1e-3)
    assert heisenberg_product(st0[1].wavefunction(quantum_params)) == pytest.approx(1.5, rel=0.01)


@settings(max_examples=10, deadline=None)
@given(sigma=st.floats(0.6, 2.0), k0=st.floats(-1.0, 1.0), t=st.floats(0.0, 2.0))
def test_free_gaussian_respects_uncertainty(sigma, k0, t):
    p = PhysicalParams.quantum()
    g = Grid1D(-30, 30, 1201)
    V = ScalarField.constant(g, 0.0)
    psi = gaussian_packet(g, p, sigma, 0.0, k0)
    steps = int(round(t / 0.02))
    if steps:
        psi = evolve(psi, V, 0.02, steps)
    assert heisenberg_product(psi) >= 0.5 - 1e-6


# -- output ------------------------------------------------------------------------

def test_field_csv(tmp_path, ground, oscillator):
    path = tmp_path / "fields.csv"
    write_field_csv(path, ground, oscillator[1])
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x", "re_psi", "im_psi", "rho", "v", "u", "V_Q"]
    assert len(rows) == ground.grid.n_points + 1
    mid = rows[1 + ground.grid.n_points // 2]
    assert float(mid[3]) == pytest.approx(abs(ground.values[ground.grid.n_points // 2]) ** 2,
                                          rel=1e-15)
