from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from ensemble_tenets.grid import ConfigurationError, SpacetimeGrid
from ensemble_tenets.spectra import (
    HamiltonianSpec,
    PulseSpec,
    ResolutionError,
    SolverError,
    amplitude_law,
    bound_spectrum,
    ensemble_spectrum,
    transition_probability,
)

BOX = SpacetimeGrid.uniform(1, 400, 16.0, boundary="absorbing")


def anharmonic(x):
    # odd term so every pair of levels has a dipole element
    return 0.5 * x**2 + 0.2 * x**3 + 0.1 * x**4


@pytest.fixture(scope="module")
def well():
    return bound_spectrum(HamiltonianSpec(BOX, anharmonic), k=6)


@pytest.fixture(scope="module")
def atom():
    g = SpacetimeGrid.uniform(1, 1000, 200.0, boundary="absorbing")
    return bound_spectrum(HamiltonianSpec(g, lambda x: -1.0 / np.sqrt(x**2 + 1.0)), k=60)


# ------------------------------------------------------------------ eigenpairs
def test_harmonic_spacing_uniform():
    g = SpacetimeGrid.uniform(1, 600, 20.0, boundary="absorbing")
    w0 = 1.3
    sp = bound_spectrum(HamiltonianSpec(g, lambda x: 0.5 * w0**2 * x**2), k=6)
    gaps = np.diff(sp.energies)
    assert np.all(np.abs(gaps / w0 - 1.0) < 5e-3)
    assert sp.energies[0] == pytest.approx(0.5 * w0, rel=5e-3)


def test_box_levels_scale_as_n_squared():
    L = 10.0
    g = SpacetimeGrid.uniform(1, 500, L, boundary="absorbing")
    sp = bound_spectrum(HamiltonianSpec(g, np.zeros(g.shape), mass=2.0, hbar=0.7), k=4)
    n = np.arange(1, 5)
    # hard walls sit one spacing outside the end points
    Lw = L + g.spacing[0]
    exact = (0.7 * np.pi * n / Lw) ** 2 / (2 * 2.0)
    assert np.allclose(sp.energies / exact, 1.0, atol=1e-2)
    assert np.allclose(sp.energies / sp.energies[0], n**2, rtol=1e-2)


def test_softened_coulomb_against_dense_solver():
    g = SpacetimeGrid.uniform(1, 60, 30.0, boundary="absorbing")
    spec = HamiltonianSpec(g, lambda x: -1.0 / np.sqrt(x**2 + 1.0), q=1.0)
    sp = bound_spectrum(spec, k=4)
    dense = np.linalg.eigvalsh(spec.matrix().toarray())[:4]
    assert np.allclose(sp.energies, dense, atol=1e-10)
    assert np.all(np.diff(sp.energies) > 0)
    assert np.all(sp.energies < 0)


def test_orthonormal_with_small_residuals(well):
    assert well.orthonormality_error() < 1e-8
    assert well.residuals.max() < 1e-8


def test_unreachable_tolerance_reports_residuals():
    with pytest.raises(SolverError, match="residual"):
        bound_spectrum(HamiltonianSpec(BOX, anharmonic), k=3, tol=1e-30)


def test_two_dimensional_well_degeneracy():
    g = SpacetimeGrid.uniform(2, 48, 12.0, boundary="absorbing")
    sp = bound_spectrum(HamiltonianSpec(g, lambda x, y: 0.5 * (x**2 + y**2)), k=3)
    assert sp.energies[0] == pytest.approx(1.0, rel=1e-2)
    assert sp.energies[1] == pytest.approx(sp.energies[2], abs=1e-8)


# ------------------------------------------------------------------ radiated lines
def test_single_eigenstate_has_no_lines(well):
    ls = ensemble_spectrum([0, 0, 1, 0, 0, 0], well, duration=600.0)
    assert ls.lines == []
    assert np.abs(ls.current).max() < 1e-12


def test_two_state_line_within_one_bin(well):
    ls = ensemble_spectrum([1, 1, 0, 0, 0, 0], well, duration=600.0)
    assert len(ls.lines) == 1
    w10 = well.energies[1] - well.energies[0]
    assert abs(ls.lines[0].frequency - w10) <= ls.bin_width
    assert ls.lines[0].levels == (1, 0)


def test_three_state_has_the_three_difference_lines(well):
    ls = ensemble_spectrum([0.6, 0.5j, 0.4, 0, 0, 0], well, duration=600.0)
    E = well.energies
    expected = sorted([E[1] - E[0], E[2] - E[1], E[2] - E[0]])
    assert len(ls.lines) == 3
    assert np.all(np.abs(np.sort(ls.positions) - expected) <= ls.bin_width)
    assert {ln.levels for ln in ls.lines} == {(1, 0), (2, 1), (2, 0)}


def test_current_is_the_dipole_velocity(well):
    # analytic d/dt of q<x>(t) in the level expansion vs the lattice current
    c = np.array([0.6, 0.5j, 0.4, 0.2, 0, 0])
    ls = ensemble_spectrum(c, well, duration=300.0)
    cn = c / np.linalg.norm(c)
    E = well.energies
    X = well.position_matrix()
    dE = E[:, None] - E[None, :]
    t = ls.times
    v = np.real(np.einsum("ab,tab->t", cn.conj()[:, None] * cn[None, :] * X * 1j * dE,
                          np.exp(1j * dE[None] * t[:, None, None])))
    assert np.allclose(ls.current, v, atol=1e-10 * np.abs(v).max())


@settings(max_examples=12, deadline=None)
@given(st.lists(st.complex_numbers(max_magnitude=1.0, allow_nan=False, allow_infinity=False), min_size=4, max_size=4))
def test_lines_are_level_differences(well, coeffs):
    c = np.array(coeffs + [0, 0])
    c[np.abs(c) < 0.1] = 0
    if np.count_nonzero(c) < 2:
        return
    ls = ensemble_spectrum(c, well, duration=600.0)
    assert ls.lines
    diffs = well.transition_frequencies()
    for ln in ls.lines:
        assert np.abs(diffs - ln.frequency).min() <= ls.bin_width


def test_window_too_short_is_a_resolution_error(well):
    with pytest.raises(ResolutionError):
        ensemble_spectrum([1, 1, 1, 0, 0, 0], well, duration=20.0)
    with pytest.raises(ResolutionError):
        ensemble_spectrum([1, 1, 0, 0, 0, 0], well, duration=600.0, dt=3.0)


# ------------------------------------------------------------------ pulses
def test_pulse_validation():
    with pytest.raises(ConfigurationError):
        PulseSpec(omega=1.0, amplitude=-1.0, duration=1.0)
    with pytest.raises(ConfigurationError):
        PulseSpec(omega=1.0, amplitude=1.0, duration=0.0)
    with pytest.raises(ConfigurationError):
        PulseSpec(omega=1.0, amplitude=1.0, duration=1.0, envelope="square")


def test_noise_is_seeded_with_unit_mean_power():
    p = PulseSpec(omega=1.0, amplitude=1.0, duration=2000.0, coherence_length=0.5, envelope="flat", seed=4)
    t, a = p.sample(1.0)
    t2, b = p.sample(1.0)
    assert np.array_equal(a, b)
    _, c = replace(p, seed=5).sample(1.0)
    assert not np.array_equal(a, c)
    flat = p.envelope_at(t) == 1.0
    # Re[xi e^{iwt}] has mean square 1/2, the same as a coherent carrier
    assert np.mean(a[flat] ** 2) == pytest.approx(0.5, rel=0.05)


def test_zero_amplitude_leaves_populations(well):
    p = PulseSpec(omega=1.1, amplitude=0.0, duration=40.0)
    for m in ("first_order", "exact"):
        tb = transition_probability(0, p, well, m)
        assert np.allclose(tb.probabilities, np.eye(6)[0], atol=1e-14)


def test_first_order_matches_gaussian_oracle(well):
    w10 = well.energies[1] - well.energies[0]
    tau, A, det = 40.0, 0.002, 0.03
    # centre at 8 tau so the truncated tails are negligible
    p = PulseSpec(omega=w10 + det, amplitude=A, duration=tau, t0=8 * tau)
    P1 = transition_probability(0, p, well).probabilities[1]
    X = well.position_matrix()[1, 0]
    # FT of a Gaussian-windowed cosine, both rotating terms kept
    ft = 0.5 * A * tau * np.sqrt(2 * np.pi) * (
        np.exp(-0.5 * tau**2 * det**2) + np.exp(-0.5 * tau**2 * (2 * w10 + det) ** 2)
    )
    assert P1 == pytest.approx((X * ft) ** 2, rel=1e-6)


def test_exact_matches_independent_integrator(well):
    w10 = well.energies[1] - well.energies[0]
    p = PulseSpec(omega=w10, amplitude=0.02, duration=10.0)
    tb = transition_probability(0, p, well, "exact")
    E, X = well.energies, well.position_matrix().real
    t, f = p.sample(float(E[-1] - E[0]))

    def rhs(tt, y):
        return -1j * (E * y - np.interp(tt, t, f) * (X @ y))

    y0 = np.eye(6, dtype=complex)[0]
    sol = solve_ivp(rhs, (t[0], t[-1]), y0, method="DOP853", rtol=1e-10, atol=1e-12, max_step=t[1] - t[0])
    assert np.allclose(tb.probabilities, np.abs(sol.y[:, -1]) ** 2, atol=2e-5)
    assert tb.probabilities.sum() == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("method", ["first_order", "exact"])
def test_doubling_amplitude_quadruples_probabilities(well, method):
    w10 = well.energies[1] - well.energies[0]
    p = PulseSpec(omega=w10, amplitude=0.001, duration=40.0)
    P = transition_probability(0, p, well, method).probabilities
    P2 = transition_probability(0, replace(p, amplitude=0.002), well, method).probabilities
    assert P2[1] / P[1] == pytest.approx(4.0, rel=1e-2)


def test_resonance_and_off_resonant_suppression(well):
    E = well.energies
    w10 = E[1] - E[0]
    p = PulseSpec(omega=w10, amplitude=0.002, duration=40.0)
    on = transition_probability(0, p, well).probabilities[1]
    off = transition_probability(0, replace(p, omega=w10 + 0.3), well).probabilities[1]
    assert off * 100 <= on
    scan = [transition_probability(0, replace(p, omega=w), well).probabilities[1] for w in w10 + np.linspace(-0.1, 0.1, 11)]
    assert int(np.argmax(scan)) == 5


def test_validity_flag(well):
    w10 = well.energies[1] - well.energies[0]
    assert transition_probability(0, PulseSpec(omega=w10, amplitude=0.002, duration=40.0), well).valid
    assert not transition_probability(0, PulseSpec(omega=w10, amplitude=0.02, duration=40.0), well).valid


def test_ionization_amplitude_squared_law(atom):
    p = PulseSpec(omega=0.8, amplitude=0.005, duration=20.0)
    slope, P = amplitude_law(0, p, atom, np.geomspace(1e-3, 1e-2, 5), threshold=0.0)
    assert slope == pytest.approx(2.0, abs=0.05)
    assert np.all(np.diff(P) > 0)


def test_wide_band_random_pulse_hardly_changes_populations(well):
    w10 = well.energies[1] - well.energies[0]
    coherent = PulseSpec(omega=w10, amplitude=0.02, duration=40.0)
    noisy = replace(coherent, coherence_length=0.5, seed=3)
    assert transition_probability(0, coherent, well, "exact").population_change > 0.1
    assert transition_probability(0, noisy, well, "exact").population_change < 0.01
