import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ensemble_tenets.grid import ConfigurationError, SpacetimeGrid
from ensemble_tenets.manybody import (
    ExternalFields,
    ManyBodyState,
    ManyBodySystem,
    ParticleSpec,
    conservation_suite,
    densities,
    eigenstates,
    ensemble_average,
    energy,
    evolve,
    gauge_deviation,
    hamiltonian_apply,
    interaction_energy,
    joint_rank,
    magnetic_moment,
    marginals,
    member_product_density,
    product_state,
    swap,
    symmetry_deviation,
    total_energy_check,
)

TRAP = ExternalFields(scalar=lambda x: 0.125 * x ** 2)
SINGLET = np.array([0, 1, -1, 0]) / np.sqrt(2)


def _pair(n, L=16.0, spin=SINGLET, ext=TRAP):
    g = SpacetimeGrid.uniform(1, n, L)
    sysm = ManyBodySystem(g, [ParticleSpec(), ParticleSpec()], ext, softening=0.5)
    x = g.axis(0)
    X1, X2 = sysm.lift(x, 0), sysm.lift(x, 1)
    space = np.exp(-(X1 - 1) ** 2 / 2 - (X2 + 1) ** 2 / 3 - 0.3 * (X1 - X2) ** 2 / 4
                   + 1j * (0.4 * X1 - 0.2 * X2 + 0.1 * X1 * X2))
    return ManyBodyState(np.asarray(spin)[:, None, None] * space, sysm).normalized()


def test_pauli_default_and_mass_check():
    assert ParticleSpec(q=-1.0, m=2.0).coupling(1.0) == pytest.approx(0.25)
    assert ParticleSpec(g=0.7).coupling(1.0) == 0.7
    with pytest.raises(ConfigurationError):
        ParticleSpec(m=0.0)


def test_eigenstate_matches_dense_oracle():
    g = SpacetimeGrid.uniform(1, 20, 10.0)
    sysm = ManyBodySystem(g, [ParticleSpec(), ParticleSpec()], TRAP, softening=0.5)
    E, states = eigenstates(sysm, 2)
    Nc = sysm.config_points
    dense = np.linalg.eigvalsh(sysm.hamiltonian_matrix[:Nc, :Nc].toarray())
    assert np.allclose(E, dense[:2], rtol=1e-10)
    s = states[0]
    assert np.abs(hamiltonian_apply(s) - E[0] * s.phi).max() < 1e-9 * np.abs(s.phi).max()


def test_uniform_field_spin_term():
    g = SpacetimeGrid.uniform(1, 32, 16.0)
    B = 0.4
    ext = ExternalFields(vector=lambda x: (0 * x, B * x, 0 * x))  # B_z = B
    p = ParticleSpec(q=1.0, m=1.0)
    sysm = ManyBodySystem(g, [p], ext)
    x = g.axis(0)
    up = ManyBodyState(np.array([1.0, 0.0])[:, None] * np.exp(-x ** 2 / 4), sysm).normalized()
    free = ManyBodySystem(g, [p], ext)
    down = ManyBodyState(np.array([0.0, 1.0])[:, None] * up.phi[0], free).normalized()
    # the orbital part is identical for both spins, so the difference is 2 g B
    assert energy(up) - energy(down) == pytest.approx(2 * p.coupling(1.0) * B, rel=1e-9)


def test_hamiltonian_commutes_with_swap():
    s = _pair(32, spin=[0.3, 0.5, 0.2j, -0.4])
    sym = ManyBodyState(s.phi + swap(s), s.system).normalized()
    assert symmetry_deviation(sym, "symmetric") < 1e-14
    Hs = ManyBodyState(hamiltonian_apply(sym), s.system)
    assert symmetry_deviation(Hs, "symmetric") < 1e-12
    out = evolve(ManyBodyState(sym.phi, s.system, symmetry="symmetric"), 1.0, 0.05)
    assert symmetry_deviation(out, "symmetric") < 1e-12


def test_symmetry_tag_verified():
    s = _pair(32, spin=[1, 0, 0, 0])
    with pytest.raises(ConfigurationError):
        ManyBodyState(s.phi, s.system, symmetry="antisymmetric")


def test_eigenstate_stationary_and_norm():
    g = SpacetimeGrid.uniform(1, 48, 16.0)
    sysm = ManyBodySystem(g, [ParticleSpec(), ParticleSpec()], TRAP)
    _, (s0,) = eigenstates(sysm, 1)
    rho0 = densities(s0).rho
    # Crank-Nicolson is a function of H, so eigenstates only pick up a phase
    out = evolve(s0, 5.0, 0.05, scheme="cn")
    assert out.meta["norm_drift"] < 1e-8
    assert np.abs(densities(out).rho - rho0).max() < 1e-10 * rho0.max()
    # the split-operator step leaves an O(dt^2) splitting error
    out = evolve(s0, 5.0, 0.05, scheme="split")
    assert out.meta["norm_drift"] < 1e-8
    assert np.abs(densities(out).rho - rho0).max() < 1e-3 * rho0.max()


def test_energy_conserved_over_1000_steps():
    s = _pair(32)
    E0 = energy(s)
    out = evolve(s, 10.0, 0.01, scheme="cn")
    assert out.meta["norm_drift"] < 1e-8
    assert abs(energy(out) - E0) / abs(E0) < 1e-8


def test_two_level_oscillation_frequency():
    g = SpacetimeGrid.uniform(1, 48, 16.0)
    sysm = ManyBodySystem(g, [ParticleSpec(), ParticleSpec()], TRAP)
    E, (a, b) = eigenstates(sysm, 2)
    s = ManyBodyState(a.phi + b.phi, sysm).normalized()
    x = g.axis(0)
    dt, every = 0.05, 4
    period = 2 * np.pi / (E[1] - E[0])
    xs, ts = [], []
    for _ in range(int(5 * period / (dt * every))):
        xs.append(np.sum(marginals(densities(s), 0)["rho"] * x) * g.cell_volume)
        ts.append(s.t)
        s = evolve(s, dt * every, dt)
    xs, ts = np.array(xs) - np.mean(xs), np.array(ts)
    up = [ts[i] - xs[i] * (ts[i + 1] - ts[i]) / (xs[i + 1] - xs[i]) for i in range(len(ts) - 1)
          if xs[i] < 0 <= xs[i + 1]]
    omega = 2 * np.pi / np.diff(up).mean()
    assert omega == pytest.approx(E[1] - E[0], rel=0.01)


def test_free_centroid_velocity():
    g = SpacetimeGrid.uniform(1, 512, 51.2)
    sysm = ManyBodySystem(g, [ParticleSpec(m=2.0)])
    x = g.axis(0)
    s = ManyBodyState(np.array([1, 0])[:, None] * np.exp(-(x + 10) ** 2 / 8 + 1.2j * x), sysm).normalized()
    b = densities(s)
    p = np.sum(b.p[0][0]) * g.cell_volume
    out = evolve(s, 10.0, 0.05)
    c0 = np.sum(b.rho * x) * g.cell_volume
    c1 = np.sum(densities(out).rho * x) * g.cell_volume
    assert (c1 - c0) / 10.0 == pytest.approx(p / 2.0, rel=0.01)


def test_real_ground_state_has_no_orbital_current():
    g = SpacetimeGrid.uniform(1, 48, 16.0)
    sysm = ManyBodySystem(g, [ParticleSpec(), ParticleSpec()], TRAP)
    _, (s0,) = eigenstates(sysm, 1)
    b = densities(s0)
    assert np.abs(b.j_orbital[0]).max() < 1e-12
    assert b.rho.min() >= 0


def test_spin_up_magnetic_moment():
    g = SpacetimeGrid.uniform(3, 24, 12.0)
    sysm = ManyBodySystem(g, [ParticleSpec(q=-1.0)])
    r2 = sum(c ** 2 for c in g.mesh())
    s = ManyBodyState(np.array([1.0, 0.0]).reshape(2, 1, 1, 1) * np.exp(-r2 / 4), sysm).normalized()
    b = densities(s)
    assert np.abs(b.j_orbital[0]).max() == 0.0
    mu = magnetic_moment(b)
    # hbar / 2m along +z, with second-order stencil error
    assert mu[2] == pytest.approx(0.5, rel=0.02)
    assert np.abs(mu[:2]).max() < 1e-12


def test_densities_provisos_and_marginals():
    s = _pair(64)
    b = densities(s)
    assert b.rho.min() >= 0
    assert min(e.min() for e in b.eps) >= 0
    for a in range(2):
        assert np.array_equal(b.p[a], s.particles[a].m * b.j[a])
        m = marginals(b, a)
        assert np.sum(m["rho"]) * s.system.grid.cell_volume == pytest.approx(1.0, abs=1e-8)
    with pytest.raises(IndexError):
        marginals(b, 2)


def test_product_marginal_is_factor():
    g = SpacetimeGrid.uniform(1, 64, 16.0)
    sysm = ManyBodySystem(g, [ParticleSpec(), ParticleSpec()])
    x = g.axis(0)
    f1, f2 = np.exp(-(x - 2) ** 2), np.exp(-(x + 1) ** 2 / 3)
    s = product_state(sysm, [f1, f2], [[1, 0], [0, 1]])
    m = marginals(densities(s), 0)["rho"]
    expect = np.abs(f1) ** 2 / (np.sum(np.abs(f1) ** 2) * g.cell_volume)
    assert np.allclose(m, expect, atol=1e-12)


def test_singlet_marginals_equal():
    g = SpacetimeGrid.uniform(1, 48, 16.0)
    sysm = ManyBodySystem(g, [ParticleSpec(), ParticleSpec()], TRAP)
    _, (s0,) = eigenstates(sysm, 1, spin=SINGLET)
    s0 = ManyBodyState(s0.phi, sysm, symmetry="antisymmetric")
    b = densities(s0)
    m0, m1 = marginals(b, 0), marginals(b, 1)
    assert np.allclose(m0["rho"], m1["rho"], atol=1e-12)
    assert np.allclose(m0["eps"], m1["eps"], atol=1e-12)


def _suite_levels(spin=SINGLET, ext=TRAP):
    return [conservation_suite(_pair(n, spin=spin, ext=ext)) for n in (64, 128, 256)]


def test_conservation_converges_coulomb_pair_in_trap():
    reps = _suite_levels()
    for key in ("continuity", "momentum", "energy"):
        r = np.array([np.max(getattr(x, key)) for x in reps])
        assert np.all(r[:-1] / r[1:] >= 3.5), (key, r)
    assert all(x.min_eps >= 0 for x in reps)
    assert all(x.proviso_p == 0 for x in reps)


def test_stern_gerlach_force_balance_converges():
    # B_z = 0.3 + 0.1 x from A_y; spin tilted off z
    ext = ExternalFields(vector=lambda x: (0 * x, 0.3 * x + 0.05 * x ** 2, 0 * x))
    errs = []
    for n in (64, 128, 256):
        g = SpacetimeGrid.uniform(1, n, 16.0)
        sysm = ManyBodySystem(g, [ParticleSpec()], ext)
        x = g.axis(0)
        chi = np.array([np.cos(0.4), np.sin(0.4) * np.exp(0.3j)])
        s = ManyBodyState(chi[:, None] * np.exp(-(x - 0.5) ** 2 / 2 + 0.3j * x), sysm).normalized()
        errs.append(conservation_suite(s).momentum.max())
    errs = np.array(errs)
    assert np.all(errs[:-1] / errs[1:] >= 3.5), errs


def test_total_energy_identity():
    rep = total_energy_check(_pair(64))
    assert rep.relative < 1e-6
    g = SpacetimeGrid.uniform(1, 64, 16.0)
    one = ManyBodySystem(g, [ParticleSpec()])
    x = g.axis(0)
    s = ManyBodyState(np.array([1, 0])[:, None] * np.exp(-x ** 2), one).normalized()
    assert interaction_energy(s) == 0.0


def test_two_gaussians_coulomb_energy():
    d, w = 8.0, 0.3
    g = SpacetimeGrid.uniform(1, 400, 20.0)
    sysm = ManyBodySystem(g, [ParticleSpec(), ParticleSpec()], softening=0.2)
    x = g.axis(0)
    s = product_state(sysm, [np.exp(-(x - d / 2) ** 2 / (4 * w * w)), np.exp(-(x + d / 2) ** 2 / (4 * w * w))],
                      [[1, 0], [1, 0]])
    assert interaction_energy(s) == pytest.approx(1 / (4 * np.pi * d), rel=0.02)


def test_gauge_refinement_law():
    ext = ExternalFields(vector=lambda x: (0 * x, 0.3 * x, 0 * x))
    devs = []
    for n in (64, 128, 256):
        s = _pair(n, ext=ext)
        devs.append(gauge_deviation(s, lambda x: 0.3 * np.exp(-x ** 2 / 8),
                                    lambda x: (-0.075 * x * np.exp(-x ** 2 / 8),)))
    devs = np.array(devs)
    assert np.all(devs[:-1] / devs[1:] >= 3.5), devs


def _blob(g, times, x0, v, w=1.0):
    x = g.axis(0)
    rho = np.array([np.exp(-(x - x0 - v * t) ** 2 / (2 * w * w)) for t in times])
    rho /= np.sum(rho, axis=1, keepdims=True) * g.cell_volume
    return {"rho": rho, "j": (v * rho)[None]}


def test_member_product_static_and_moving():
    g = SpacetimeGrid.uniform(1, 64, 20.0, n_times=3, time_step=0.1)
    static = member_product_density([_blob(g, g.times(), -3, 0.0), _blob(g, g.times(), 3, 0.0)], g)
    assert static.continuity_residual == 0.0
    errs = []
    for n in (64, 128, 256):
        gn = SpacetimeGrid.uniform(1, n, 20.0, n_times=5, time_step=20.0 / n)
        pd = member_product_density([_blob(gn, gn.times(), -3, 0.0), _blob(gn, gn.times(), 2, 0.5)], gn)
        errs.append(pd.continuity_residual)
    errs = np.array(errs)
    assert np.all(errs[:-1] / errs[1:] >= 3.5), errs


def test_member_product_requires_normalization():
    g = SpacetimeGrid.uniform(1, 64, 20.0, n_times=3, time_step=0.1)
    bad = _blob(g, g.times(), 0.0, 0.0)
    bad["rho"] = 2 * bad["rho"]
    with pytest.raises(ConfigurationError):
        member_product_density([bad, _blob(g, g.times(), 1.0, 0.0)], g)


def test_weighted_members_are_not_a_product():
    g = SpacetimeGrid.uniform(1, 64, 20.0, n_times=1)
    members = [
        member_product_density([_blob(g, [0], -3, 0), _blob(g, [0], 3, 0)], g).rho[0],
        member_product_density([_blob(g, [0], 3, 0), _blob(g, [0], -3, 0)], g).rho[0],
    ]
    assert joint_rank(members[0], 1) == 1
    assert joint_rank(ensemble_average(members, [0.5, 0.5]), 1) == 2


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=8, max_size=8), st.floats(-1.5, 1.5))
def test_energy_density_nonnegative(parts, k):
    chi = np.array(parts[:4]) + 1j * np.array(parts[4:])
    if np.linalg.norm(chi) < 1e-3:
        return
    s = _pair(32, spin=chi / np.linalg.norm(chi))
    s = ManyBodyState(s.phi * np.exp(1j * k * s.system.lift(s.system.grid.axis(0), 0)), s.system)
    b = densities(s)
    assert min(e.min() for e in b.eps) >= 0
