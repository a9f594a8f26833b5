import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate

from ensemble_tenets import manufactured as mf
from ensemble_tenets import tensor_core as tc
from ensemble_tenets.grid import (
    ConfigurationError,
    SpacetimeGrid,
    StencilError,
    interior_mask,
    physical_window,
)
from ensemble_tenets.kg import KGParams, gaussian_packet, kg_history, kg_step, uniform_field_potential


def grid3(n, length, nt=3, ratio=1.0, boundary="absorbing"):
    h = length / n
    return SpacetimeGrid(3, (n,) * 3, (h,) * 3, time_step=ratio * h, boundary=boundary, n_times=nt, t0=-ratio * h)


def window_max(res, win):
    ncomp = res.ndim - len(win)
    return float(np.abs(res[(slice(None),) * ncomp + win]).max())


# ---------------------------------------------------------------- Faraday


def test_faraday_of_zero_and_constant_potential():
    g = grid3(6, 6.0)
    F = tc.faraday_from_potential(tc.FourPotential(np.zeros((4,) + g.full_shape), g))
    assert np.all(F.components == 0)
    A = np.ones((4,) + g.full_shape) * np.array([1.0, -2.0, 0.5, 3.0]).reshape(4, 1, 1, 1, 1)
    F = tc.faraday_from_potential(tc.FourPotential(A, g))
    assert np.abs(F.components).max() < 1e-12


def test_faraday_linear_scalar_potential():
    # A^0 = -E z; the lower-index derivative gives F_{30} = -E, i.e. F^{30} = +E
    E = 0.7
    g = grid3(7, 7.0)
    z = g.spacetime_mesh()[3]
    A = np.zeros((4,) + g.full_shape)
    A[0] = -E * z
    F = tc.faraday_from_potential(tc.FourPotential(A, g))
    assert np.allclose(F.upper()[3, 0], E, atol=1e-12)
    assert np.allclose(F.components[3, 0], -E, atol=1e-12)
    mask = np.ones((4, 4), bool)
    mask[0, 3] = mask[3, 0] = False
    assert np.abs(F.components[mask]).max() < 1e-12
    # E field along +z
    assert np.allclose(F.electric()[2], E, atol=1e-12)


def test_faraday_stencil_error():
    g = SpacetimeGrid(3, (2, 5, 5), (1.0, 1.0, 1.0), n_times=3, boundary="absorbing")
    with pytest.raises(StencilError):
        tc.faraday_from_potential(tc.FourPotential(np.zeros((4,) + g.full_shape), g))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (4, 3, 4, 4, 4), elements=st.floats(-10, 10)))
def test_faraday_antisymmetric_exactly(A):
    g = grid3(4, 4.0)
    F = tc.faraday_from_potential(tc.FourPotential(A, g)).components
    assert np.array_equal(F, -np.swapaxes(F, 0, 1))


# ---------------------------------------------------------------- canonical tensor


def test_canonical_unit_electric_field():
    g = SpacetimeGrid(3, (3, 3, 3), (1.0,) * 3)
    E = np.zeros((3, 1, 3, 3, 3))
    E[0] = 1.0
    theta = tc.canonical_tensor(tc.FaradayTensor.from_fields(E, None, g)).components
    assert np.allclose(theta[0, 0], 0.5, atol=1e-14)
    assert np.allclose(theta[1, 1], -0.5, atol=1e-14)  # tension along the field line
    assert np.allclose(theta[2, 2], 0.5, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, (3,), elements=st.floats(-5, 5)),
    arrays(np.float64, (3,), elements=st.floats(-5, 5)),
)
def test_canonical_matches_maxwell_stress(Ev, Bv):
    # independent oracle: energy density, Poynting vector and Maxwell stress
    g = SpacetimeGrid(3, (3, 3, 3), (1.0,) * 3)
    E = np.broadcast_to(Ev.reshape(3, 1, 1, 1, 1), (3, 1, 3, 3, 3)).copy()
    B = np.broadcast_to(Bv.reshape(3, 1, 1, 1, 1), (3, 1, 3, 3, 3)).copy()
    theta = tc.canonical_tensor(tc.FaradayTensor.from_fields(E, B, g)).components[..., 0, 0, 0, 0]
    u = 0.5 * (Ev @ Ev + Bv @ Bv)
    S = np.cross(Ev, Bv)
    sigma = -np.outer(Ev, Ev) - np.outer(Bv, Bv) + u * np.eye(3)
    scale = max(1.0, u)
    assert abs(theta[0, 0] - u) <= 1e-12 * scale
    assert np.allclose(theta[0, 1:], S, atol=1e-12 * scale)
    assert np.allclose(theta[1:, 1:], sigma, atol=1e-12 * scale)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 4, 1, 2, 2, 2), elements=st.floats(-100, 100)))
def test_canonical_symmetric_traceless(raw):
    g = SpacetimeGrid(3, (2, 2, 2), (1.0,) * 3)
    F = tc.FaradayTensor(raw, g)
    theta = tc.canonical_tensor(F)
    c = theta.components
    scale = max(1.0, float(np.abs(c).max()))
    assert np.array_equal(c, np.swapaxes(c, 0, 1))
    assert np.abs(theta.trace()).max() <= 1e-12 * scale


def test_canonical_zero():
    g = SpacetimeGrid(1, (4,), (1.0,))
    F = tc.FaradayTensor(np.zeros((2, 2, 1, 4)), g)
    assert np.all(tc.canonical_tensor(F).components == 0)


# ---------------------------------------------------------------- Poynting


def test_poynting_zero():
    g = grid3(5, 5.0)
    F = tc.FaradayTensor(np.zeros((4, 4) + g.full_shape), g)
    assert np.all(tc.poynting_residual(F, None) == 0)


def _poynting_levels(field, length, ns, half_width, ratio=1.0):
    out = []
    for n in ns:
        g = grid3(n, length, ratio=ratio)
        b = field.sample(g)
        F = tc.faraday_from_potential(b.A)
        r = tc.poynting_residual(F, b.j)
        out.append(window_max(r, physical_window(g, half_width)))
    return np.array(out)


def test_poynting_second_order_sourced():
    errs = _poynting_levels(mf.sourced_wobble(3), 12.0, (16, 32, 64), 4.0)
    ratios = errs[:-1] / errs[1:]
    assert np.all(ratios >= 3.5), ratios


def test_poynting_second_order_vacuum_wave():
    errs = _poynting_levels(mf.crossed_packets(0.5, 3.0), 8.0, (16, 32, 64), 2.0, ratio=0.8)
    ratios = errs[:-1] / errs[1:]
    assert np.all(ratios >= 3.5), ratios


def test_poynting_static_blob_64():
    # fourth-order stencils; the second-order residual on this lattice is ~3e-2
    g = SpacetimeGrid(3, (64,) * 3, (10.0 / 64,) * 3, time_step=10.0 / 64, boundary="absorbing", n_times=3)
    b = mf.gaussian_blob(1.0, 1.0).sample(g)
    F = tc.faraday_from_potential(b.A, order=4)
    r = tc.poynting_residual(F, b.j, order=4)
    win = interior_mask(g, margin=4)
    scale = float(np.abs(tc.lorentz_force_density(F, b.j)[(slice(None),) + win]).max())
    assert window_max(r, win) / scale < 1e-3


# ---------------------------------------------------------------- total conservation


def _kg_total(n, E=0.05, corrupt=False):
    grid = SpacetimeGrid.uniform(1, n, 60.0, time_step=30.0 / n, boundary="absorbing")
    s = gaussian_packet(grid, [0.0], 4.0, [0.5], KGParams(), A_ext=uniform_field_potential([E], grid))
    s = kg_step(s, int(round(2.0 / grid.time_step)))
    st_, j, T, A = kg_history(s, 3)
    F_ext = tc.faraday_from_potential(A, st_)
    F_self = tc.gauss_field_1d(j)
    theta = tc.canonical_tensor(F_ext) + tc.interaction_tensor(F_ext, F_self)
    if corrupt:
        c = T.components.copy()
        c[0, 0] *= 2.0
        T = tc.EMTensor(c, st_)
    r = tc.total_conservation_residual(theta, [T])
    return window_max(r, physical_window(st_, 15.0)), float(np.abs(T.components).max())


def test_total_conservation_zero():
    g = grid3(5, 5.0)
    Z = tc.EMTensor(np.zeros((4, 4) + g.full_shape), g)
    assert np.all(tc.total_conservation_residual(Z, [Z, Z]) == 0)


def test_total_conservation_kg_interaction_converges():
    errs = np.array([_kg_total(n)[0] for n in (64, 128, 256)])
    ratios = errs[:-1] / errs[1:]
    assert np.all(ratios >= 3.5), ratios


def test_total_conservation_negative_control():
    good, _ = _kg_total(128)
    bad, _ = _kg_total(128, corrupt=True)
    assert bad > 20 * good


# ---------------------------------------------------------------- angular momentum


def _angular(n, corrupt=False):
    g = grid3(n, 8.0, ratio=0.8)
    P = tc.canonical_tensor(mf.crossed_packets(0.5, 3.0).sample(g).F)
    if corrupt:
        c = P.components.copy()
        r2 = sum(x**2 for x in g.spacetime_mesh()[1:])
        c[1, 2] += 0.2 * np.exp(-r2 / 2.0)
        P = tc.EMTensor(c, g, symmetrize=False)
    return window_max(tc.angular_momentum_residual(P), physical_window(g, 2.0))


def test_angular_momentum_zero_and_dims():
    g = grid3(5, 5.0)
    assert np.all(tc.angular_momentum_residual(tc.EMTensor(np.zeros((4, 4) + g.full_shape), g)) == 0)
    g2 = SpacetimeGrid(2, (5, 5), (1.0, 1.0), n_times=3)
    with pytest.raises(ConfigurationError):
        tc.angular_momentum_residual(tc.EMTensor(np.zeros((3, 3) + g2.full_shape), g2))


def test_angular_momentum_second_order():
    errs = np.array([_angular(n) for n in (16, 32, 64)])
    ratios = errs[:-1] / errs[1:]
    assert np.all(ratios >= 3.5), ratios


def test_angular_momentum_asymmetric_control():
    # the antisymmetric part is not a truncation error: it survives refinement
    bad = np.array([_angular(n, corrupt=True) for n in (32, 64)])
    good = np.array([_angular(n) for n in (32, 64)])
    assert np.all(bad > 10 * good)
    assert bad[1] > 0.8 * bad[0]


# ---------------------------------------------------------------- covariance


@pytest.fixture(scope="module")
def wobble_bundle():
    return mf.sourced_wobble(3).sample(grid3(16, 12.0))


def _maxwell_rel(bundle):
    return tc.maxwell_relative(tc.faraday_from_potential(bundle.A), bundle.j)


def test_scale_identity_and_domain(wobble_bundle):
    b = tc.scale_transform(wobble_bundle, 1.0)
    assert np.array_equal(b.A.components, wobble_bundle.A.components)
    assert b.grid == wobble_bundle.grid
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            tc.scale_transform(wobble_bundle, bad)


@pytest.mark.parametrize("lam", [2.0, 0.37, 3.0])
def test_scale_preserves_maxwell_residual(wobble_bundle, lam):
    r0 = _maxwell_rel(wobble_bundle)
    r1 = _maxwell_rel(tc.scale_transform(wobble_bundle, lam))
    assert abs(r1 - r0) <= 1e-12 * max(r0, 1e-300) + 1e-15


def test_scale_group_law(wobble_bundle):
    a = tc.scale_transform(tc.scale_transform(wobble_bundle, 1.5), 2.0)
    b = tc.scale_transform(wobble_bundle, 3.0)
    assert np.allclose(a.A.components, b.A.components, rtol=1e-14, atol=0)
    assert np.allclose(a.j.components, b.j.components, rtol=1e-14, atol=0)
    assert np.allclose(a.grid.spacing, b.grid.spacing, rtol=1e-14)


def test_pt_involution_and_maxwell(wobble_bundle):
    b = wobble_bundle
    b.tensors["theta"] = tc.canonical_tensor(b.F)
    once = tc.pt_transform(b)
    twice = tc.pt_transform(once)
    assert np.array_equal(twice.A.components, b.A.components)
    assert np.array_equal(twice.j.components, b.j.components)
    assert np.array_equal(twice.tensors["theta"].components, b.tensors["theta"].components)
    r0, r1 = _maxwell_rel(b), _maxwell_rel(once)
    assert abs(r1 - r0) <= 1e-12 * r0


def test_pt_flips_charge_sign():
    g = grid3(8, 8.0)
    rho = mf.gaussian_density(1.0, 1.5, g)
    j = np.zeros((4,) + g.full_shape)
    j[0] = rho + 0.01
    b = tc.FieldBundle(g, j=tc.CurrentDensity(j, g))
    out = tc.pt_transform(b)
    assert np.all(out.j.components[0] < 0)


def test_pt_needs_symmetric_grid():
    g = SpacetimeGrid(1, (5,), (1.0,), n_times=3, origin=(0.0,))
    b = tc.FieldBundle(g, A=tc.FourPotential(np.zeros((2,) + g.full_shape), g))
    with pytest.raises(ConfigurationError):
        tc.pt_transform(b)


# ---------------------------------------------------------------- Green kernel


def test_unit_cube_inverse_r_constant():
    # int over [-1/2,1/2]^3 of 1/r = 6 pyramids; each equals (a/2) int_face dA / r with a = 1/2
    face, _ = integrate.dblquad(lambda y, z: 1.0 / np.sqrt(0.25 + y * y + z * z), -0.5, 0.5, -0.5, 0.5)
    assert abs(6 * 0.25 * face - tc.UNIT_CUBE_INVERSE_R) < 1e-9


def _coulomb_oracle(r, q, sigma):
    rho = lambda s: q * np.exp(-(s**2) / (2 * sigma**2)) / ((2 * np.pi) ** 1.5 * sigma**3)
    inner = integrate.quad(lambda s: rho(s) * s**2, 0, r)[0] / r
    outer = integrate.quad(lambda s: rho(s) * s, r, np.inf)[0]
    return inner + outer


def _static_blob(n=64, length=16.0, sigma=1.0):
    g = SpacetimeGrid(3, (n,) * 3, (length / n,) * 3, time_step=length / n, boundary="absorbing", n_times=3)
    j = np.zeros((4,) + g.full_shape)
    j[0] = mf.gaussian_density(1.0, sigma, g)
    return g, tc.CurrentDensity(j, g)


def test_green_zero_source():
    g = grid3(6, 6.0)
    A = tc.potential_from_current(tc.CurrentDensity(np.zeros((4,) + g.full_shape), g))
    assert np.all(A.components == 0)


@pytest.fixture(scope="module")
def blob64():
    g, j = _static_blob()
    return g, j, tc.potential_from_current(j, tc.GreenKernelConfig(1.0, 0.0))


def test_green_static_blob_matches_coulomb(blob64):
    g, j, A = blob64
    assert A.meta["static"]
    r = np.sqrt(sum(x**2 for x in g.spacetime_mesh()[1:]))[1]
    phi = A.components[0, 1]
    sel = (r > 3.0) & (r < 7.0)
    rs = r[sel]
    # sample the oracle on a handful of radii and interpolate (it is smooth)
    rr = np.linspace(rs.min(), rs.max(), 40)
    oracle = np.interp(rs, rr, [_coulomb_oracle(x, 1.0, 1.0) for x in rr])
    assert np.max(np.abs(phi[sel] - oracle) / oracle) < 0.02


def test_green_half_advanced_equals_retarded_static(blob64):
    g, j, A_ret = blob64
    A_half = tc.potential_from_current(j, tc.GreenKernelConfig(0.5, 0.5))
    assert np.allclose(A_half.components, A_ret.components, rtol=1e-12, atol=0)


def test_green_maxwell_residual_64(blob64):
    g, j, A = blob64
    F = tc.faraday_from_potential(A)
    assert tc.maxwell_relative(F, j) < 0.05


def test_green_time_dependent_agrees_with_static():
    # a slowly moving blob: retarded potential close to the instantaneous Coulomb one near the source
    n, L = 24, 12.0
    h = L / n
    g = SpacetimeGrid(3, (n,) * 3, (h,) * 3, time_step=h, boundary="absorbing", n_times=5, t0=-2 * h)
    j = np.zeros((4,) + g.full_shape)
    j[0] = mf.gaussian_density(1.0, 1.5, g) * (1.0 + 1e-4 * np.arange(5)).reshape(5, 1, 1, 1)
    jd = tc.CurrentDensity(j, g, conserved=False)
    A = tc.potential_from_current(jd, time_indices=[2])
    assert not A.meta["static"]
    assert A.meta["history_clamped"]
    static = tc.potential_from_current(tc.CurrentDensity(j[:, 2:3], g.with_times(1)))
    c = n // 2
    assert abs(A.components[0, 2, c, c, c] / static.components[0, 0, c, c, c] - 1) < 1e-3


def test_green_flags_nonconserved_source():
    g = grid3(12, 12.0, nt=5)
    j = np.zeros((4,) + g.full_shape)
    t = g.spacetime_mesh()[0]
    j[0] = mf.gaussian_density(1.0, 2.0, g) * (1.0 + 0.5 * t)  # charge grows, no current
    A = tc.potential_from_current(tc.CurrentDensity(j, g, conserved=False))
    assert A.meta["nonconserved"]


def test_gauge_shift_leaves_faraday_unchanged():
    errs = []
    for n in (16, 32, 64):
        g = grid3(n, 8.0)
        x = g.spacetime_mesh()
        b = mf.sourced_wobble(3).sample(g)
        # analytic gradient of Lambda = sin(0.4 t + 0.3 x) exp(-(y^2 + z^2)/8)
        s_, c_ = np.sin(0.4 * x[0] + 0.3 * x[1]), np.cos(0.4 * x[0] + 0.3 * x[1])
        env = np.exp(-(x[2] ** 2 + x[3] ** 2) / 8)
        dl = np.stack([0.4 * c_ * env, 0.3 * c_ * env, -x[2] / 4 * s_ * env, -x[3] / 4 * s_ * env])
        shifted = b.A.components + dl * np.array([1.0, -1.0, -1.0, -1.0]).reshape(4, 1, 1, 1, 1)
        F0 = tc.faraday_from_potential(b.A).components
        F1 = tc.faraday_from_potential(tc.FourPotential(shifted, g)).components
        errs.append(window_max(F1 - F0, physical_window(g, 2.5)))
    errs = np.array(errs)
    assert errs[-1] < 1e-3
    assert np.all(errs[:-1] / errs[1:] > 3.0)
