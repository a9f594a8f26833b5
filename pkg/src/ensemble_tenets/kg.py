"""Klein-Gordon field in an external four-potential.

Conventions: ``D_mu = hbar d_mu + i q A_mu``, so a positive-frequency
solution ``exp(-i(E t - p.x)/hbar)`` carries charge ``q``; the conserved
current is ``j^mu = q Im[phi (D^mu phi)^*]`` and the symmetric tensor

    T^{nu mu} = g^{nu mu}/2 (m^2 |phi|^2 - (D^lam phi)^* D_lam phi)
                + Re[D^nu phi (D^mu phi)^*].

Time integration is explicit leapfrog on the second-order form.  A state
holds two time levels; currents and tensors are evaluated at the half level
between them, where the leapfrog Noether charge is exactly the integral of
``j^0`` (for a static potential).
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .grid import ConfigurationError, SpacetimeGrid, derivative, metric
from .tensor_core import (
    CurrentDensity,
    EMTensor,
    FourPotential,
    divergence,
    faraday_from_potential,
    lorentz_force_density,
)

PotentialLike = "np.ndarray | Callable[[float], np.ndarray] | None"


@dataclass(frozen=True)
class KGParams:
    hbar: float = 1.0
    q: float = 1.0
    m: float = 1.0

    def __post_init__(self) -> None:
        if self.hbar <= 0.0:
            raise ConfigurationError("hbar must be positive")
        if self.m < 0.0:
            raise ConfigurationError("mass must be non-negative")


def potential_at(A_ext, grid: SpacetimeGrid, t: float) -> np.ndarray:
    """External ``A^mu`` sampled on the spatial lattice at time ``t``."""
    shape = (grid.ndim,) + grid.shape
    if A_ext is None:
        return np.zeros(shape)
    A = A_ext(t) if callable(A_ext) else A_ext
    A = np.asarray(A, dtype=float)
    if A.shape != shape:
        raise ValueError(f"external potential has shape {A.shape}, expected {shape}")
    return A


def laplacian(f: np.ndarray, grid: SpacetimeGrid) -> np.ndarray:
    """Compact 3-point Laplacian; zero ghost values on absorbing edges."""
    out = np.zeros_like(f)
    nsp = grid.spatial_dims
    for i in range(nsp):
        ax = f.ndim - nsp + i
        h2 = grid.spacing[i] ** 2
        if grid.boundary == "periodic":
            out += (np.roll(f, -1, ax) + np.roll(f, 1, ax) - 2.0 * f) / h2
        else:
            pad = [(0, 0)] * f.ndim
            pad[ax] = (1, 1)
            g = np.pad(f, pad)
            sl = lambda a, b: tuple(slice(a, b) if k == ax else slice(None) for k in range(f.ndim))
            out += (g[sl(2, None)] + g[sl(0, -2)] - 2.0 * f) / h2
    return out


def _dx(f: np.ndarray, i: int, grid: SpacetimeGrid) -> np.ndarray:
    return derivative(f, i + 1, grid, spatial_only=True)


def spatial_covariant_square(phi: np.ndarray, a: np.ndarray, grid: SpacetimeGrid, hbar: float, q: float) -> np.ndarray:
    """``sum_i D_i D_i phi`` for vector potential ``a = (A^1, ...)``."""
    out = hbar**2 * laplacian(phi, grid)
    if q != 0.0 and np.any(a):
        for i in range(grid.spatial_dims):
            ai = a[i]
            out = out - 1j * q * hbar * (_dx(ai * phi, i, grid) + ai * _dx(phi, i, grid))
            out = out - q**2 * ai**2 * phi
    return out


def covariant_gradient(
    phi: np.ndarray, dphi_dt: np.ndarray, A: np.ndarray, grid: SpacetimeGrid, hbar: float, q: float
) -> np.ndarray:
    """``D_mu phi`` (lower index) for a snapshot; ``A`` holds upper components."""
    d = grid.ndim
    out = np.empty((d,) + phi.shape, dtype=complex)
    out[0] = hbar * dphi_dt + 1j * q * A[0] * phi
    for i in range(grid.spatial_dims):
        out[i + 1] = hbar * _dx(phi, i, grid) - 1j * q * A[i + 1] * phi  # A_i = -A^i
    return out


def current_from_gradient(phi: np.ndarray, Dphi: np.ndarray, q: float) -> np.ndarray:
    g = metric(Dphi.shape[0])
    return np.stack([q * g[mu] * np.imag(phi * np.conj(Dphi[mu])) for mu in range(Dphi.shape[0])])


def tensor_from_gradient(phi: np.ndarray, Dphi: np.ndarray, m: float) -> np.ndarray:
    d = Dphi.shape[0]
    g = metric(d)
    contraction = sum(g[l] * np.abs(Dphi[l]) ** 2 for l in range(d))
    trace_part = 0.5 * (m**2 * np.abs(phi) ** 2 - contraction)
    T = np.empty((d, d) + phi.shape)
    for nu in range(d):
        for mu in range(nu, d):
            val = g[nu] * g[mu] * np.real(Dphi[nu] * np.conj(Dphi[mu]))
            if nu == mu:
                val = val + g[mu] * trace_part
            T[nu, mu] = val
            T[mu, nu] = val
    return T


@dataclass
class KGState:
    phi: np.ndarray  # level n, time t
    phi_prev: np.ndarray  # level n-1, time t - dt
    grid: SpacetimeGrid  # spatial lattice; time_step is the leapfrog step
    params: KGParams = field(default_factory=KGParams)
    A_ext: object = None  # (D, *shape) array, callable t -> array, or None
    t: float = 0.0
    meta: dict = field(default_factory=dict)

    def copy(self) -> "KGState":
        return copy.deepcopy(self)

    @property
    def dt(self) -> float:
        return self.grid.time_step

    def potential(self, t: float) -> np.ndarray:
        return potential_at(self.A_ext, self.grid, t)

    def half_level(self) -> tuple[np.ndarray, np.ndarray, float]:
        """``phi`` and ``d_t phi`` at ``t - dt/2``."""
        return 0.5 * (self.phi + self.phi_prev), (self.phi - self.phi_prev) / self.dt, self.t - 0.5 * self.dt

    def charge(self) -> float:
        return float(kg_current(self).components[0, 0].sum() * self.grid.cell_volume)


def stability_limit(grid: SpacetimeGrid, params: KGParams) -> float:
    """Largest stable leapfrog step for the free discrete operator."""
    w2 = sum(4.0 / h**2 for h in grid.spacing) + (params.m / params.hbar) ** 2
    return 2.0 / np.sqrt(w2)


def check_cfl(grid: SpacetimeGrid, params: KGParams) -> None:
    dt = grid.time_step
    cfl = min(grid.spacing) / np.sqrt(grid.spatial_dims)
    if dt > cfl or dt >= stability_limit(grid, params):
        raise ConfigurationError(
            f"time step {dt:g} violates the leapfrog bound (CFL {cfl:g}, "
            f"mass-corrected {stability_limit(grid, params):g})"
        )


def _spatial_terms(phi: np.ndarray, A: np.ndarray, grid: SpacetimeGrid, p: KGParams) -> np.ndarray:
    """``-sum_i D_i D_i phi + (m^2 - q^2 V^2) phi`` (everything except time derivatives)."""
    V = A[0]
    out = -spatial_covariant_square(phi, A[1:], grid, p.hbar, p.q)
    return out + (p.m**2 - (p.q * V) ** 2) * phi


def equation_residual(
    phi_m: np.ndarray, phi_0: np.ndarray, phi_p: np.ndarray, A_m: np.ndarray, A_0: np.ndarray, A_p: np.ndarray,
    grid: SpacetimeGrid, p: KGParams,
) -> np.ndarray:
    """Discrete ``(D^mu D_mu + m^2) phi`` at the middle of three levels."""
    dt = grid.time_step
    V = A_0[0]
    Vt = (A_p[0] - A_m[0]) / (2.0 * dt)
    out = p.hbar**2 * (phi_p - 2.0 * phi_0 + phi_m) / dt**2
    out = out + 1j * p.q * p.hbar * (V * (phi_p - phi_m) / dt + Vt * phi_0)
    return out + _spatial_terms(phi_0, A_0, grid, p)


def kg_step(state: KGState, n_steps: int = 1) -> KGState:
    """Advance ``(D^mu D_mu + m^2) phi = 0`` by ``n_steps`` leapfrog steps."""
    check_cfl(state.grid, state.params)
    s = state.copy()
    p = s.params
    dt = s.dt
    q0 = s.charge()
    static = not callable(s.A_ext)
    A_fixed = s.potential(s.t) if static else None
    for _ in range(n_steps):
        A0 = A_fixed if static else s.potential(s.t)
        if static:
            Vt = 0.0
        else:
            Vt = (s.potential(s.t + dt)[0] - s.potential(s.t - dt)[0]) / (2.0 * dt)
        V = A0[0]
        rhs = (
            p.hbar**2 * (2.0 * s.phi - s.phi_prev) / dt**2
            + 1j * p.q * p.hbar * V * s.phi_prev / dt
            - 1j * p.q * p.hbar * Vt * s.phi
            - _spatial_terms(s.phi, A0, s.grid, p)
        )
        new = rhs / (p.hbar**2 / dt**2 + 1j * p.q * p.hbar * V / dt)
        s.phi_prev, s.phi = s.phi, new
        s.t += dt
        if not np.all(np.isfinite(s.phi)):
            raise FloatingPointError("Klein-Gordon field blew up; check the time step")
    q1 = s.charge()
    s.meta["charge_drift"] = abs(q1 - q0) / abs(q0) if q0 != 0 else abs(q1 - q0)
    s.meta["steps"] = state.meta.get("steps", 0) + n_steps
    return s


def _snapshot(state: KGState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    phi, dphi, t = state.half_level()
    A = state.potential(t)
    p = state.params
    Dphi = covariant_gradient(phi, dphi, A, state.grid, p.hbar, p.q)
    return phi, Dphi, A


def _one_time(grid: SpacetimeGrid, t: float) -> SpacetimeGrid:
    return grid.with_times(1, t)


def kg_current(state: KGState) -> CurrentDensity:
    """``j^mu`` at the half level ``t - dt/2`` (single time sample)."""
    phi, Dphi, _ = _snapshot(state)
    j = current_from_gradient(phi, Dphi, state.params.q)
    g1 = _one_time(state.grid, state.t - 0.5 * state.dt)
    return CurrentDensity(j[:, None], g1, conserved=True)


def kg_emtensor(state: KGState) -> EMTensor:
    phi, Dphi, _ = _snapshot(state)
    T = tensor_from_gradient(phi, Dphi, state.params.m)
    g1 = _one_time(state.grid, state.t - 0.5 * state.dt)
    return EMTensor(T[:, :, None], g1)


def kg_history(state: KGState, n_levels: int = 3) -> tuple[SpacetimeGrid, CurrentDensity, EMTensor, FourPotential]:
    """Current, tensor and external potential on ``n_levels`` consecutive half levels."""
    s = state
    js, Ts, As = [], [], []
    for k in range(n_levels):
        if k:
            s = kg_step(s, 1)
        phi, Dphi, A = _snapshot(s)
        js.append(current_from_gradient(phi, Dphi, s.params.q))
        Ts.append(tensor_from_gradient(phi, Dphi, s.params.m))
        As.append(A)
    st = state.grid.with_times(n_levels, state.t - 0.5 * state.dt)
    j = CurrentDensity(np.stack(js, axis=1), st, conserved=True)
    T = EMTensor(np.stack(Ts, axis=2), st)
    A = FourPotential(np.stack(As, axis=1), st)
    return st, j, T, A


def kg_tenet_residual(state: KGState, order: int = 2) -> tuple[np.ndarray, SpacetimeGrid]:
    """``d_nu T^{nu mu} - F_ext^{mu nu} j_nu`` on three half levels.

    Only the middle time sample uses a centred time difference; use
    :func:`ensemble_tenets.grid.interior_mask` to select it.
    """
    st, j, T, A = kg_history(state, 3)
    res = divergence(T.components, st, order)
    if state.A_ext is not None:
        F = faraday_from_potential(A, st, order)
        res = res - lorentz_force_density(F, j)
    return res, st


@dataclass
class GaugeReport:
    current_deviation: float
    tensor_deviation: float
    current_scale: float
    tensor_scale: float

    @property
    def relative(self) -> float:
        return max(self.current_deviation / self.current_scale, self.tensor_deviation / self.tensor_scale)


def gauge_transform(state: KGState, Lambda: np.ndarray) -> KGState:
    """``A -> A + d Lambda``, ``phi -> exp(-i q Lambda / hbar) phi`` for static ``Lambda``."""
    s = state.copy()
    p = s.params
    grad = [_dx(Lambda, i, s.grid) for i in range(s.grid.spatial_dims)]
    base = s.A_ext

    def shifted(t: float, base=base) -> np.ndarray:
        A = potential_at(base, s.grid, t).copy()
        for i, gi in enumerate(grad):
            A[i + 1] -= gi  # A_i + d_i Lambda  <=>  A^i - d_i Lambda
        return A

    s.A_ext = shifted if callable(base) else shifted(0.0)
    phase = np.exp(-1j * p.q * Lambda / p.hbar)
    s.phi = s.phi * phase
    s.phi_prev = s.phi_prev * phase
    return s


def kg_gauge_check(state: KGState, Lambda: np.ndarray | float) -> GaugeReport:
    """Max deviation of ``j`` and ``T`` under a static gauge shift."""
    Lambda = np.broadcast_to(np.asarray(Lambda, dtype=float), state.grid.shape).copy()
    j0, T0 = kg_current(state).components, kg_emtensor(state).components
    s = gauge_transform(state, Lambda)
    j1, T1 = kg_current(s).components, kg_emtensor(s).components
    return GaugeReport(
        float(np.abs(j1 - j0).max()),
        float(np.abs(T1 - T0).max()),
        float(np.abs(j0).max()) or 1.0,
        float(np.abs(T0).max()) or 1.0,
    )


def discrete_frequency(grid: SpacetimeGrid, params: KGParams) -> np.ndarray:
    """Positive leapfrog/finite-difference frequencies on the FFT wavenumber lattice."""
    ks = np.meshgrid(*[grid.wavenumbers(i) for i in range(grid.spatial_dims)], indexing="ij")
    s = sum(4.0 / h**2 * np.sin(k * h / 2.0) ** 2 for k, h in zip(ks, grid.spacing))
    rhs = s + (params.m / params.hbar) ** 2
    dt = grid.time_step
    c = 1.0 - 0.5 * dt**2 * rhs
    return np.arccos(np.clip(c, -1.0, 1.0)) / dt


def gaussian_packet(
    grid: SpacetimeGrid,
    center: Sequence[float],
    width: float,
    momentum: Sequence[float],
    params: KGParams = KGParams(),
    A_ext=None,
    sign: int = 1,
    t: float = 0.0,
) -> KGState:
    """Gaussian packet with ``|phi|^2`` of standard deviation ``width``.

    The previous level is obtained by propagating each Fourier mode back one
    step with the discrete free dispersion, times the local phase of the
    scalar potential, so the packet is of (nearly) pure ``sign`` frequency
    when the potential varies slowly.
    """
    if width < 3.0 * max(grid.spacing):
        raise ConfigurationError("packet width must be at least 3 grid spacings")
    mesh = grid.mesh()
    momentum = np.asarray(momentum, dtype=float)
    if grid.boundary == "periodic":
        # periodic-smooth envelope (chordal distance) and a lattice momentum
        lengths = [n * h for n, h in zip(grid.shape, grid.spacing)]
        d2 = [(L / np.pi * np.sin(np.pi * (x - c) / L)) ** 2 for x, c, L in zip(mesh, center, lengths)]
        dk = [2.0 * np.pi / L for L in lengths]
        momentum = params.hbar * np.round(momentum / params.hbar / dk) * dk
    else:
        d2 = [(x - c) ** 2 for x, c in zip(mesh, center)]
    arg = sum(d2) / (4.0 * width**2)
    phase = sum(p * x for p, x in zip(momentum, mesh)) / params.hbar
    phi = np.exp(-arg + 1j * phase)
    phi /= np.sqrt(np.sum(np.abs(phi) ** 2) * grid.cell_volume)
    w = discrete_frequency(grid, params)
    phi_prev = np.fft.ifftn(np.fft.fftn(phi) * np.exp(1j * sign * w * grid.time_step))
    if A_ext is not None:
        # local frequency shift q A^0 / hbar of a slowly varying scalar potential
        A0 = potential_at(A_ext, grid, t)[0]
        phi_prev = phi_prev * np.exp(1j * params.q * A0 * grid.time_step / params.hbar)
    state = KGState(phi.astype(complex), phi_prev, grid, params, A_ext, t)
    state.meta["momentum"] = momentum.tolist()
    return state


def plane_wave_state(
    grid: SpacetimeGrid, momentum: Sequence[float], params: KGParams = KGParams(), amplitude: float = 1.0,
    sign: int = 1, discrete: bool = True,
) -> KGState:
    """Plane wave ``exp(-i(E t - p.x)/hbar)`` with ``E = sign * sqrt(p^2 + m^2)``."""
    mesh = grid.mesh()
    p = np.asarray(momentum, dtype=float)
    phase = sum(pi * x for pi, x in zip(p, mesh)) / params.hbar
    phi = amplitude * np.exp(1j * phase)
    if discrete:
        kk = p / params.hbar
        s = sum(4.0 / h**2 * np.sin(k * h / 2.0) ** 2 for k, h in zip(kk, grid.spacing))
        w = np.arccos(1.0 - 0.5 * grid.time_step**2 * (s + (params.m / params.hbar) ** 2)) / grid.time_step
    else:
        w = np.sqrt(p @ p + params.m**2) / params.hbar
    phi_prev = phi * np.exp(1j * sign * w * grid.time_step)
    return KGState(phi.astype(complex), phi_prev.astype(complex), grid, params)


def uniform_field_potential(E: Sequence[float], grid: SpacetimeGrid):
    """Uniform electric field as ``A^i(t) = -E^i t`` (compatible with periodic lattices)."""
    E = np.asarray(E, dtype=float)

    def A(t: float) -> np.ndarray:
        out = np.zeros((grid.ndim,) + grid.shape)
        for i in range(grid.spatial_dims):
            out[i + 1] = -E[i] * t
        return out

    return A


def pt_reflect(state: KGState) -> tuple[np.ndarray, np.ndarray]:
    """Spatially reflected levels, ``phi(-x)``, for a lattice centred on 0."""
    idx = (slice(None, None, -1),) * state.grid.spatial_dims
    return state.phi[idx].copy(), state.phi_prev[idx].copy()
