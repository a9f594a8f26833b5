"""Dirac spinor field in an external four-potential.

Conventions: ``D_mu = hbar d_mu + i q A_mu`` (same as :mod:`kg`), so the
Dirac equation ``i gamma^mu D_mu psi = m psi`` reads
``i hbar d_t psi = H psi`` with

    H = alpha . (-i hbar grad - q a) + beta m + q A^0,   alpha^i = gamma^0 gamma^i.

Standard (Dirac) representation with 4 components in 2 and 3 spatial
dimensions; in 1+1 D the two-component pair ``gamma^0 = sigma_z``,
``gamma^1 = i sigma_y`` (so ``alpha = sigma_x``) is used.

Spinor layout: ``(n_components, *shape)``.  Time stepping is Crank-Nicolson
on a sparse central-difference Hamiltonian (exactly unitary up to the
linear-solver tolerance) or, in 1+1 D with no vector potential,
split-operator / exact spectral propagation.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Callable, Literal, Sequence

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .grid import ConfigurationError, SpacetimeGrid, derivative, metric
from .kg import potential_at
from .tensor_core import (
    CurrentDensity,
    EMTensor,
    FaradayTensor,
    FourPotential,
    divergence,
    faraday_from_potential,
    gauss_field_1d,
    interaction_tensor,
    lorentz_force_density,
)

Scheme = Literal["cn", "split", "spectral"]

SIGMA = (
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]], dtype=complex),
    np.array([[1, 0], [0, -1]], dtype=complex),
)


def gamma_matrices(spatial_dims: int) -> list[np.ndarray]:
    """``gamma^0 .. gamma^d`` for ``d = spatial_dims``."""
    if spatial_dims == 1:
        return [SIGMA[2].copy(), 1j * SIGMA[1]]
    z = np.zeros((2, 2), dtype=complex)
    eye = np.eye(2, dtype=complex)
    g0 = np.block([[eye, z], [z, -eye]])
    gs = [np.block([[z, SIGMA[i]], [-SIGMA[i], z]]) for i in range(spatial_dims)]
    return [g0] + gs


def alpha_matrices(spatial_dims: int) -> tuple[list[np.ndarray], np.ndarray]:
    g = gamma_matrices(spatial_dims)
    return [g[0] @ gi for gi in g[1:]], g[0]


def spin_matrix(spatial_dims: int, axis: int = 2) -> np.ndarray:
    """``Sigma_axis`` (spin operator / (hbar/2)) in the 4-component representation."""
    if spatial_dims == 1:
        raise ConfigurationError("no spin operator in the two-component 1+1 D reduction")
    z = np.zeros((2, 2), dtype=complex)
    return np.block([[SIGMA[axis], z], [z, SIGMA[axis]]])


@dataclass(frozen=True)
class DiracParams:
    hbar: float = 1.0
    q: float = 1.0
    m: float = 1.0

    def __post_init__(self) -> None:
        if self.hbar <= 0.0:
            raise ConfigurationError("hbar must be positive")
        if self.m < 0.0:
            raise ConfigurationError("mass must be non-negative")

    @property
    def compton_length(self) -> float:
        return self.hbar / self.m if self.m > 0 else np.inf


@dataclass
class DiracState:
    psi: np.ndarray  # (ncomp, *shape)
    grid: SpacetimeGrid  # spatial lattice; time_step is the step size
    params: DiracParams = field(default_factory=DiracParams)
    A_ext: object = None  # (D, *shape) array, callable t -> array, or None
    t: float = 0.0
    scheme: Scheme = "cn"
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        nc = 2 if self.grid.spatial_dims == 1 else 4
        self.psi = np.asarray(self.psi, dtype=complex)
        if self.psi.shape != (nc,) + self.grid.shape:
            raise ValueError(f"spinor must have shape {(nc,) + self.grid.shape}, got {self.psi.shape}")

    def copy(self) -> "DiracState":
        return copy.deepcopy(self)

    @property
    def ncomp(self) -> int:
        return self.psi.shape[0]

    def potential(self, t: float | None = None) -> np.ndarray:
        return potential_at(self.A_ext, self.grid, self.t if t is None else t)

    def norm(self) -> float:
        return float(np.sum(np.abs(self.psi) ** 2) * self.grid.cell_volume)


# ---------------------------------------------------------------- operators


def _diff_matrix(n: int, h: float, periodic: bool) -> sps.csr_matrix:
    """Central first difference; zero ghost values when not periodic."""
    off = np.full(n - 1, 1.0 / (2.0 * h))
    D = sps.diags([off, -off], [1, -1], shape=(n, n), format="lil")
    if periodic:
        D[0, n - 1] = -1.0 / (2.0 * h)
        D[n - 1, 0] = 1.0 / (2.0 * h)
    return D.tocsr()


def _axis_operator(grid: SpacetimeGrid, i: int) -> sps.csr_matrix:
    mats = [sps.identity(n, format="csr") for n in grid.shape]
    mats[i] = _diff_matrix(grid.shape[i], grid.spacing[i], grid.boundary == "periodic")
    out = mats[0]
    for M in mats[1:]:
        out = sps.kron(out, M, format="csr")
    return out


def hamiltonian_matrix(grid: SpacetimeGrid, params: DiracParams, A: np.ndarray | None) -> sps.csr_matrix:
    """Sparse ``H`` acting on the flattened spinor ``psi.reshape(-1)``."""
    alphas, beta = alpha_matrices(grid.spatial_dims)
    N = int(np.prod(grid.shape))
    nc = beta.shape[0]
    H = sps.kron(sps.csr_matrix(beta * params.m), sps.identity(N), format="csr")
    for i, a in enumerate(alphas):
        H = H + sps.kron(sps.csr_matrix(-1j * params.hbar * a), _axis_operator(grid, i), format="csr")
    if A is not None:
        V = A[0].reshape(-1)
        if np.any(V):
            H = H + sps.kron(sps.identity(nc), sps.diags(params.q * V), format="csr")
        for i, a in enumerate(alphas):
            ai = A[i + 1].reshape(-1)
            if np.any(ai):
                H = H + sps.kron(sps.csr_matrix(-params.q * a), sps.diags(ai), format="csr")
    return H.tocsr()


def apply_hamiltonian(state: DiracState, t: float | None = None) -> np.ndarray:
    """``H psi`` using the same central differences as the stepper."""
    s = state
    A = s.potential(t)
    alphas, beta = alpha_matrices(s.grid.spatial_dims)
    p = s.params
    out = p.m * np.einsum("ab,b...->a...", beta, s.psi) + p.q * A[0] * s.psi
    for i, a in enumerate(alphas):
        Dpsi = -1j * p.hbar * derivative(s.psi, i + 1, s.grid, spatial_only=True) - p.q * A[i + 1] * s.psi
        out = out + np.einsum("ab,b...->a...", a, Dpsi)
    return out


def max_energy(grid: SpacetimeGrid, params: DiracParams, A: np.ndarray | None) -> float:
    kin = params.hbar * np.sqrt(sum(1.0 / h**2 for h in grid.spacing))
    pot = 0.0 if A is None else params.q * float(np.abs(A[0]).max()) + abs(params.q) * float(
        np.sqrt(np.sum(A[1:] ** 2, axis=0)).max(initial=0.0)
    )
    return kin + params.m + abs(pot)


def check_time_step(state: DiracState) -> None:
    """Phase-resolution bound ``dt * E_max / hbar <= pi``.

    Crank-Nicolson is unconditionally stable, but beyond this bound the
    highest lattice modes acquire phases that alias, so the configuration is
    rejected.  For split-operator steps only the potential phase counts (the
    free factor is exact); spectral steps are exact.
    """
    A = state.potential(state.t)
    if state.scheme == "spectral":
        return
    if state.scheme == "split":
        # the free factor is exact; only the potential phase per step is bounded
        emax = abs(state.params.q) * float(np.abs(A[0]).max(initial=0.0))
    else:
        emax = max_energy(state.grid, state.params, A)
    if state.grid.time_step * emax / state.params.hbar > np.pi:
        raise ConfigurationError(
            f"time step {state.grid.time_step:g} exceeds the resolution bound pi*hbar/E_max = "
            f"{np.pi * state.params.hbar / emax:g}"
        )


# ---------------------------------------------------------------- stepping


class _CNSolver:
    def __init__(self, grid: SpacetimeGrid, params: DiracParams, A: np.ndarray | None, dt: float):
        H = hamiltonian_matrix(grid, params, A)
        c = 0.5j * dt / params.hbar
        I = sps.identity(H.shape[0], format="csc", dtype=complex)
        self.plus = (I + c * H).tocsc()
        self.minus = (I - c * H).tocsr()
        self.direct = grid.spatial_dims < 3
        self.lu = spla.splu(self.plus) if self.direct else None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        rhs = self.minus @ x
        if self.direct:
            return self.lu.solve(rhs)
        sol, info = spla.bicgstab(self.plus, rhs, x0=x, rtol=1e-13, atol=0.0, maxiter=2000)
        if info != 0:
            sol, info = spla.gmres(self.plus, rhs, x0=sol, rtol=1e-13, atol=0.0, restart=60, maxiter=200)
            if info != 0:
                raise FloatingPointError("Crank-Nicolson inner solve did not converge")
        return sol


def continuum_symbol(grid: SpacetimeGrid, params: DiracParams, lattice: bool) -> tuple[np.ndarray, np.ndarray]:
    """Free ``H(k)`` on the FFT lattice, shape ``(nc, nc, *shape)``, and ``E(k) >= 0``.

    ``lattice=True`` uses ``sin(k h)/h`` (the central-difference symbol).
    """
    alphas, beta = alpha_matrices(grid.spatial_dims)
    ks = np.meshgrid(*[grid.wavenumbers(i) for i in range(grid.spatial_dims)], indexing="ij")
    if lattice:
        ks = [np.sin(k * h) / h for k, h in zip(ks, grid.spacing)]
    Hk = params.m * beta[(...,) + (None,) * grid.spatial_dims] * np.ones(grid.shape)
    for a, k in zip(alphas, ks):
        Hk = Hk + params.hbar * a[(...,) + (None,) * grid.spatial_dims] * k
    E = np.sqrt(params.m**2 + params.hbar**2 * sum(k**2 for k in ks))
    return Hk, E


def _apply_symbol(M: np.ndarray, psi_hat: np.ndarray) -> np.ndarray:
    return np.einsum("ab...,b...->a...", M, psi_hat)


def _free_propagator(grid: SpacetimeGrid, params: DiracParams, tau: float, lattice: bool = False) -> np.ndarray:
    """``exp(-i H(k) tau / hbar)`` via ``cos(E tau) - i sin(E tau) H/E``."""
    Hk, E = continuum_symbol(grid, params, lattice)
    nc = Hk.shape[0]
    w = E * tau / params.hbar
    with np.errstate(invalid="ignore", divide="ignore"):
        sinc = np.where(E > 0, np.sin(w) / np.where(E > 0, E, 1.0), tau / params.hbar)
    eye = np.eye(nc)[(...,) + (None,) * grid.spatial_dims]
    return np.cos(w) * eye - 1j * sinc * Hk


def energy_projector(grid: SpacetimeGrid, params: DiracParams, sign: int = 1, lattice: bool = True) -> np.ndarray:
    """Projector ``(1 + sign H(k)/E(k)) / 2`` on the FFT lattice."""
    Hk, E = continuum_symbol(grid, params, lattice)
    nc = Hk.shape[0]
    eye = np.eye(nc)[(...,) + (None,) * grid.spatial_dims]
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(E > 0, 1.0 / np.where(E > 0, E, 1.0), 0.0)
    return 0.5 * (eye + sign * Hk * ratio)


def project_energy(psi: np.ndarray, grid: SpacetimeGrid, params: DiracParams, sign: int = 1, lattice: bool = True) -> np.ndarray:
    axes = tuple(range(1, psi.ndim))
    P = energy_projector(grid, params, sign, lattice)
    return np.fft.ifftn(_apply_symbol(P, np.fft.fftn(psi, axes=axes)), axes=axes)


def dirac_step(state: DiracState, n_steps: int = 1) -> DiracState:
    """Advance ``i gamma^mu D_mu psi = m psi`` by ``n_steps`` steps.

    ``meta["norm_drift"]`` holds the largest per-step change of the norm
    relative to the starting norm.
    """
    check_time_step(state)
    s = state.copy()
    dt = s.grid.time_step
    p = s.params
    n0 = s.norm()
    drift = 0.0
    axes = tuple(range(1, s.psi.ndim))
    static = not callable(s.A_ext)

    if s.scheme in ("split", "spectral"):
        if s.grid.spatial_dims != 1 or s.grid.boundary != "periodic":
            raise ConfigurationError("split-operator and spectral schemes are 1+1 D periodic only")
        if s.scheme == "spectral" and s.A_ext is not None:
            raise ConfigurationError("the exact spectral propagator needs A = 0")
        A = s.potential(s.t)
        if np.any(A[1:]) or not static:
            raise ConfigurationError("split-operator stepping supports a static scalar potential only")
        U = _free_propagator(s.grid, p, dt)
        half = np.exp(-0.5j * p.q * A[0] * dt / p.hbar)
        for _ in range(n_steps):
            prev = s.norm()
            psi = s.psi * half
            psi = np.fft.ifftn(_apply_symbol(U, np.fft.fftn(psi, axes=axes)), axes=axes)
            s.psi = psi * half
            s.t += dt
            drift = max(drift, abs(s.norm() - prev) / n0 if n0 else 0.0)
    else:
        shape = s.psi.shape
        solver = _CNSolver(s.grid, p, s.potential(s.t), dt) if static else None
        x = s.psi.reshape(-1)
        for _ in range(n_steps):
            if not static:
                solver = _CNSolver(s.grid, p, s.potential(s.t + 0.5 * dt), dt)
            prev = float(np.vdot(x, x).real)
            x = solver(x)
            s.t += dt
            drift = max(drift, abs(float(np.vdot(x, x).real) - prev) * s.grid.cell_volume / n0 if n0 else 0.0)
        s.psi = x.reshape(shape)
    if not np.all(np.isfinite(s.psi)):
        raise FloatingPointError("Dirac field blew up")
    s.meta["norm_drift"] = drift
    s.meta["steps"] = state.meta.get("steps", 0) + n_steps
    return s


def propagate_exact(state: DiracState, times: Sequence[float]) -> np.ndarray:
    """Free spinors at the given absolute times (1+1 D..3 D periodic, A = 0)."""
    if state.A_ext is not None or state.grid.boundary != "periodic":
        raise ConfigurationError("exact propagation needs a free field on a periodic lattice")
    Hk, E = continuum_symbol(state.grid, state.params, lattice=False)
    axes = tuple(range(1, state.psi.ndim))
    psi_hat = np.fft.fftn(state.psi, axes=axes)
    out = []
    for t in times:
        U = _free_propagator(state.grid, state.params, t - state.t)
        out.append(np.fft.ifftn(_apply_symbol(U, psi_hat), axes=axes))
    return np.stack(out)


# ---------------------------------------------------------------- densities


def _gammas_stacked(spatial_dims: int) -> np.ndarray:
    g = gamma_matrices(spatial_dims)
    return np.stack([g[0] @ gm for gm in g])  # gamma^0 gamma^mu (Hermitian)


def current_from_spinor(psi: np.ndarray, q: float, spatial_dims: int) -> np.ndarray:
    """``j^mu = q psi-bar gamma^mu psi`` for spinors of shape ``(nc, ...)``."""
    G = _gammas_stacked(spatial_dims)
    return q * np.real(np.einsum("a...,mab,b...->m...", np.conj(psi), G, psi))


def covariant_gradient(state: DiracState, dpsi_dt: np.ndarray | None = None, t: float | None = None) -> np.ndarray:
    """``D_mu psi`` (lower index), shape ``(D, nc, *shape)``.

    The time derivative defaults to ``-i H psi / hbar``.
    """
    s = state
    p = s.params
    A = s.potential(t)
    if dpsi_dt is None:
        dpsi_dt = -1j * apply_hamiltonian(s, t) / p.hbar
    out = [p.hbar * dpsi_dt + 1j * p.q * A[0] * s.psi]
    for i in range(s.grid.spatial_dims):
        out.append(p.hbar * derivative(s.psi, i + 1, s.grid, spatial_only=True) - 1j * p.q * A[i + 1] * s.psi)
    return np.stack(out)


def tensor_from_gradient(psi: np.ndarray, Dpsi: np.ndarray, m: float, spatial_dims: int) -> np.ndarray:
    """Symmetrised ``T^{mu nu}`` from ``psi`` and ``D_mu psi``."""
    d = spatial_dims + 1
    g = metric(d)
    G = _gammas_stacked(spatial_dims)
    beta = gamma_matrices(spatial_dims)[0]
    # X^{mu nu} = psi^dag gamma^0 gamma^mu D^nu psi
    Dup = Dpsi * g.reshape((d,) + (1,) * (Dpsi.ndim - 1))
    ImX = np.imag(np.einsum("a...,mab,nb...->mn...", np.conj(psi), G, Dup))
    lag = -2.0 * sum(ImX[l, l] * g[l] for l in range(d))  # i psibar gamma^l D<->_l psi, lowered index
    lag = lag - 2.0 * m * np.real(np.einsum("a...,ab,b...->...", np.conj(psi), beta, psi))
    T = -0.5 * (ImX + np.swapaxes(ImX, 0, 1))
    for mu in range(d):
        T[mu, mu] -= 0.5 * g[mu] * lag
    return T


def dirac_current(state: DiracState) -> CurrentDensity:
    j = current_from_spinor(state.psi, state.params.q, state.grid.spatial_dims)
    return CurrentDensity(j[:, None], state.grid.with_times(1, state.t), conserved=True)


def dirac_emtensor(state: DiracState, dpsi_dt: np.ndarray | None = None) -> EMTensor:
    Dpsi = covariant_gradient(state, dpsi_dt)
    T = tensor_from_gradient(state.psi, Dpsi, state.params.m, state.grid.spatial_dims)
    return EMTensor(T[:, :, None], state.grid.with_times(1, state.t))


def dirac_history(state: DiracState, n_levels: int = 3) -> tuple[SpacetimeGrid, CurrentDensity, EMTensor, FourPotential, list[DiracState]]:
    """Densities on ``n_levels`` consecutive steps starting at ``state``."""
    states = [state]
    for _ in range(n_levels - 1):
        states.append(dirac_step(states[-1], 1))
    js, Ts, As = [], [], []
    for s in states:
        js.append(current_from_spinor(s.psi, s.params.q, s.grid.spatial_dims))
        Ts.append(tensor_from_gradient(s.psi, covariant_gradient(s), s.params.m, s.grid.spatial_dims))
        As.append(s.potential())
    st = state.grid.with_times(n_levels, state.t)
    return (
        st,
        CurrentDensity(np.stack(js, axis=1), st, conserved=True),
        EMTensor(np.stack(Ts, axis=2), st),
        FourPotential(np.stack(As, axis=1), st),
        states,
    )


def dirac_tenet_residual(state: DiracState, order: int = 2) -> tuple[np.ndarray, SpacetimeGrid]:
    """``d_nu T^{nu mu} - F_ext^{mu nu} j_nu`` on three consecutive time levels (middle one valid)."""
    st, j, T, A, _ = dirac_history(state, 3)
    res = divergence(T.components, st, order)
    if state.A_ext is not None:
        res = res - lorentz_force_density(faraday_from_potential(A, st, order), j)
    return res, st


# ---------------------------------------------------------------- energy identity


@dataclass
class EnergyIdentityReport:
    integrated_deviation: float  # |int (T00 + Theta_int00 - Re psi^dag H psi)|
    max_deviation: float  # pointwise max, not expected to vanish
    energy: float  # int Re psi^dag H psi
    interaction_energy: float  # int Theta_int^00
    potential_energy: float  # q int A^0 psi^dag psi

    @property
    def relative(self) -> float:
        return self.integrated_deviation / max(abs(self.energy), 1e-300)


def energy_identity_check(state: DiracState, corrupt_interaction: bool = False) -> EnergyIdentityReport:
    """Compare ``T^00 + Theta_int^00`` with ``Re psi^dag H psi`` (1+1 D, electrostatic).

    ``T`` uses the time derivative of the evolved field (centred difference
    over one step each way), not ``H``.  ``Theta_int^00 = E_ext . E_self``
    where the self field is the Gauss field of ``j^0``.  The identity holds
    after integration; the pointwise difference is reported separately.
    """
    s = state
    if s.grid.spatial_dims != 1:
        raise ConfigurationError("the energy identity check is implemented in 1+1 D")
    A = s.potential()
    if callable(s.A_ext) or np.any(A[1:]):
        raise ConfigurationError("energy identity needs a static, purely electrostatic potential (A^i = 0)")
    nxt = dirac_step(s, 1)
    prv = _step_back(s)
    dpsi = (nxt.psi - prv.psi) / (2.0 * s.grid.time_step)
    T = dirac_emtensor(s, dpsi).components[0, 0, 0]
    H_psi = apply_hamiltonian(s)
    e_density = np.real(np.sum(np.conj(s.psi) * H_psi, axis=0))
    g1 = s.grid.with_times(1, s.t)
    j = dirac_current(s)
    F_self = gauss_field_1d(j)
    F_ext = FaradayTensor(np.zeros((2, 2, 1) + s.grid.shape), g1)
    F_ext.components[0, 1, 0] = -derivative(A[0], 1, s.grid, spatial_only=True)
    F_ext.components[1, 0, 0] = -F_ext.components[0, 1, 0]
    theta_int = interaction_tensor(F_ext, F_self).components[0, 0, 0]
    if corrupt_interaction:
        theta_int = -theta_int
    dx = s.grid.cell_volume
    dev = T + theta_int - e_density
    return EnergyIdentityReport(
        integrated_deviation=float(abs(dev.sum() * dx)),
        max_deviation=float(np.abs(dev).max()),
        energy=float(e_density.sum() * dx),
        interaction_energy=float(theta_int.sum() * dx),
        potential_energy=float((s.params.q * A[0] * np.sum(np.abs(s.psi) ** 2, axis=0)).sum() * dx),
    )


def _step_back(state: DiracState) -> DiracState:
    """One step backwards in time (Crank-Nicolson with ``-dt``)."""
    s = state.copy()
    solver = _CNSolver(s.grid, s.params, s.potential(), -s.grid.time_step)
    s.psi = solver(s.psi.reshape(-1)).reshape(s.psi.shape)
    s.t -= s.grid.time_step
    return s


# ---------------------------------------------------------------- initial data


def spinor_packet(
    grid: SpacetimeGrid,
    center: Sequence[float],
    width: float,
    momentum: Sequence[float],
    params: DiracParams = DiracParams(),
    spinor: Sequence[complex] | None = None,
    A_ext=None,
    energy_sign: int | None = 1,
    lattice: bool = True,
    scheme: Scheme = "cn",
) -> DiracState:
    """Normalized Gaussian packet (``|psi|^2`` standard deviation ``width``).

    ``energy_sign`` = +1 / -1 projects onto positive / negative energy (free
    symbol; ``lattice=True`` uses the central-difference symbol), ``None``
    leaves the packet unprojected (a mixture).
    """
    nc = 2 if grid.spatial_dims == 1 else 4
    if width < 3.0 * max(grid.spacing):
        raise ConfigurationError("packet width must be at least 3 grid spacings")
    chi = np.zeros(nc, dtype=complex)
    if spinor is None:
        chi[0] = 1.0
    else:
        chi[:] = spinor
    mesh = grid.mesh()
    momentum = np.asarray(momentum, dtype=float)
    if grid.boundary == "periodic":
        lengths = [n * h for n, h in zip(grid.shape, grid.spacing)]
        d2 = [(L / np.pi * np.sin(np.pi * (x - c) / L)) ** 2 for x, c, L in zip(mesh, center, lengths)]
        dk = [2.0 * np.pi / L for L in lengths]
        momentum = params.hbar * np.round(momentum / params.hbar / dk) * dk
    else:
        d2 = [(x - c) ** 2 for x, c in zip(mesh, center)]
    env = np.exp(-sum(d2) / (4.0 * width**2) + 1j * sum(p * x for p, x in zip(momentum, mesh)) / params.hbar)
    psi = chi.reshape((nc,) + (1,) * grid.spatial_dims) * env
    if energy_sign is not None:
        psi = project_energy(psi, grid, params, energy_sign, lattice)
    psi /= np.sqrt(np.sum(np.abs(psi) ** 2) * grid.cell_volume)
    st = DiracState(psi, grid, params, A_ext, scheme=scheme)
    st.meta["momentum"] = momentum.tolist()
    return st


def plane_wave_spinor(
    grid: SpacetimeGrid, momentum: Sequence[float], params: DiracParams = DiracParams(), sign: int = 1,
    lattice: bool = True, scheme: Scheme = "cn",
) -> tuple[DiracState, float]:
    """Energy eigen-spinor ``u(p) exp(i p.x / hbar)`` normalized to unit density.

    Returns the state and its energy (lattice or continuum symbol).
    """
    p = np.asarray(momentum, dtype=float)
    alphas, beta = alpha_matrices(grid.spatial_dims)
    k = p / params.hbar
    if lattice:
        k = np.sin(k * np.asarray(grid.spacing)) / np.asarray(grid.spacing)
    H = params.m * beta + sum(params.hbar * ki * a for ki, a in zip(k, alphas))
    w, v = np.linalg.eigh(H)
    idx = int(np.argmax(w)) if sign > 0 else int(np.argmin(w))
    u = v[:, idx] / np.linalg.norm(v[:, idx])
    mesh = grid.mesh()
    phase = np.exp(1j * sum(pi * x for pi, x in zip(p, mesh)) / params.hbar)
    psi = u.reshape((-1,) + (1,) * grid.spatial_dims) * phase
    return DiracState(psi, grid, params, scheme=scheme), float(w[idx])


# ---------------------------------------------------------------- diagnostics


def expectation_position(state: DiracState) -> np.ndarray:
    rho = np.sum(np.abs(state.psi) ** 2, axis=0)
    n = rho.sum()
    return np.array([(x * rho).sum() / n for x in state.grid.mesh()])


def magnetic_moment(state: DiracState) -> np.ndarray:
    """``mu_i = 1/2 int eps_ijk x^j j^k`` (3 spatial dimensions)."""
    if state.grid.spatial_dims != 3:
        raise ConfigurationError("magnetic moment needs 3 spatial dimensions")
    j = current_from_spinor(state.psi, state.params.q, 3)[1:]
    x = state.grid.mesh()
    dv = state.grid.cell_volume
    return 0.5 * dv * np.array([
        np.sum(x[1] * j[2] - x[2] * j[1]),
        np.sum(x[2] * j[0] - x[0] * j[2]),
        np.sum(x[0] * j[1] - x[1] * j[0]),
    ])


def angular_momentum(state: DiracState) -> np.ndarray:
    """``J_i = int eps_ijk x^j T^{0k}`` (3 spatial dimensions)."""
    if state.grid.spatial_dims != 3:
        raise ConfigurationError("angular momentum needs 3 spatial dimensions")
    T0 = dirac_emtensor(state).components[0, 1:, 0]
    x = state.grid.mesh()
    dv = state.grid.cell_volume
    return dv * np.array([
        np.sum(x[1] * T0[2] - x[2] * T0[1]),
        np.sum(x[2] * T0[0] - x[0] * T0[2]),
        np.sum(x[0] * T0[1] - x[1] * T0[0]),
    ])


@dataclass
class ZitterSpectrum:
    frequencies: np.ndarray  # angular frequencies
    amplitude: np.ndarray  # one-sided amplitude of <j^1>(t) - mean
    dominant: float  # frequency of the largest non-DC peak (interpolated)
    zitter_amplitude: float  # largest amplitude within 5% of 2m/hbar
    mean_current: float
    target: float  # 2 m / hbar

    @property
    def relative_zitter(self) -> float:
        """Zitter amplitude relative to the total charge scale (``|q|``)."""
        return self.zitter_amplitude


def zitterbewegung_spectrum(
    state: DiracState, window: float, n_samples: int | None = None, component: int = 0
) -> ZitterSpectrum:
    """Spectrum of the total current ``<j^i>(t)`` over ``[t, t + window]``.

    Free evolution is exact (spectral); ``window`` must cover at least 20
    periods of ``2m/hbar``.
    """
    p = state.params
    target = 2.0 * p.m / p.hbar
    if p.m > 0 and window < 20.0 * 2.0 * np.pi / target:
        raise ConfigurationError(
            f"window {window:g} shorter than 20 Zitterbewegung periods ({20 * 2 * np.pi / target:g})"
        )
    E_max = max_energy(state.grid, p, None)
    dt_nyq = np.pi * p.hbar / (2.0 * E_max)  # resolve 2 E_max
    if n_samples is None:
        n_samples = int(np.ceil(window / dt_nyq)) + 1
        n_samples = max(n_samples, 256)
    times = state.t + np.linspace(0.0, window, n_samples, endpoint=False)
    dv = state.grid.cell_volume
    J = np.empty(n_samples)
    chunk = 64
    for k0 in range(0, n_samples, chunk):
        psis = propagate_exact(state, times[k0 : k0 + chunk])
        for k, ps in enumerate(psis):
            J[k0 + k] = current_from_spinor(ps, p.q, state.grid.spatial_dims)[component + 1].sum() * dv
    mean = float(J.mean())
    sig = (J - mean) * np.hanning(n_samples)
    amp = np.abs(np.fft.rfft(sig)) * 2.0 / np.hanning(n_samples).sum()
    dt = window / n_samples
    freqs = 2.0 * np.pi * np.fft.rfftfreq(n_samples, dt)
    k = int(np.argmax(amp[1:])) + 1
    dominant = freqs[k]
    if 1 <= k < len(amp) - 1:
        a, b, c = np.log(amp[k - 1] + 1e-300), np.log(amp[k] + 1e-300), np.log(amp[k + 1] + 1e-300)
        den = a - 2 * b + c
        if den != 0:
            dominant = freqs[k] + 0.5 * (a - c) / den * (freqs[1] - freqs[0])
    if p.m > 0:
        band = np.abs(freqs - target) <= 0.05 * target
        z = float(amp[band].max(initial=0.0))
    else:
        z = 0.0
    return ZitterSpectrum(freqs, amp, float(dominant), z, mean, target)


@dataclass
class ModulationDiagnostic:
    compton_length: float
    min_feature_scale: float
    flag: Literal["ok", "sub_compton"]
    psi_scale: float = np.inf
    potential_scale: float = np.inf


def feature_scale(f: np.ndarray, grid: SpacetimeGrid, fraction: float = 0.99) -> float:
    """``1/k_c`` where ``|k - k_mean| <= k_c`` holds ``fraction`` of the power.

    ``f`` may carry leading component axes; the power is summed over them.
    """
    nsp = grid.spatial_dims
    axes = tuple(range(f.ndim - nsp, f.ndim))
    P = np.abs(np.fft.fftn(f, axes=axes)) ** 2
    while P.ndim > nsp:
        P = P.sum(axis=0)
    total = P.sum()
    if total <= 0:
        return np.inf
    ks = np.meshgrid(*[grid.wavenumbers(i) for i in range(nsp)], indexing="ij")
    kbar = [float((k * P).sum() / total) for k in ks]
    dist = np.sqrt(sum((k - kb) ** 2 for k, kb in zip(ks, kbar))).reshape(-1)
    order = np.argsort(dist, kind="stable")
    cum = np.cumsum(P.reshape(-1)[order]) / total
    kc = dist[order][min(int(np.searchsorted(cum, fraction)), len(cum) - 1)]
    return np.inf if kc == 0 else 1.0 / kc


def modulation_guard(
    state: DiracState | None = None,
    A_ext: np.ndarray | None = None,
    params: DiracParams | None = None,
    grid: SpacetimeGrid | None = None,
) -> ModulationDiagnostic:
    """Flag spinor or potential structure finer than the Compton length.

    The potential's scale is measured on its gradient, so uniform fields
    (linear potentials) carry no feature.
    """
    if state is not None:
        params = params or state.params
        grid = grid or state.grid
        if A_ext is None and state.A_ext is not None:
            A_ext = state.potential()
    if params is None or grid is None:
        raise ValueError("need a state or explicit params and grid")
    lc = params.compton_length
    s_psi = feature_scale(state.psi, grid) if state is not None else np.inf
    s_pot = np.inf
    if A_ext is not None:
        A_ext = np.asarray(A_ext, dtype=float)
        # one-sided at the edges: a potential is not assumed periodic, so no seam feature
        open_grid = replace(grid, boundary="absorbing")
        grads = [derivative(A_ext, i + 1, open_grid, spatial_only=True) for i in range(grid.spatial_dims)]
        s_pot = feature_scale(np.concatenate(grads), grid)
    s = min(s_psi, s_pot)
    return ModulationDiagnostic(lc, s, "sub_compton" if s < lc else "ok", s_psi, s_pot)


def klein_step(grid: SpacetimeGrid, height: float, rise: float, center: float = 0.0, q: float = 1.0) -> np.ndarray:
    """``A^0`` of a tanh-smoothed step of potential energy ``height`` (axis 0)."""
    x = grid.mesh()[0]
    A = np.zeros((grid.ndim,) + grid.shape)
    A[0] = 0.5 * height / q * (1.0 + np.tanh((x - center) / rise))
    return A


def uniform_field_potential(E: Sequence[float], grid: SpacetimeGrid) -> Callable[[float], np.ndarray]:
    from .kg import uniform_field_potential as _u

    return _u(E, grid)
