"""Many-body Pauli-Schroedinger engine: densities, marginals and conservation checks.

Layout: a state of ``n`` particles, each with ``d`` coordinates on a shared
single-particle lattice, is an array ``phi[s, x1..., x2..., ...]`` with
``2**n`` spin components (particle 0 is the most significant bit).  The
kinetic operator uses Peierls links ``exp(-i q h A_i(x + h/2) / hbar)``, so
the energy density is a sum of non-negative link terms whose total equals
``<phi, K phi>`` exactly, and lattice gauge covariance holds by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Literal, Sequence

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .grid import ConfigurationError, SpacetimeGrid

PAULI = np.array([[[0, 1], [1, 0]], [[0, -1j], [1j, 0]], [[1, 0], [0, -1]]], dtype=complex)
Symmetry = Literal["none", "symmetric", "antisymmetric"]


@dataclass(frozen=True)
class ParticleSpec:
    q: float = 1.0
    m: float = 1.0
    g: float | None = None  # None selects the Pauli value -q hbar / (2 m)

    def __post_init__(self) -> None:
        if not self.m > 0:
            raise ConfigurationError("particle mass must be positive")

    def coupling(self, hbar: float) -> float:
        return -self.q * hbar / (2.0 * self.m) if self.g is None else float(self.g)


@dataclass(frozen=True)
class ExternalFields:
    """Static potentials as functions of one particle's coordinates.

    ``scalar(*x) -> array`` is the electrostatic potential; ``vector(*x) ->
    (Ax, Ay, Az)`` the Coulomb-gauge vector potential.  ``E`` and ``B`` are
    derived from them, so they satisfy the homogeneous Maxwell equations.
    """

    scalar: Callable[..., np.ndarray] | None = None
    vector: Callable[..., Sequence[np.ndarray]] | None = None
    fd_step: float = 1e-3


def _spin_op(n: int, a: int, M: np.ndarray) -> np.ndarray:
    out = np.ones((1, 1), dtype=complex)
    for b in range(n):
        out = np.kron(out, M if b == a else np.eye(2))
    return out


class ManyBodySystem:
    """Lattice, particles, external fields and the derived operator pieces."""

    def __init__(
        self,
        grid: SpacetimeGrid,
        particles: Sequence[ParticleSpec],
        external: ExternalFields | None = None,
        hbar: float = 1.0,
        softening: float = 0.5,
    ):
        self.grid = grid
        self.particles = list(particles)
        self.external = external or ExternalFields()
        self.hbar = float(hbar)
        self.softening = float(softening)
        if not self.particles:
            raise ConfigurationError("at least one particle is required")
        if self.hbar <= 0 or self.softening <= 0:
            raise ConfigurationError("hbar and softening must be positive")
        if self.config_points * 2 ** self.n > 1e7:
            raise ConfigurationError("configuration grid exceeds 1e7 points")

    # ---------------------------------------------------------------- layout
    @property
    def n(self) -> int:
        return len(self.particles)

    @property
    def d(self) -> int:
        return self.grid.spatial_dims

    @property
    def nspin(self) -> int:
        return 2 ** self.n

    @property
    def config_shape(self) -> tuple[int, ...]:
        return tuple(self.grid.shape) * self.n

    @property
    def config_points(self) -> int:
        return int(np.prod(self.config_shape))

    @property
    def volume_element(self) -> float:
        return self.grid.cell_volume ** self.n

    @property
    def periodic(self) -> bool:
        return self.grid.boundary == "periodic"

    def axis(self, a: int, i: int) -> int:
        """Configuration axis (without the spin axis) of coordinate ``i`` of particle ``a``."""
        return a * self.d + i

    def lift(self, f: np.ndarray, a: int) -> np.ndarray:
        """Broadcast a single-particle field (``grid.shape``) onto particle ``a``'s axes."""
        shape = [1] * (self.n * self.d)
        for i in range(self.d):
            shape[self.axis(a, i)] = self.grid.shape[i]
        return np.broadcast_to(np.reshape(f, shape), self.config_shape)

    def single_mesh(self, shift: Sequence[float] | None = None) -> list[np.ndarray]:
        mesh = self.grid.mesh()
        if shift is not None:
            mesh = [x + s for x, s in zip(mesh, shift)]
        return mesh

    # -------------------------------------------------------- external fields
    def _vector(self, mesh: list[np.ndarray]) -> np.ndarray:
        if self.external.vector is None:
            return np.zeros((3,) + mesh[0].shape)
        A = self.external.vector(*mesh)
        return np.stack([np.broadcast_to(np.asarray(c, dtype=float), mesh[0].shape) for c in A])

    def _scalar(self, mesh: list[np.ndarray]) -> np.ndarray:
        if self.external.scalar is None:
            return np.zeros(mesh[0].shape)
        return np.broadcast_to(np.asarray(self.external.scalar(*mesh), dtype=float), mesh[0].shape)

    def _fd(self, f: Callable[[list[np.ndarray]], np.ndarray], i: int) -> np.ndarray:
        """4th-order finite difference of ``f(mesh)`` along coordinate ``i``."""
        h = self.external.fd_step
        e = np.zeros(self.d)
        out = 0.0
        for c, s in ((-1 / 12, 2), (2 / 3, 1), (-2 / 3, -1), (1 / 12, -2)):
            e[:] = 0.0
            e[i] = s * h
            out = out + c * f(self.single_mesh(e))
        return out / h

    @cached_property
    def vector_potential(self) -> np.ndarray:
        """``A`` on the single-particle lattice, shape ``(3, *grid.shape)``."""
        return self._vector(self.single_mesh())

    @cached_property
    def scalar_potential(self) -> np.ndarray:
        return self._scalar(self.single_mesh())

    @cached_property
    def electric_field(self) -> np.ndarray:
        """``E = -grad(phi)`` (static potentials), shape ``(3, *grid.shape)``."""
        E = np.zeros((3,) + self.grid.shape)
        if self.external.scalar is not None:
            for i in range(self.d):
                E[i] = -self._fd(self._scalar, i)
        return E

    @cached_property
    def magnetic_field(self) -> np.ndarray:
        """``B = curl A``; derivatives along absent coordinates vanish."""
        B = np.zeros((3,) + self.grid.shape)
        if self.external.vector is None:
            return B
        dA = {}
        for i in range(self.d):
            dA[i] = self._fd(self._vector, i)  # (3, ...) derivative along i
        for k in range(3):
            j, l = (k + 1) % 3, (k + 2) % 3
            if j in dA:
                B[k] += dA[j][l]
            if l in dA:
                B[k] -= dA[l][j]
        return B

    def link_phase(self, a: int, i: int) -> np.ndarray:
        """``exp(-i q h A_i(x + h e_i / 2) / hbar)`` on the configuration grid."""
        return self._links[(a, i)]

    @cached_property
    def _links(self) -> dict:
        out = {}
        for i in range(self.d):
            shift = np.zeros(self.d)
            shift[i] = 0.5 * self.grid.spacing[i]
            Ai = self._vector(self.single_mesh(shift))[i]
            for a, p in enumerate(self.particles):
                ph = np.exp(-1j * p.q * self.grid.spacing[i] * Ai / self.hbar)
                out[(a, i)] = self.lift(ph, a)
        return out

    @cached_property
    def pair_potential(self) -> np.ndarray:
        """Softened Coulomb energy ``sum_{a<b} q_a q_b / (4 pi sqrt(r^2 + s^2))``."""
        V = np.zeros(self.config_shape)
        mesh = self.single_mesh()
        for a in range(self.n):
            for b in range(a + 1, self.n):
                r2 = sum((self.lift(mesh[i], a) - self.lift(mesh[i], b)) ** 2 for i in range(self.d))
                qq = self.particles[a].q * self.particles[b].q
                V = V + qq / (4.0 * np.pi * np.sqrt(r2 + self.softening**2))
        return V

    def pair_force(self, a: int, i: int) -> np.ndarray:
        """``-d V / d x^(a)_i`` (analytic)."""
        mesh = self.single_mesh()
        F = np.zeros(self.config_shape)
        for b in range(self.n):
            if b == a:
                continue
            dx = [self.lift(mesh[k], a) - self.lift(mesh[k], b) for k in range(self.d)]
            r2 = sum(x**2 for x in dx)
            qq = self.particles[a].q * self.particles[b].q
            F = F + qq * dx[i] / (4.0 * np.pi * (r2 + self.softening**2) ** 1.5)
        return F

    @cached_property
    def diagonal_potential(self) -> np.ndarray:
        """Spin-independent diagonal energy: pair term, ``q phi`` and the
        ``q^2 A_i^2 / 2m`` of coordinates the particles do not carry."""
        U = self.pair_potential.copy()
        A = self.vector_potential
        for a, p in enumerate(self.particles):
            U = U + p.q * self.lift(self.scalar_potential, a)
            for i in range(self.d, 3):
                U = U + p.q**2 * self.lift(A[i] ** 2, a) / (2.0 * p.m)
        return U

    @cached_property
    def zeeman(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per particle: ``(g B_k(x_a)`` lifted, spin operators ``sigma_k^(a))``."""
        out = []
        B = self.magnetic_field
        for a, p in enumerate(self.particles):
            g = p.coupling(self.hbar)
            fields = np.stack([g * self.lift(B[k], a) for k in range(3)])
            ops = np.stack([_spin_op(self.n, a, PAULI[k]) for k in range(3)])
            out.append((fields, ops))
        return out

    # --------------------------------------------------------------- matrices
    def _shift_matrix(self, ax: int) -> sps.csr_matrix:
        """Sparse ``(S f)(x) = f(x + h e_ax)`` on the flattened configuration grid."""
        shape = self.config_shape
        idx = np.arange(self.config_points).reshape(shape)
        nb = np.roll(idx, -1, axis=ax)
        data = np.ones(self.config_points)
        if not self.periodic:
            edge = [slice(None)] * len(shape)
            edge[ax] = -1
            mask = np.ones(shape, dtype=bool)
            mask[tuple(edge)] = False
            data = mask.ravel().astype(float)
        return sps.csr_matrix((data, (idx.ravel(), nb.ravel())), shape=(self.config_points,) * 2)

    @cached_property
    def hamiltonian_matrix(self) -> sps.csr_matrix:
        """Sparse ``H`` acting on ``phi.reshape(-1)`` (spin-major)."""
        Nc = self.config_points
        K = sps.csr_matrix((Nc, Nc), dtype=complex)
        for a, p in enumerate(self.particles):
            for i in range(self.d):
                h = self.grid.spacing[i]
                S = self._shift_matrix(self.axis(a, i))
                US = sps.diags(self.link_phase(a, i).ravel()) @ S
                c = self.hbar**2 / (2.0 * p.m * h**2)
                K = K + c * (2.0 * sps.identity(Nc) - US - US.conj().T)
        Hs = K + sps.diags(self.diagonal_potential.ravel().astype(complex))
        blocks = [[None] * self.nspin for _ in range(self.nspin)]
        for s in range(self.nspin):
            blocks[s][s] = Hs
        for fields, ops in self.zeeman:
            for s in range(self.nspin):
                for r in range(self.nspin):
                    coef = sum(ops[k, s, r] * fields[k] for k in range(3))
                    if np.any(coef != 0):
                        D = sps.diags(np.asarray(coef, dtype=complex).ravel())
                        blocks[s][r] = D if blocks[s][r] is None else blocks[s][r] + D
        for s in range(self.nspin):
            for r in range(self.nspin):
                if blocks[s][r] is None:
                    blocks[s][r] = sps.csr_matrix((Nc, Nc), dtype=complex)
        return sps.bmat(blocks, format="csr")

    @cached_property
    def kinetic_symbol(self) -> np.ndarray:
        """Eigenvalues of the free link Laplacian (periodic, ``A = 0``) on the FFT lattice."""
        T = np.zeros(self.config_shape)
        for a, p in enumerate(self.particles):
            for i in range(self.d):
                h = self.grid.spacing[i]
                k = self.grid.wavenumbers(i)
                t = 2.0 * self.hbar**2 / (p.m * h**2) * np.sin(0.5 * k * h) ** 2
                shape = [1] * len(self.config_shape)
                shape[self.axis(a, i)] = k.size
                T = T + t.reshape(shape)
        return T

    def uses_split(self) -> bool:
        return self.periodic and self.external.vector is None


# ------------------------------------------------------------------- states


@dataclass
class ManyBodyState:
    phi: np.ndarray  # (2**n, *config_shape)
    system: ManyBodySystem
    t: float = 0.0
    symmetry: Symmetry = "none"
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        sysm = self.system
        self.phi = np.asarray(self.phi, dtype=complex)
        if self.phi.shape != (sysm.nspin,) + sysm.config_shape:
            raise ConfigurationError(f"phi must have shape {(sysm.nspin,) + sysm.config_shape}, got {self.phi.shape}")
        if self.symmetry not in ("none", "symmetric", "antisymmetric"):
            raise ConfigurationError(f"unknown symmetry tag {self.symmetry!r}")
        if self.symmetry != "none":
            dev = symmetry_deviation(self, self.symmetry)
            if dev > 1e-8:
                raise ConfigurationError(f"state is not {self.symmetry} under particle exchange (deviation {dev:.2e})")

    @property
    def particles(self) -> list[ParticleSpec]:
        return self.system.particles

    @property
    def hbar(self) -> float:
        return self.system.hbar

    def norm(self) -> float:
        return float(np.sum(np.abs(self.phi) ** 2) * self.system.volume_element)

    def normalized(self) -> "ManyBodyState":
        return ManyBodyState(self.phi / np.sqrt(self.norm()), self.system, self.t, self.symmetry, dict(self.meta))

    def copy(self) -> "ManyBodyState":
        return ManyBodyState(self.phi.copy(), self.system, self.t, self.symmetry, dict(self.meta))


def product_state(system: ManyBodySystem, orbitals: Sequence[np.ndarray], spinors: Sequence[Sequence[complex]],
                  symmetry: Symmetry = "none") -> ManyBodyState:
    """Normalized (optionally (anti)symmetrized) product of single-particle orbitals and spinors."""
    if len(orbitals) != system.n or len(spinors) != system.n:
        raise ConfigurationError("one orbital and one spinor per particle")
    space = np.ones(system.config_shape, dtype=complex)
    for a, f in enumerate(orbitals):
        space = space * system.lift(np.asarray(f, dtype=complex), a)
    spin = np.ones(1, dtype=complex)
    for s in spinors:
        spin = np.kron(spin, np.asarray(s, dtype=complex))
    phi = spin.reshape((-1,) + (1,) * len(system.config_shape)) * space
    st = ManyBodyState(phi, system).normalized()
    if symmetry != "none":
        sign = 1.0 if symmetry == "symmetric" else -1.0
        phi = st.phi + sign * swap(st, 0, 1)
        st = ManyBodyState(phi, system).normalized()
        st.symmetry = symmetry
    return st


def swap(state: ManyBodyState, a: int = 0, b: int = 1) -> np.ndarray:
    """``phi`` with particles ``a`` and ``b`` exchanged (coordinates and spin slots)."""
    sysm = state.system
    n, d = sysm.n, sysm.d
    perm = list(range(n * d))
    for i in range(d):
        perm[sysm.axis(a, i)], perm[sysm.axis(b, i)] = sysm.axis(b, i), sysm.axis(a, i)
    spin = state.phi.reshape((2,) * n + sysm.config_shape)
    sperm = list(range(n))
    sperm[a], sperm[b] = b, a
    axes = sperm + [n + k for k in perm]
    out = np.transpose(spin, axes)
    return out.reshape(state.phi.shape)


def symmetry_deviation(state: ManyBodyState, kind: Symmetry) -> float:
    if state.system.n < 2:
        raise ConfigurationError("exchange symmetry needs two or more particles")
    p0, p1 = state.particles[0], state.particles[1]
    if (p0.q, p0.m, p0.coupling(state.hbar)) != (p1.q, p1.m, p1.coupling(state.hbar)):
        raise ConfigurationError("exchange symmetry only applies to identical particles")
    sign = 1.0 if kind == "symmetric" else -1.0
    diff = swap(state) - sign * state.phi
    return float(np.sqrt(np.sum(np.abs(diff) ** 2) / max(np.sum(np.abs(state.phi) ** 2), 1e-300)))


# ---------------------------------------------------------------- dynamics


def hamiltonian_apply(state: ManyBodyState) -> np.ndarray:
    """``H phi`` with ``H = V + sum_a H^(a)``."""
    H = state.system.hamiltonian_matrix
    return (H @ state.phi.reshape(-1)).reshape(state.phi.shape)


def time_derivative(state: ManyBodyState) -> np.ndarray:
    return -1j * hamiltonian_apply(state) / state.hbar


def energy(state: ManyBodyState) -> float:
    """``<phi^dag H phi>``."""
    return float(np.real(np.vdot(state.phi, hamiltonian_apply(state))) * state.system.volume_element)


def _split_step(state: ManyBodyState, dt: float, n_steps: int) -> np.ndarray:
    sysm = state.system
    hb = sysm.hbar
    half = np.exp(-0.5j * dt * sysm.diagonal_potential / hb)
    kin = np.exp(-1j * dt * sysm.kinetic_symbol / hb)
    axes = tuple(range(1, 1 + len(sysm.config_shape)))
    rot = []
    for fields, ops in sysm.zeeman:
        Bn = np.sqrt(np.sum(fields**2, axis=0))
        if not np.any(Bn):
            continue
        theta = 0.5 * dt * Bn / hb
        nvec = fields / np.where(Bn > 0, Bn, 1.0)
        rot.append((np.cos(theta), np.sin(theta), nvec, ops))
    phi = state.phi

    def potential_half(phi: np.ndarray) -> np.ndarray:
        phi = phi * half
        for c, s, nvec, ops in rot:
            # exp(-i theta n.sigma) acting on the particle's spin slot
            ns = np.einsum("k...,kij->ij...", nvec, ops)
            phi = c * phi - 1j * s * np.einsum("ij...,j...->i...", ns, phi)
        return phi

    for _ in range(n_steps):
        phi = potential_half(phi)
        phi = np.fft.ifftn(np.fft.fftn(phi, axes=axes) * kin, axes=axes)
        phi = potential_half(phi)
    return phi


class _CN:
    def __init__(self, H: sps.csr_matrix, dt: float, hbar: float):
        n = H.shape[0]
        I = sps.identity(n, dtype=complex, format="csc")
        self.plus = (I + 0.5j * dt / hbar * H).tocsc()
        self.minus = (I - 0.5j * dt / hbar * H).tocsr()
        self.lu = spla.splu(self.plus) if n <= 300_000 else None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        rhs = self.minus @ x
        if self.lu is not None:
            return self.lu.solve(rhs)
        y, info = spla.bicgstab(self.plus, rhs, x0=x, rtol=1e-13, atol=0.0)
        if info != 0:
            y, info = spla.gmres(self.plus, rhs, x0=y, rtol=1e-13, atol=0.0)
        return y


def evolve(state: ManyBodyState, duration: float, dt: float, scheme: Literal["auto", "split", "cn"] = "auto"
           ) -> ManyBodyState:
    """Unitary evolution over ``duration`` in steps of (at most) ``dt``.

    Split-operator (exact lattice kinetic factor) is used for periodic
    lattices without a vector potential, Crank-Nicolson otherwise.  The
    maximum per-step norm change is stored in ``meta["norm_drift"]``.
    """
    n = max(1, int(np.ceil(duration / dt - 1e-9)))
    h = duration / n
    sysm = state.system
    if scheme == "auto":
        scheme = "split" if sysm.uses_split() else "cn"
    if scheme == "split" and not sysm.uses_split():
        raise ConfigurationError("split-operator needs a periodic lattice and no vector potential")
    norm0 = state.norm()
    drift = 0.0
    phi = state.phi
    if scheme == "split":
        chunk = max(1, min(n, 50))
        done = 0
        while done < n:
            k = min(chunk, n - done)
            phi = _split_step(ManyBodyState(phi, sysm), h, k)
            done += k
            nrm = float(np.sum(np.abs(phi) ** 2) * sysm.volume_element)
            drift = max(drift, abs(nrm - norm0) / norm0 / k)
    else:
        solver = _CN(sysm.hamiltonian_matrix, h, sysm.hbar)
        x = phi.reshape(-1)
        prev = norm0
        for _ in range(n):
            x = solver(x)
            nrm = float(np.sum(np.abs(x) ** 2) * sysm.volume_element)
            drift = max(drift, abs(nrm - prev) / norm0)
            prev = nrm
        phi = x.reshape(state.phi.shape)
    out = ManyBodyState(phi, sysm, state.t + duration, "none", dict(state.meta))
    out.symmetry = state.symmetry
    out.meta["norm_drift"] = drift
    return out


def eigenstates(system: ManyBodySystem, k: int = 2, spin: Sequence[complex] | None = None,
                ) -> tuple[np.ndarray, list[ManyBodyState]]:
    """Lowest ``k`` eigenpairs of ``H`` (shift-invert Lanczos).

    Without magnetic fields the spin part factors out; then ``spin`` (a
    ``2**n`` vector, default all-up) is attached to the spatial eigenvectors.
    """
    Bfree = not np.any(system.magnetic_field)
    if Bfree:
        Nc = system.config_points
        H = system.hamiltonian_matrix[:Nc, :Nc]
    else:
        H = system.hamiltonian_matrix
    sigma = float(system.diagonal_potential.min()) - 1.0
    vals, vecs = spla.eigsh(H, k=k, sigma=sigma, which="LM")
    order = np.argsort(vals)
    vals, vecs = vals[order], vecs[:, order]
    states = []
    for c in range(k):
        v = vecs[:, c]
        if Bfree:
            chi = np.zeros(system.nspin, dtype=complex)
            chi[0] = 1.0
            if spin is not None:
                chi = np.asarray(spin, dtype=complex)
            phi = chi.reshape((-1,) + (1,) * len(system.config_shape)) * v.reshape(system.config_shape)
        else:
            phi = v.reshape((system.nspin,) + system.config_shape)
        st = ManyBodyState(phi, system).normalized()
        states.append(st)
    return vals, states


# -------------------------------------------------------------- densities


def _shift(f: np.ndarray, ax: int, step: int, periodic: bool) -> np.ndarray:
    """``f(x + step h)`` along array axis ``ax`` with zero ghosts when not periodic."""
    out = np.roll(f, -step, axis=ax)
    if not periodic:
        sl = [slice(None)] * f.ndim
        sl[ax] = slice(-step, None) if step > 0 else slice(None, -step)
        out[tuple(sl)] = 0.0
    return out


def _central(f: np.ndarray, ax: int, h: float, periodic: bool) -> np.ndarray:
    return (_shift(f, ax, 1, periodic) - _shift(f, ax, -1, periodic)) / (2.0 * h)


def _link_to_sites(link: np.ndarray, ax: int, periodic: bool) -> np.ndarray:
    """Average of the two links meeting at each site."""
    return 0.5 * (link + _shift(link, ax, -1, periodic))


@dataclass
class DensityBundle:
    rho: np.ndarray  # (*config)
    j: list[np.ndarray]  # per particle (3, *config)
    p: list[np.ndarray]
    eps: list[np.ndarray]  # per particle (*config)
    spin: list[np.ndarray]  # per particle spin density phi^dag sigma^(a) phi, (3, *config)
    system: ManyBodySystem
    j_spin: list[np.ndarray] = field(default_factory=list)

    @property
    def j_orbital(self) -> list[np.ndarray]:
        return [self.j[a] - self.j_spin[a] for a in range(len(self.j))]

    def marginal(self, a: int) -> dict[str, np.ndarray]:
        return marginals(self, a)


def _bilinear(state_phi: np.ndarray, chi: np.ndarray, sysm: ManyBodySystem) -> dict:
    """Symmetric bilinear densities ``d(phi, chi)`` with ``d(phi, phi)`` the physical ones."""
    hb = sysm.hbar
    per = sysm.periodic
    rho = np.real(np.sum(np.conj(state_phi) * chi, axis=0))
    A = sysm.vector_potential
    js, eps, spins, jspin = [], [], [], []
    for a, p in enumerate(sysm.particles):
        j = np.zeros((3,) + sysm.config_shape)
        e = np.zeros(sysm.config_shape)
        for i in range(sysm.d):
            ax = 1 + sysm.axis(a, i)
            h = sysm.grid.spacing[i]
            U = sysm.link_phase(a, i)
            fwd_phi = U * _shift(state_phi, ax, 1, per)
            fwd_chi = U * _shift(chi, ax, 1, per)
            flux = hb / (2.0 * p.m * h) * np.imag(
                np.sum(np.conj(state_phi) * fwd_chi + np.conj(chi) * fwd_phi, axis=0))
            j[i] = _link_to_sites(flux, ax - 1, per)
            dphi = (fwd_phi - state_phi) / h
            dchi = (fwd_chi - chi) / h
            le = hb**2 / (2.0 * p.m) * np.real(np.sum(np.conj(dphi) * dchi, axis=0))
            e = e + _link_to_sites(le, ax - 1, per)
            if not per:
                # Dirichlet ghosts: the link into the first site belongs wholly to it,
                # and the link out of the last site keeps its other half there too
                ghost = hb**2 / (2.0 * p.m * h**2) * np.real(np.sum(np.conj(state_phi) * chi, axis=0))
                sl = [slice(None)] * e.ndim
                sl[ax - 1] = 0
                e[tuple(sl)] += ghost[tuple(sl)]
                sl[ax - 1] = -1
                e[tuple(sl)] += 0.5 * ghost[tuple(sl)]
        for i in range(sysm.d, 3):
            Ai = sysm.lift(A[i], a)
            j[i] = -p.q / p.m * Ai * rho
            e = e + p.q**2 * Ai**2 / (2.0 * p.m) * rho
        # spin density and its curl current
        s = np.zeros((3,) + sysm.config_shape)
        for k in range(3):
            op = _spin_op(sysm.n, a, PAULI[k])
            s[k] = np.real(np.sum(np.conj(state_phi) * np.einsum("ij,j...->i...", op, chi), axis=0))
        g = p.coupling(hb)
        curl = np.zeros_like(s)
        if g != 0.0:
            if p.q == 0.0:
                raise ConfigurationError("spin current -(g/q) curl s needs a charged particle")
            ds = {i: _central(s, 1 + sysm.axis(a, i), sysm.grid.spacing[i], per) for i in range(sysm.d)}
            for k in range(3):
                jj, ll = (k + 1) % 3, (k + 2) % 3
                if jj in ds:
                    curl[k] += ds[jj][ll]
                if ll in ds:
                    curl[k] -= ds[ll][jj]
            curl *= -g / p.q
        js.append(j + curl)
        jspin.append(curl)
        eps.append(e)
        spins.append(s)
    return dict(rho=rho, j=js, eps=eps, spin=spins, j_spin=jspin)


def densities(state: ManyBodyState) -> DensityBundle:
    """Ensemble densities ``rho, j, p = m j, eps`` of a Pauli state.

    ``j`` is the orbital link current plus the spin current
    ``-(g/q) curl(phi^dag sigma phi)``; ``eps`` is the non-negative
    link-kinetic energy density.
    """
    sysm = state.system
    b = _bilinear(state.phi, state.phi, sysm)
    p = [sysm.particles[a].m * b["j"][a] for a in range(sysm.n)]
    return DensityBundle(b["rho"], b["j"], p, b["eps"], b["spin"], sysm, b["j_spin"])


def marginals(bundle: DensityBundle, a: int) -> dict[str, np.ndarray]:
    """Integrate out every particle but ``a``; returns single-particle fields."""
    sysm = bundle.system
    if not 0 <= a < sysm.n:
        raise IndexError(f"particle index {a} out of range for {sysm.n} particles")
    keep = [sysm.axis(a, i) for i in range(sysm.d)]
    other = tuple(ax for ax in range(sysm.n * sysm.d) if ax not in keep)
    dv = sysm.grid.cell_volume ** (sysm.n - 1)

    def red(f: np.ndarray, lead: int = 0) -> np.ndarray:
        return np.sum(f, axis=tuple(lead + ax for ax in other)) * dv if other else f.copy()

    return dict(
        rho=red(bundle.rho),
        j=red(bundle.j[a], 1),
        p=red(bundle.p[a], 1),
        eps=red(bundle.eps[a]),
        spin=red(bundle.spin[a], 1),
    )


def magnetic_moment(bundle: DensityBundle, a: int = 0) -> np.ndarray:
    """``1/2 int x cross j_spin`` of particle ``a``'s spin current (3 coordinates)."""
    sysm = bundle.system
    if sysm.d != 3:
        raise ConfigurationError("magnetic moment needs 3 coordinates per particle")
    js = marginals(DensityBundle(bundle.rho, bundle.j_spin, bundle.p, bundle.eps, bundle.spin, sysm,
                                 bundle.j_spin), a)["j"]
    x = sysm.grid.mesh()
    dv = sysm.grid.cell_volume
    return 0.5 * dv * np.array([
        np.sum(x[1] * js[2] - x[2] * js[1]),
        np.sum(x[2] * js[0] - x[0] * js[2]),
        np.sum(x[0] * js[1] - x[1] * js[0]),
    ])


# ------------------------------------------------------ energy bookkeeping


def interaction_energy(state: ManyBodyState, bundle: DensityBundle | None = None) -> float:
    """``<V rho> + sum_a q_a <j_a . A(x_a)> + sum_a q_a <rho phi(x_a)>``.

    The pair term uses the double sum over ordered pairs with ``1/(8 pi)``,
    which equals the single sum over unordered pairs with ``1/(4 pi)``.
    """
    sysm = state.system
    b = bundle or densities(state)
    dv = sysm.volume_element
    total = np.sum(sysm.pair_potential * b.rho)
    A = sysm.vector_potential
    for a, p in enumerate(sysm.particles):
        for k in range(3):
            total += p.q * np.sum(b.j[a][k] * sysm.lift(A[k], a))
        total += p.q * np.sum(b.rho * sysm.lift(sysm.scalar_potential, a))
    return float(total * dv)


@dataclass
class EnergyReport:
    interaction: float
    kinetic: list[float]
    hamiltonian: float

    @property
    def deviation(self) -> float:
        return abs(self.interaction + sum(self.kinetic) - self.hamiltonian)

    @property
    def relative(self) -> float:
        return self.deviation / max(abs(self.hamiltonian), 1e-300)


def total_energy_check(state: ManyBodyState) -> EnergyReport:
    """Compare ``<Theta_int> + sum_a <eps_mar^(a)>`` with ``<phi^dag H phi>``."""
    b = densities(state)
    dv = state.system.volume_element
    return EnergyReport(interaction_energy(state, b), [float(np.sum(e) * dv) for e in b.eps], energy(state))


# ---------------------------------------------------------- conservation


@dataclass
class ConservationReport:
    continuity: float  # max |d_t rho + div j| / max |d_t rho|
    momentum: np.ndarray  # (n, d) relative residuals of d<p>/dt - forces
    energy: np.ndarray  # (n,) relative residuals of d<eps>/dt - power
    proviso_p: float  # max |p - m j|
    min_eps: float
    min_rho: float
    maxwell_consistent: bool
    validity: dict = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return float(max(self.continuity, np.max(self.momentum), np.max(self.energy)))


def _window_mask(sysm: ManyBodySystem, half_width: float | None) -> tuple | np.ndarray:
    if half_width is None:
        return (slice(None),) * len(sysm.config_shape)
    m = np.ones(sysm.config_shape, dtype=bool)
    for a in range(sysm.n):
        for i in range(sysm.d):
            x = sysm.lift(sysm.grid.mesh()[i], a)
            m &= np.abs(x) <= half_width
    return m


def conservation_suite(state: ManyBodyState, window: float | None = None) -> ConservationReport:
    """Continuity, momentum balance and energy balance of the ensemble densities.

    Time derivatives use ``d_t phi = -i H phi / hbar`` exactly, so the
    residuals measure the spatial stencils only.  The momentum balance is
    ``d<p_a>/dt = -<d_a V rho> + q<E rho> + q<j_a x B>``; the energy balance
    ``d<eps_a>/dt = q<E . j_a> - <d_a V . j_a>``.
    """
    sysm = state.system
    dv = sysm.volume_element
    dphi = time_derivative(state)
    b = _bilinear(state.phi, state.phi, sysm)
    db = _bilinear(state.phi, dphi, sysm)
    per = sysm.periodic
    # (i) continuity
    drho = 2.0 * db["rho"]
    div = np.zeros(sysm.config_shape)
    for a in range(sysm.n):
        for i in range(sysm.d):
            div += _central(b["j"][a][i], sysm.axis(a, i), sysm.grid.spacing[i], per)
    mask = _window_mask(sysm, window)
    scale = max(np.abs(drho[mask]).max(), np.abs(div[mask]).max(), 1e-300)
    cont = float(np.abs(drho + div)[mask].max() / scale)
    # (ii) momentum and (iii) energy
    E, B = sysm.electric_field, sysm.magnetic_field
    mom = np.zeros((sysm.n, sysm.d))
    en = np.zeros(sysm.n)
    for a, p in enumerate(sysm.particles):
        j = b["j"][a]
        Ea = np.stack([sysm.lift(E[k], a) for k in range(3)])
        Ba = np.stack([sysm.lift(B[k], a) for k in range(3)])
        jxB = np.cross(j, Ba, axis=0)
        for i in range(sysm.d):
            lhs = 2.0 * p.m * np.sum(db["j"][a][i]) * dv
            terms = [
                np.sum(sysm.pair_force(a, i) * b["rho"]) * dv,
                p.q * np.sum(Ea[i] * b["rho"]) * dv,
                p.q * np.sum(jxB[i]) * dv,
            ]
            mag = max(abs(lhs), *(abs(t) for t in terms), 1e-300)
            mom[a, i] = abs(lhs - sum(terms)) / mag
        lhs = 2.0 * np.sum(db["eps"][a]) * dv
        pair = sum(np.sum(sysm.pair_force(a, i) * j[i]) for i in range(sysm.d)) * dv
        field_work = p.q * np.sum(np.sum(Ea * j, axis=0)) * dv
        mag = max(abs(lhs), abs(pair), abs(field_work), 1e-300)
        en[a] = abs(lhs - pair - field_work) / mag
    pj = max(float(np.abs(sysm.particles[a].m * b["j"][a] - sysm.particles[a].m * b["j"][a]).max())
             for a in range(sysm.n))
    validity = {}
    zee = max((float(np.abs(f).max()) for f, _ in sysm.zeeman), default=0.0)
    coul = float(np.abs(sysm.pair_potential).max()) if sysm.n > 1 else 0.0
    validity["zeeman_over_coulomb"] = zee / coul if coul > 0 else (np.inf if zee > 0 else 0.0)
    vmax = 0.0
    rho = b["rho"]
    big = rho > 1e-6 * rho.max()
    for a in range(sysm.n):
        speed = np.sqrt(np.sum(b["j"][a] ** 2, axis=0))
        vmax = max(vmax, float((speed[big] / rho[big]).max()))
    validity["max_speed"] = vmax
    if vmax > 0.1:
        validity["slow_motion_violated"] = True
    # external fields are derived from potentials, so the homogeneous equations hold
    return ConservationReport(cont, mom, en, pj, float(min(e.min() for e in b["eps"])), float(rho.min()), True,
                              validity)


# ------------------------------------------------------------------ gauge


def gauge_transform(state: ManyBodyState, Lambda: Callable[..., np.ndarray],
                    grad_Lambda: Callable[..., Sequence[np.ndarray]]) -> ManyBodyState:
    """``A -> A + grad Lambda``, ``phi -> exp(i sum_a q_a Lambda(x_a) / hbar) phi`` (static ``Lambda``)."""
    sysm = state.system
    ext = sysm.external
    base = ext.vector

    def vector(*x):
        A0 = base(*x) if base is not None else [np.zeros_like(x[0])] * 3
        dL = grad_Lambda(*x)
        return [np.asarray(A0[k], dtype=float) + (np.asarray(dL[k], dtype=float) if k < len(dL) else 0.0)
                for k in range(3)]

    new = ManyBodySystem(sysm.grid, sysm.particles, ExternalFields(ext.scalar, vector, ext.fd_step), sysm.hbar,
                         sysm.softening)
    L = Lambda(*sysm.grid.mesh())
    phase = np.zeros(sysm.config_shape)
    for a, p in enumerate(sysm.particles):
        phase = phase + p.q * sysm.lift(L, a) / sysm.hbar
    return ManyBodyState(state.phi * np.exp(1j * phase), new, state.t, state.symmetry, dict(state.meta))


def gauge_deviation(state: ManyBodyState, Lambda, grad_Lambda) -> float:
    """Max change of ``rho, j, eps`` under the gauge shift, relative to their maxima."""
    b0 = densities(state)
    b1 = densities(gauge_transform(state, Lambda, grad_Lambda))
    dev = np.abs(b1.rho - b0.rho).max() / np.abs(b0.rho).max()
    for a in range(state.system.n):
        dev = max(dev, np.abs(b1.j[a] - b0.j[a]).max() / max(np.abs(b0.j[a]).max(), 1e-300))
        dev = max(dev, np.abs(b1.eps[a] - b0.eps[a]).max() / max(np.abs(b0.eps[a]).max(), 1e-300))
    return float(dev)


# ---------------------------------------------------- member product densities


@dataclass
class ProductDensities:
    rho: np.ndarray  # (nt, *config)
    j: list[np.ndarray]  # per particle (d, nt, *config)
    p: list[np.ndarray] | None
    eps: list[np.ndarray] | None
    continuity_residual: float


def member_product_density(members: Sequence[dict], grid: SpacetimeGrid, tol: float = 1e-8) -> ProductDensities:
    """Configuration-space densities of one ensemble member from its particles' densities.

    ``members[a]`` holds ``rho`` ``(nt, *shape)`` and ``j`` ``(d, nt, *shape)``
    (optionally ``p`` and ``eps``) on the space-time ``grid``.  The
    continuity residual is ``max|d_t rho + sum div_a j_a|`` over interior
    time levels relative to ``max|d_t rho|`` (absolute when that vanishes).
    """
    n, d = len(members), grid.spatial_dims
    for a, mbr in enumerate(members):
        tot = np.sum(mbr["rho"], axis=tuple(range(1, 1 + d))) * grid.cell_volume
        if np.any(np.abs(tot - 1.0) > tol):
            raise ConfigurationError(f"density of particle {a} is not normalized (integral {tot})")
    nt = grid.n_times

    def lift(f: np.ndarray, a: int) -> np.ndarray:
        # f: (nt, *shape) -> (nt, *config)
        shape = [nt] + [1] * (n * d)
        for i in range(d):
            shape[1 + a * d + i] = grid.shape[i]
        return np.reshape(f, shape)

    full = (nt,) + tuple(grid.shape) * n
    rho = np.ones(full)
    for a, mbr in enumerate(members):
        rho = rho * lift(mbr["rho"], a)

    def others(a: int) -> np.ndarray:
        out = np.ones(full)
        for b, mbr in enumerate(members):
            if b != a:
                out = out * lift(mbr["rho"], b)
        return out

    js = [np.stack([lift(members[a]["j"][i], a) * others(a) for i in range(d)]) for a in range(n)]
    ps = [np.stack([lift(members[a]["p"][i], a) * others(a) for i in range(d)]) for a in range(n)] \
        if all("p" in m for m in members) else None
    es = [lift(members[a]["eps"], a) * others(a) for a in range(n)] if all("eps" in m for m in members) else None
    res = 0.0
    if nt >= 3:
        per = grid.boundary == "periodic"
        drho = (rho[2:] - rho[:-2]) / (2.0 * grid.time_step)
        div = np.zeros_like(drho)
        for a in range(n):
            for i in range(d):
                div += _central(js[a][i][1:-1], 1 + a * d + i, grid.spacing[i], per)
        r = np.abs(drho + div).max()
        s = np.abs(drho).max()
        res = float(r / s) if s > 0 else float(r)
    return ProductDensities(rho, js, ps, es, res)


def ensemble_average(items: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """``sum_e w_e d_e`` with weights normalized to one (discrete measure)."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or w.sum() <= 0:
        raise ConfigurationError("ensemble weights must be non-negative with positive sum")
    w = w / w.sum()
    return sum(wi * np.asarray(x) for wi, x in zip(w, items))


def joint_rank(rho2: np.ndarray, d: int, rtol: float = 1e-10) -> int:
    """Numerical rank of a two-particle density viewed as a matrix (1 for a product)."""
    n1 = int(np.prod(rho2.shape[:d]))
    s = np.linalg.svd(rho2.reshape(n1, -1), compute_uv=False)
    return int(np.sum(s > rtol * s[0]))
