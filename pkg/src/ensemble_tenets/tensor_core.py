"""Tensor algebra on sampled space-time fields and the classical-electrodynamics tenets.

All tensors carry their component axes first, followed by the grid axes
``(n_times, *shape)``.  The Faraday tensor is stored with lower indices,
``F_{mu nu} = d_mu A_nu - d_nu A_mu``; potentials, currents and
energy-momentum tensors with upper indices.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import fft as sfft
from scipy.integrate import cumulative_trapezoid

from .grid import (
    ConfigurationError,
    ResidualNorms,
    SpacetimeGrid,
    StencilError,
    derivative,
    interior_mask,
    levi_civita,
    metric,
    residual_norms,
)

log = logging.getLogger(__name__)

# integral of 1/r over the unit cube centred on the origin
UNIT_CUBE_INVERSE_R = 3.0 * np.log(2.0 + np.sqrt(3.0)) - np.pi / 2.0  # int of 1/r over the unit cube


def _check_field(arr: np.ndarray, grid: SpacetimeGrid, ncomp: int, name: str) -> None:
    want = (grid.ndim,) * ncomp + grid.full_shape
    if arr.shape != want:
        raise ValueError(f"{name} has shape {arr.shape}, expected {want}")


@dataclass
class FourPotential:
    components: np.ndarray  # A^mu, shape (D, n_times, *shape)
    grid: SpacetimeGrid
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.components = np.asarray(self.components, dtype=float)
        _check_field(self.components, self.grid, 1, "A")
        if not np.all(np.isfinite(self.components)):
            raise ValueError("four-potential contains non-finite values")

    def lower(self) -> np.ndarray:
        g = metric(self.grid.ndim)
        return self.components * g.reshape((-1,) + (1,) * (self.components.ndim - 1))


@dataclass
class FaradayTensor:
    """Antisymmetric ``F_{mu nu}``; only the upper triangle is computed."""

    components: np.ndarray  # lower indices, shape (D, D, n_times, *shape)
    grid: SpacetimeGrid

    def __post_init__(self) -> None:
        c = np.asarray(self.components, dtype=float)
        _check_field(c, self.grid, 2, "F")
        d = self.grid.ndim
        out = np.zeros_like(c)
        for mu in range(d):
            for nu in range(mu + 1, d):
                out[mu, nu] = c[mu, nu]
                out[nu, mu] = -c[mu, nu]
        self.components = out

    def upper(self) -> np.ndarray:
        g = metric(self.grid.ndim)
        return self.components * np.multiply.outer(g, g).reshape(
            (self.grid.ndim, self.grid.ndim) + (1,) * (self.components.ndim - 2)
        )

    def mixed(self) -> np.ndarray:
        """``F^mu_nu`` (first index raised)."""
        g = metric(self.grid.ndim)
        return self.components * g.reshape((-1, 1) + (1,) * (self.components.ndim - 2))

    @classmethod
    def from_fields(cls, E: np.ndarray, B: np.ndarray | None, grid: SpacetimeGrid) -> "FaradayTensor":
        """Build from electric/magnetic field components (``F^{i0} = E^i``)."""
        d = grid.ndim
        F = np.zeros((d, d) + grid.full_shape)
        for i in range(1, d):
            F[0, i] = E[i - 1]  # F_{0i} = E^i
        if B is not None and d == 4:
            # F_{ij} = -eps_{ijk} B^k with lower spatial indices
            F[1, 2] = -B[2]
            F[1, 3] = B[1]
            F[2, 3] = -B[0]
        elif B is not None and d == 3:
            F[1, 2] = -B[0]  # the single out-of-plane component
        return cls(F, grid)

    def electric(self) -> np.ndarray:
        return np.stack([-self.components[i, 0] for i in range(1, self.grid.ndim)])


@dataclass
class CurrentDensity:
    components: np.ndarray  # j^mu, shape (D, n_times, *shape)
    grid: SpacetimeGrid
    conserved: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.components = np.asarray(self.components, dtype=float)
        _check_field(self.components, self.grid, 1, "j")

    @property
    def total_charge(self) -> float:
        """Integral of ``j^0`` over space at the first time sample."""
        return float(self.components[0, 0].sum() * self.grid.cell_volume)

    def lower(self) -> np.ndarray:
        g = metric(self.grid.ndim)
        return self.components * g.reshape((-1,) + (1,) * (self.components.ndim - 1))


@dataclass
class EMTensor:
    """Energy-momentum tensor ``X^{mu nu}``; symmetric by storage unless asked otherwise."""

    components: np.ndarray
    grid: SpacetimeGrid
    symmetrize: bool = True

    def __post_init__(self) -> None:
        c = np.asarray(self.components, dtype=float)
        _check_field(c, self.grid, 2, "T")
        if self.symmetrize:
            c = 0.5 * (c + np.swapaxes(c, 0, 1))
        self.components = c

    def __add__(self, other: "EMTensor") -> "EMTensor":
        return EMTensor(self.components + other.components, self.grid, self.symmetrize and other.symmetrize)

    def trace(self) -> np.ndarray:
        g = metric(self.grid.ndim)
        return np.einsum("m,mm...->...", g, self.components)


@dataclass(frozen=True)
class GreenKernelConfig:
    alpha_ret: float = 1.0
    alpha_adv: float = 0.0

    def __post_init__(self) -> None:
        for a in (self.alpha_ret, self.alpha_adv):
            if not 0.0 <= a <= 1.0:
                raise ConfigurationError("kernel weights must lie in [0, 1]")
        if abs(self.alpha_ret + self.alpha_adv - 1.0) > 1e-12:
            raise ConfigurationError("alpha_ret + alpha_adv must equal 1")


@dataclass
class FieldBundle:
    grid: SpacetimeGrid
    A: FourPotential | None = None
    j: CurrentDensity | None = None
    tensors: dict[str, EMTensor] = field(default_factory=dict)
    F: FaradayTensor | None = None  # optional exact field strength


# --------------------------------------------------------------------------
# derivatives of tensors


def _d(f: np.ndarray, mu: int, grid: SpacetimeGrid, order: int) -> np.ndarray:
    if mu == 0 and grid.n_times == 1:
        return np.zeros_like(f)  # a single time sample is read as a static field
    return derivative(f, mu, grid, order=order)


def divergence(X: np.ndarray, grid: SpacetimeGrid, order: int = 2) -> np.ndarray:
    """``d_nu X^{nu ...}`` contracting the first component index."""
    out = np.zeros(X.shape[1:])
    for nu in range(grid.ndim):
        out += _d(X[nu], nu, grid, order)
    return out


def faraday_from_potential(A: FourPotential, grid: SpacetimeGrid | None = None, order: int = 2) -> FaradayTensor:
    """``F_{mu nu} = d_mu A_nu - d_nu A_mu`` with central differences.

    A single time sample is treated as a static configuration.
    """
    grid = grid or A.grid
    for n in grid.shape:
        if n < 3:
            raise StencilError("faraday_from_potential needs at least 3 points per axis")
    if grid.n_times == 2:
        raise StencilError("time derivatives need 1 (static) or at least 3 time samples")
    d = grid.ndim
    Al = A.lower()
    F = np.zeros((d, d) + grid.full_shape)
    for mu in range(d):
        for nu in range(mu + 1, d):
            F[mu, nu] = _d(Al[nu], mu, grid, order) - _d(Al[mu], nu, grid, order)
    return FaradayTensor(F, grid)


def canonical_tensor(F: FaradayTensor) -> EMTensor:
    """``Theta^{nu mu} = 1/4 g^{nu mu} F^{rho lam} F_{rho lam} + F^{nu rho} F_rho^mu``."""
    d = F.grid.ndim
    g = metric(d)
    Fl = F.components
    Fu = F.upper()
    invariant = np.einsum("ab...,ab...->...", Fu, Fl)
    theta = np.empty_like(Fl)
    for nu in range(d):
        for mu in range(nu, d):
            val = np.einsum("r...,r...->...", Fu[nu], Fl[:, mu]) * g[mu]
            if nu == mu:
                val = val + 0.25 * g[mu] * invariant
            theta[nu, mu] = val
            theta[mu, nu] = val
    return EMTensor(theta, F.grid)


def interaction_tensor(F_a: FaradayTensor, F_b: FaradayTensor) -> EMTensor:
    """Cross term ``Theta(F_a + F_b) - Theta(F_a) - Theta(F_b)``."""
    both = FaradayTensor(F_a.components + F_b.components, F_a.grid)
    out = canonical_tensor(both).components
    out = out - canonical_tensor(F_a).components - canonical_tensor(F_b).components
    return EMTensor(out, F_a.grid)


def gauss_field_1d(j: CurrentDensity) -> FaradayTensor:
    """Field of a localized 1+1-D source: ``E(x) = int_{-inf}^x j^0 dx'``.

    With ``j`` conserved this also satisfies ``d_t E = -j^1``; the source
    must vanish at the left edge of the lattice.
    """
    grid = j.grid
    if grid.spatial_dims != 1:
        raise ConfigurationError("gauss_field_1d needs one spatial dimension")
    E = cumulative_trapezoid(j.components[0], dx=grid.spacing[0], axis=-1, initial=0.0)
    F = np.zeros((2, 2) + grid.full_shape)
    F[0, 1] = E
    return FaradayTensor(F, grid)


def maxwell_residual(F: FaradayTensor, j: CurrentDensity | None, order: int = 2) -> np.ndarray:
    """``d_nu F^{nu mu} - j^mu``."""
    res = divergence(F.upper(), F.grid, order)
    if j is not None:
        res = res - j.components
    return res


def maxwell_relative(F: FaradayTensor, j: CurrentDensity | None, order: int = 2) -> float:
    """Max-norm Maxwell residual relative to the max-norm of ``d_nu F^{nu mu}``."""
    divF = divergence(F.upper(), F.grid, order)
    res = divF - (j.components if j is not None else 0.0)
    win = (slice(None),) + interior_mask(F.grid)
    scale = float(np.abs(divF[win]).max(initial=0.0))
    if j is not None:
        scale = max(scale, float(np.abs(j.components[win]).max(initial=0.0)))
    r = float(np.abs(res[win]).max(initial=0.0))
    return r / scale if scale > 0 else r


def lorentz_force_density(F: FaradayTensor, j: CurrentDensity) -> np.ndarray:
    """``F^{mu nu} j_nu``."""
    return np.einsum("mn...,n...->m...", F.upper(), j.lower())


def poynting_residual(F: FaradayTensor, j_total: CurrentDensity | None, order: int = 2) -> np.ndarray:
    """``d_nu Theta^{nu mu} + F^mu_nu sum_a j^(a) nu`` (zero when Maxwell holds)."""
    theta = canonical_tensor(F)
    res = divergence(theta.components, F.grid, order)
    if j_total is not None:
        res = res + np.einsum("mn...,n...->m...", F.mixed(), j_total.components)
    return res


def lorentz_residual(T: EMTensor, F: FaradayTensor | None, j: CurrentDensity | None, order: int = 2) -> np.ndarray:
    """Matter tenet ``d_nu T^{nu mu} - F^{mu nu} j_nu``."""
    res = divergence(T.components, T.grid, order)
    if F is not None and j is not None:
        res = res - lorentz_force_density(F, j)
    return res


def total_conservation_residual(
    Theta: EMTensor, T_list: Sequence[EMTensor], grid: SpacetimeGrid | None = None, order: int = 2
) -> np.ndarray:
    """``d_nu P^{nu mu}`` for ``P = Theta + sum_a T^(a)``."""
    grid = grid or Theta.grid
    P = Theta.components.copy()
    for T in T_list:
        P += T.components
    return divergence(P, grid, order)


def angular_momentum_residual(P: EMTensor, grid: SpacetimeGrid | None = None, order: int = 2) -> np.ndarray:
    """``d_mu J^{mu nu rho}`` with ``J^{mu nu rho} = eps^{nu rho lam sig} P^mu_sig x_lam``.

    Returns an array of shape ``(4, 4, n_times, *shape)``, antisymmetric in
    its first two indices.
    """
    grid = grid or P.grid
    if grid.spatial_dims != 3:
        raise ConfigurationError("angular momentum needs 3 spatial dimensions (4-index Levi-Civita)")
    g = metric(4)
    eps = levi_civita(4)
    x_low = [g[lam] * c for lam, c in enumerate(grid.spacetime_mesh())]
    Pmix = P.components * g.reshape((1, 4) + (1,) * (P.components.ndim - 2))  # P^mu_sig
    out = np.zeros((4, 4) + grid.full_shape)
    for nu in range(4):
        for rho in range(nu + 1, 4):
            acc = np.zeros(grid.full_shape)
            for mu in range(4):
                J = np.zeros(grid.full_shape)
                for lam in range(4):
                    for sig in range(4):
                        e = eps[nu, rho, lam, sig]
                        if e != 0.0:
                            J += e * Pmix[mu, sig] * x_low[lam]
                acc += _d(J, mu, grid, order)
            out[nu, rho] = acc
            out[rho, nu] = -acc
    return out


# --------------------------------------------------------------------------
# symmetry transforms


def scale_transform(bundle: FieldBundle, lam: float) -> FieldBundle:
    """Dilatation ``A -> A/lam``, ``j -> j/lam^3``, ``T -> T/lam^4`` at ``x -> lam x``.

    The lattice is rescaled instead of resampled, so sample values map index
    for index.
    """
    if not lam > 0.0:
        raise ValueError(f"dilatation factor must be positive, got {lam}")
    grid = bundle.grid.scaled(lam)
    out = FieldBundle(grid)
    if bundle.A is not None:
        out.A = FourPotential(bundle.A.components / lam, grid)
    if bundle.j is not None:
        out.j = CurrentDensity(bundle.j.components / lam**3, grid, bundle.j.conserved)
    out.tensors = {
        k: EMTensor(T.components / lam**4, grid, T.symmetrize) for k, T in bundle.tensors.items()
    }
    return out


def _reflect(arr: np.ndarray, grid: SpacetimeGrid, ncomp: int) -> np.ndarray:
    idx = (slice(None),) * ncomp + (slice(None, None, -1),) * grid.ndim
    return arr[idx].copy()


def pt_transform(bundle: FieldBundle) -> FieldBundle:
    """``A(x) -> -A(-x)``, ``j(x) -> -j(-x)``, ``T(x) -> T(-x)``.

    The index map ``i -> n - 1 - i`` on every space-time axis realises
    ``x -> -x``; this requires a lattice centred on the origin.
    """
    grid = bundle.grid
    if not grid.is_symmetric():
        raise ConfigurationError("PT needs a lattice symmetric about the space-time origin")
    out = FieldBundle(grid)
    if bundle.A is not None:
        out.A = FourPotential(-_reflect(bundle.A.components, grid, 1), grid)
    if bundle.j is not None:
        out.j = CurrentDensity(-_reflect(bundle.j.components, grid, 1), grid, bundle.j.conserved)
    out.tensors = {
        k: EMTensor(_reflect(T.components, grid, 2), grid, T.symmetrize) for k, T in bundle.tensors.items()
    }
    return out


# --------------------------------------------------------------------------
# potentials from currents


def continuity_residual(j: CurrentDensity, order: int = 2) -> np.ndarray:
    return divergence(j.components, j.grid, order)


def _kernel_distances(grid: SpacetimeGrid) -> tuple[np.ndarray, tuple[int, ...]]:
    padded = tuple(2 * n for n in grid.shape)
    axes = []
    for n, h, N in zip(grid.shape, grid.spacing, padded):
        k = np.arange(N)
        k = np.where(k < n, k, k - N)
        axes.append(k * h)
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.sqrt(sum(m**2 for m in mesh)), padded


def _convolve(kernel_hat: np.ndarray, src: np.ndarray, shape: tuple[int, ...], padded: tuple[int, ...]) -> np.ndarray:
    s_hat = sfft.rfftn(src, s=padded)
    full = sfft.irfftn(s_hat * kernel_hat, s=padded)
    return full[tuple(slice(0, n) for n in shape)]


def potential_from_current(
    j: CurrentDensity,
    cfg: GreenKernelConfig | None = None,
    grid: SpacetimeGrid | None = None,
    time_indices: Sequence[int] | None = None,
    static_rtol: float = 1e-12,
) -> FourPotential:
    """Lorenz-gauge potential ``A^mu = (a_ret K_ret + a_adv K_adv) * j^mu``.

    The scalar kernel ``delta(t -+ |x|) / (4 pi |x|)`` is summed over the
    lattice: every source cell contributes from the time sample(s) bracketing
    ``t -+ |x - x'|`` (linear interpolation), with source history held at its
    first/last sample outside the recorded window.  The origin cell uses the
    exact cell average of ``1/r``.  A time-independent source reduces to one
    free-space Coulomb convolution.  Three spatial dimensions only.

    ``meta`` on the result carries the continuity residual of ``j`` and the
    Lorenz-gauge residual of ``A``; ``meta["nonconserved"]`` flags a source
    that fails continuity.
    """
    cfg = cfg or GreenKernelConfig()
    grid = grid or j.grid
    if grid.spatial_dims != 3:
        raise ConfigurationError("the light-cone kernel is implemented for 3 spatial dimensions")
    r, padded = _kernel_distances(grid)
    dv = grid.cell_volume
    with np.errstate(divide="ignore"):
        base = np.where(r > 0, dv / (4.0 * np.pi * np.where(r > 0, r, 1.0)), 0.0)
    h_eff = dv ** (1.0 / 3.0)
    base[(0,) * 3] = UNIT_CUBE_INVERSE_R * h_eff**2 / (4.0 * np.pi)

    comps = j.components
    nt = grid.n_times
    ref = np.abs(comps).max(initial=0.0)
    static = nt == 1 or np.all(np.abs(comps - comps[:, :1]) <= static_rtol * max(ref, 1e-300))
    tidx = list(range(nt)) if time_indices is None else list(time_indices)
    A = np.zeros_like(comps)
    meta: dict = {"static": bool(static), "history_clamped": False}
    if static:
        k_hat = sfft.rfftn(base, s=padded)
        for mu in range(grid.ndim):
            if np.any(comps[mu, 0]):
                val = _convolve(k_hat, comps[mu, 0], grid.shape, padded)
                A[mu, :] = val
    else:
        dt = grid.time_step
        lag = r / dt
        max_lag = int(np.ceil(lag.max())) + 1
        kernels = []
        for ell in range(max_lag + 1):
            w = np.clip(1.0 - np.abs(lag - ell), 0.0, None)
            if np.any(w):
                kernels.append((ell, sfft.rfftn(base * w, s=padded)))
        for k in tidx:
            for sign, alpha in ((-1, cfg.alpha_ret), (+1, cfg.alpha_adv)):
                if alpha == 0.0:
                    continue
                for ell, k_hat in kernels:
                    src_t = k + sign * ell
                    if src_t < 0 or src_t >= nt:
                        meta["history_clamped"] = True
                        src_t = min(max(src_t, 0), nt - 1)
                    for mu in range(grid.ndim):
                        if np.any(comps[mu, src_t]):
                            A[mu, k] += alpha * _convolve(k_hat, comps[mu, src_t], grid.shape, padded)
    out = FourPotential(A, grid, meta)
    cont = continuity_residual(j) if nt >= 3 else None
    if cont is not None:
        win = interior_mask(grid)
        scale = max(float(np.abs(j.components).max(initial=0.0)) / min(grid.spacing), 1e-300)
        c_rel = float(np.abs(cont[win]).max(initial=0.0)) / scale
        meta["continuity_residual"] = c_rel
        meta["nonconserved"] = c_rel > 1e-3
        gauge = divergence(A, grid)
        meta["gauge_residual"] = float(np.abs(gauge[win]).max(initial=0.0))
        if meta["nonconserved"]:
            log.warning("source current is not conserved (relative residual %.3g)", c_rel)
    else:
        meta["nonconserved"] = False
    return out


def tenet_norms(res: np.ndarray, grid: SpacetimeGrid, scale: float = 1.0, margin: int = 2) -> ResidualNorms:
    return residual_norms(res, grid, scale, interior_mask(grid, margin=margin))
