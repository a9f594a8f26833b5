"""Closed-form field configurations used as manufactured solutions.

Potentials are written symbolically; ``F`` and the source ``j = d_nu F^{nu mu}``
are obtained by symbolic differentiation, so a sampled configuration is
Maxwell-consistent to round-off and any residual measured on it comes from
the finite-difference stencils alone.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import sympy as sp

from .grid import SpacetimeGrid, metric
from .tensor_core import CurrentDensity, FaradayTensor, FieldBundle, FourPotential

T_, X_, Y_, Z_ = sp.symbols("t x y z", real=True)
COORDS = (T_, X_, Y_, Z_)


def _evaluate(expr_fn, mesh: list[np.ndarray]) -> np.ndarray:
    with np.errstate(all="ignore"):
        val = np.asarray(expr_fn(*mesh), dtype=float) * np.ones_like(mesh[0])
    bad = ~np.isfinite(val)
    if np.any(bad):
        # removable singularities (e.g. erf(r)/r at r = 0): nudge off the point
        shifted = [m + (1e-7 if i > 0 else 0.0) for i, m in enumerate(mesh)]
        with np.errstate(all="ignore"):
            alt = np.asarray(expr_fn(*shifted), dtype=float) * np.ones_like(mesh[0])
        val[bad] = alt[bad]
    return val


@dataclass
class ManufacturedField:
    """Symbolic four-potential ``A^mu(t, x, ...)`` in ``spatial_dims`` dimensions."""

    potential: tuple[sp.Expr, ...]
    spatial_dims: int

    @property
    def coords(self) -> tuple[sp.Symbol, ...]:
        return COORDS[: self.spatial_dims + 1]

    def symbolic(self) -> tuple[sp.Matrix, list[sp.Expr]]:
        d = self.spatial_dims + 1
        g = metric(d)
        c = self.coords
        A_low = [g[m] * self.potential[m] for m in range(d)]
        F = sp.zeros(d, d)
        for mu in range(d):
            for nu in range(d):
                F[mu, nu] = sp.diff(A_low[nu], c[mu]) - sp.diff(A_low[mu], c[nu])
        j = []
        for mu in range(d):
            j.append(sp.expand(sum(sp.diff(g[nu] * g[mu] * F[nu, mu], c[nu]) for nu in range(d))))
        return F, j

    def sample(self, grid: SpacetimeGrid) -> FieldBundle:
        if grid.spatial_dims != self.spatial_dims:
            raise ValueError("grid dimensionality does not match the manufactured field")
        d = grid.ndim
        mesh = grid.spacetime_mesh()
        c = self.coords
        F_sym, j_sym = self.symbolic()
        A = np.stack([_evaluate(sp.lambdify(c, e, modules=["numpy", "scipy"]), mesh) for e in self.potential])
        F = np.zeros((d, d) + grid.full_shape)
        for mu in range(d):
            for nu in range(mu + 1, d):
                F[mu, nu] = _evaluate(sp.lambdify(c, F_sym[mu, nu], modules=["numpy", "scipy"]), mesh)
        j = np.stack([_evaluate(sp.lambdify(c, e, modules=["numpy", "scipy"]), mesh) for e in j_sym])
        return FieldBundle(
            grid, FourPotential(A, grid), CurrentDensity(j, grid, conserved=True), F=FaradayTensor(F, grid)
        )


def plane_wave(k: float = 1.0, amplitude: float = 1.0, spatial_dims: int = 3) -> ManufacturedField:
    """Vacuum wave travelling along x, polarised along y (Lorenz gauge)."""
    if spatial_dims < 2:
        raise ValueError("a transverse wave needs at least 2 spatial dimensions")
    pot = [sp.Integer(0)] * (spatial_dims + 1)
    pot[2] = amplitude * sp.cos(k * (X_ - T_))
    return ManufacturedField(tuple(pot), spatial_dims)


def wave_packet(k: float = 1.5, width: float = 2.0, amplitude: float = 1.0, spatial_dims: int = 3) -> ManufacturedField:
    """Vacuum pulse ``f(x - t)`` polarised along y with a Gaussian envelope."""
    if spatial_dims < 2:
        raise ValueError("a transverse wave needs at least 2 spatial dimensions")
    u = X_ - T_
    pot = [sp.Integer(0)] * (spatial_dims + 1)
    pot[2] = amplitude * sp.cos(k * u) * sp.exp(-(u**2) / (2 * width**2))
    return ManufacturedField(tuple(pot), spatial_dims)


def gaussian_blob(charge: float = 1.0, sigma: float = 1.0) -> ManufacturedField:
    """Static Gaussian charge in 3-D with its exact Coulomb potential."""
    r = sp.sqrt(X_**2 + Y_**2 + Z_**2)
    phi = charge * sp.erf(r / (sp.sqrt(2) * sigma)) / (4 * sp.pi * r)
    return ManufacturedField((phi, 0, 0, 0), 3)


def gaussian_density(charge: float, sigma: float, grid: SpacetimeGrid) -> np.ndarray:
    """Charge density of :func:`gaussian_blob` sampled on ``grid``."""
    r2 = sum(m**2 for m in grid.spacetime_mesh()[1:])
    return charge * np.exp(-r2 / (2 * sigma**2)) / ((2 * np.pi) ** 1.5 * sigma**3)


def sourced_wobble(
    spatial_dims: int = 3, width: float = 3.0, omega: float = 0.5, k: float = 0.5
) -> ManufacturedField:
    """Generic smooth, time-dependent potential; its source is whatever
    Maxwell's equations require (automatically conserved)."""
    c = COORDS[1 : spatial_dims + 1]
    r2 = sum(x**2 for x in c)
    env = sp.exp(-r2 / (2 * width**2))
    pot = [env * (1 + sp.Rational(1, 2) * sp.sin(omega * T_))]
    for i, x in enumerate(c):
        pot.append(sp.Rational(1, 3) * env * sp.cos(omega * T_ + k * x + i))
    return ManufacturedField(tuple(pot), spatial_dims)


def free_kg_modes(
    modes: list[tuple[complex, tuple[float, ...], int]], mass: float, hbar: float, grid: SpacetimeGrid
) -> tuple[np.ndarray, np.ndarray]:
    """Superposition of free Klein-Gordon plane waves and its exact gradient.

    Each mode is ``(amplitude, momentum, sign)`` with ``sign=+1`` for
    positive frequency ``exp(-i(E t - p.x)/hbar)``.  Returns ``phi`` and
    ``d_mu phi`` (shape ``(D, n_times, *shape)``).
    """
    mesh = grid.spacetime_mesh()
    d = grid.ndim
    phi = np.zeros(grid.full_shape, dtype=complex)
    dphi = np.zeros((d,) + grid.full_shape, dtype=complex)
    for amp, p, sign in modes:
        p = np.asarray(p, dtype=float)
        E = sign * np.sqrt(mass**2 + p @ p)
        phase = -E * mesh[0] + sum(p[i] * mesh[i + 1] for i in range(d - 1))
        w = amp * np.exp(1j * phase / hbar)
        phi += w
        dphi[0] += -1j * E / hbar * w
        for i in range(d - 1):
            dphi[i + 1] += 1j * p[i] / hbar * w
    return phi, dphi


def crossed_packets(k: float = 0.5, width: float = 2.0, amplitude: float = 1.0) -> ManufacturedField:
    """Two vacuum pulses, one along +x (polarised y), one along -y (polarised x).

    The cross terms make the energy-momentum tensor depend on ``t, x, y``
    jointly, unlike a single null pulse.
    """
    u, v = X_ - T_, Y_ + T_
    f = amplitude * sp.cos(k * u) * sp.exp(-(u**2) / (2 * width**2))
    g = amplitude * sp.sin(k * v) * sp.exp(-(v**2) / (2 * width**2))
    return ManufacturedField((sp.Integer(0), g, f, sp.Integer(0)), 3)
