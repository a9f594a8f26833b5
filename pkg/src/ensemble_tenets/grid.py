"""Uniform space-time lattices, metric helpers and finite-difference stencils.

Arrays sampled on a :class:`SpacetimeGrid` use the layout
``(*components, n_times, *shape)``: any number of leading component axes,
then the time axis, then the spatial axes in ``x, y, z`` order.  Index
``mu = 0`` is time, ``mu = 1..spatial_dims`` the spatial axes.  Natural
units with ``c = 1`` and signature ``(+, -, -, -)``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np

Boundary = Literal["periodic", "absorbing"]


class StencilError(ValueError):
    """The grid has too few points for the requested stencil."""


class ConfigurationError(ValueError):
    """Invalid solver or grid configuration (stability, sizes, kernels)."""


@dataclass(frozen=True)
class SpacetimeGrid:
    spatial_dims: int
    shape: tuple[int, ...]
    spacing: tuple[float, ...]
    time_step: float = 1.0
    boundary: Boundary = "periodic"
    n_times: int = 1
    t0: float = 0.0
    # coordinate of index 0 along each spatial axis; None centres the grid on 0
    origin: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        object.__setattr__(self, "spacing", tuple(float(h) for h in self.spacing))
        if self.spatial_dims not in (1, 2, 3):
            raise ConfigurationError(f"spatial_dims must be 1, 2 or 3, got {self.spatial_dims}")
        if len(self.shape) != self.spatial_dims or len(self.spacing) != self.spatial_dims:
            raise ConfigurationError("shape and spacing must have one entry per spatial axis")
        if min(self.shape) <= 0 or min(self.spacing) <= 0.0:
            raise ConfigurationError("point counts and spacings must be strictly positive")
        if self.time_step <= 0.0 or self.n_times <= 0:
            raise ConfigurationError("time_step and n_times must be strictly positive")
        if self.boundary not in ("periodic", "absorbing"):
            raise ConfigurationError(f"unknown boundary policy {self.boundary!r}")
        if self.origin is None:
            origin = tuple(-0.5 * (n - 1) * h for n, h in zip(self.shape, self.spacing))
            object.__setattr__(self, "origin", origin)
        else:
            object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @classmethod
    def uniform(cls, spatial_dims: int, n: int, length: float, **kw) -> "SpacetimeGrid":
        """Cube of side ``length`` with ``n`` points per axis, centred on the origin."""
        h = length / n
        return cls(spatial_dims, (n,) * spatial_dims, (h,) * spatial_dims, **kw)

    @property
    def ndim(self) -> int:
        return self.spatial_dims + 1

    @property
    def full_shape(self) -> tuple[int, ...]:
        return (self.n_times, *self.shape)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def steps(self) -> tuple[float, ...]:
        """Step along every space-time axis, time first."""
        return (self.time_step, *self.spacing)

    def axis(self, i: int) -> np.ndarray:
        """1-D coordinates along spatial axis ``i`` (0-based)."""
        return self.origin[i] + self.spacing[i] * np.arange(self.shape[i])

    def times(self) -> np.ndarray:
        return self.t0 + self.time_step * np.arange(self.n_times)

    def mesh(self) -> list[np.ndarray]:
        """Spatial coordinate arrays, each of shape ``self.shape``."""
        return np.meshgrid(*[self.axis(i) for i in range(self.spatial_dims)], indexing="ij")

    def spacetime_mesh(self) -> list[np.ndarray]:
        """Coordinates ``x^mu`` with shape ``full_shape``, time first."""
        axes = [self.times()] + [self.axis(i) for i in range(self.spatial_dims)]
        return np.meshgrid(*axes, indexing="ij")

    def wavenumbers(self, i: int) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.shape[i], d=self.spacing[i])

    def with_times(self, n_times: int, t0: float | None = None) -> "SpacetimeGrid":
        return replace(self, n_times=n_times, t0=self.t0 if t0 is None else t0)

    def scaled(self, lam: float) -> "SpacetimeGrid":
        """The same lattice with every length and time multiplied by ``lam``."""
        return replace(
            self,
            spacing=tuple(lam * h for h in self.spacing),
            time_step=lam * self.time_step,
            t0=lam * self.t0,
            origin=tuple(lam * o for o in self.origin),
        )

    def is_symmetric(self) -> bool:
        """True when index reversal maps every coordinate x to -x."""
        ok = all(
            np.isclose(o, -0.5 * (n - 1) * h, atol=1e-12 * max(1.0, abs(o)))
            for o, n, h in zip(self.origin, self.shape, self.spacing)
        )
        t_end = self.t0 + (self.n_times - 1) * self.time_step
        return ok and np.isclose(self.t0, -t_end, atol=1e-12 * max(1.0, abs(self.t0)))

    def to_dict(self) -> dict:
        return {
            "spatial_dims": self.spatial_dims,
            "shape": list(self.shape),
            "spacing": list(self.spacing),
            "time_step": self.time_step,
            "boundary": self.boundary,
            "n_times": self.n_times,
            "t0": self.t0,
            "origin": list(self.origin),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpacetimeGrid":
        return cls(
            spatial_dims=int(d["spatial_dims"]),
            shape=tuple(d["shape"]),
            spacing=tuple(d["spacing"]),
            time_step=float(d.get("time_step", 1.0)),
            boundary=d.get("boundary", "periodic"),
            n_times=int(d.get("n_times", 1)),
            t0=float(d.get("t0", 0.0)),
            origin=tuple(d["origin"]) if d.get("origin") is not None else None,
        )


def metric(ndim: int) -> np.ndarray:
    """Diagonal of the Minkowski metric ``(+1, -1, ...)`` truncated to ``ndim``."""
    g = -np.ones(ndim)
    g[0] = 1.0
    return g


def levi_civita(n: int = 4) -> np.ndarray:
    """Totally antisymmetric symbol with ``eps[0, 1, ..., n-1] = +1``."""
    eps = np.zeros((n,) * n)
    for perm in itertools.permutations(range(n)):
        inversions = sum(
            1 for i in range(n) for j in range(i + 1, n) if perm[i] > perm[j]
        )
        eps[perm] = -1.0 if inversions % 2 else 1.0
    return eps


def _check_points(n: int, order: int) -> None:
    need = 3 if order == 2 else 5
    if n < need:
        raise StencilError(f"need at least {need} points along an axis for order {order}, got {n}")


def _diff_axis(f: np.ndarray, axis: int, h: float, periodic: bool, order: int) -> np.ndarray:
    n = f.shape[axis]
    _check_points(n, order if periodic else 2)
    if periodic:
        if order == 2:
            return (np.roll(f, -1, axis) - np.roll(f, 1, axis)) / (2.0 * h)
        return (
            -np.roll(f, -2, axis) + 8.0 * np.roll(f, -1, axis)
            - 8.0 * np.roll(f, 1, axis) + np.roll(f, 2, axis)
        ) / (12.0 * h)
    out = np.gradient(f, h, axis=axis, edge_order=2)
    if order == 4 and n >= 5:
        def sl(a: int, b: int | None) -> tuple:
            idx = [slice(None)] * f.ndim
            idx[axis] = slice(a, b)
            return tuple(idx)

        interior = (
            -f[sl(4, None)] + 8.0 * f[sl(3, -1)] - 8.0 * f[sl(1, -3)] + f[sl(0, -4)]
        ) / (12.0 * h)
        out[sl(2, -2)] = interior
    return out


def derivative(
    f: np.ndarray, mu: int, grid: SpacetimeGrid, order: int = 2, spatial_only: bool = False
) -> np.ndarray:
    """Partial derivative ``d/dx^mu`` of a sampled field.

    With ``spatial_only=False`` the field carries the time axis (layout
    ``(*components, n_times, *shape)``) and ``mu = 0`` differentiates along
    time, always with one-sided ends.  With ``spatial_only=True`` the field
    has layout ``(*components, *shape)`` and ``mu`` counts spatial axes from 1.
    Spatial axes are periodic or one-sided according to ``grid.boundary``.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    nsp = grid.spatial_dims
    if spatial_only:
        if not 1 <= mu <= nsp:
            raise ValueError(f"spatial index mu={mu} out of range")
        axis = f.ndim - nsp + (mu - 1)
        return _diff_axis(f, axis, grid.spacing[mu - 1], grid.boundary == "periodic", order)
    if not 0 <= mu <= nsp:
        raise ValueError(f"index mu={mu} out of range")
    axis = f.ndim - nsp - 1 + mu
    if mu == 0:
        return _diff_axis(f, axis, grid.time_step, False, order)
    return _diff_axis(f, axis, grid.spacing[mu - 1], grid.boundary == "periodic", order)


def interior_mask(grid: SpacetimeGrid, margin: int = 2, time_margin: int = 1) -> tuple:
    """Slice tuple dropping boundary layers where one-sided stencils are used."""
    sl = [slice(time_margin, grid.n_times - time_margin) if grid.n_times > 2 * time_margin else slice(None)]
    for n in grid.shape:
        if grid.boundary == "periodic":
            sl.append(slice(None))
        else:
            sl.append(slice(margin, n - margin))
    return tuple(sl)


@dataclass
class ResidualNorms:
    max_norm: float
    l2_norm: float
    scale: float = field(default=1.0)

    @property
    def relative(self) -> float:
        return self.max_norm / self.scale if self.scale > 0 else self.max_norm


def residual_norms(
    res: np.ndarray, grid: SpacetimeGrid, scale: float = 1.0, window: tuple | None = None
) -> ResidualNorms:
    """Max- and L2-norms of a residual over the interior window."""
    if window is None:
        window = interior_mask(grid)
    ncomp = res.ndim - grid.spatial_dims - 1
    r = res[(slice(None),) * ncomp + window]
    r = np.abs(r)
    dv = grid.cell_volume * grid.time_step
    return ResidualNorms(float(r.max(initial=0.0)), float(np.sqrt(np.sum(r**2) * dv)), scale)


def physical_window(grid: SpacetimeGrid, half_width: float | Sequence[float], time_margin: int = 1) -> tuple:
    """Slice tuple selecting ``|x_i| <= half_width`` on every spatial axis.

    Refinement studies should compare residuals over the same physical
    region on every level; a fixed number of boundary points does not.
    """
    hw = np.broadcast_to(np.asarray(half_width, dtype=float), (grid.spatial_dims,))
    sl = [slice(time_margin, grid.n_times - time_margin) if grid.n_times > 2 * time_margin else slice(None)]
    for i in range(grid.spatial_dims):
        idx = np.nonzero(np.abs(grid.axis(i)) <= hw[i] * (1 + 1e-12))[0]
        if idx.size == 0:
            raise ValueError("physical window contains no lattice points")
        sl.append(slice(int(idx[0]), int(idx[-1]) + 1))
    return tuple(sl)
