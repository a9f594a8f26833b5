"""Point-particle ensembles: Lorentz-force trajectories, deposition and Bohmian transport.

Trajectories are integrated with classical RK4 in coordinate time; proper time
is carried along as an extra state variable (``d tau / dt = 1 / u^0``), which
makes the integrator vectorize over whole ensembles.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .grid import ConfigurationError, SpacetimeGrid, metric
from .tensor_core import (
    CurrentDensity,
    EMTensor,
    FaradayTensor,
    continuity_residual,
    _d,
    lorentz_residual,
)

KERNEL_CUTOFF = 8.0  # truncation radius of the mollifier in units of its width
DENSITY_FLOOR = 1e-12  # relative floor on rho for Bohmian transport


@dataclass
class PointTrajectory:
    tau: np.ndarray  # (n,)
    x: np.ndarray  # (n, D) positions x^mu, x^0 = t
    u: np.ndarray  # (n, D) four-velocity dx^mu / d tau
    q: float = 1.0
    m: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.x[:, 0]

    def normalization_drift(self) -> float:
        g = metric(self.x.shape[1])
        return float(np.abs(np.einsum("nm,m,nm->n", self.u, g, self.u) - 1.0).max())

    def at_time(self, t: float | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Position ``x^i`` and four-velocity at coordinate time(s) ``t`` (cubic Hermite)."""
        ts = self.times
        v = self.u[:, 1:] / self.u[:, :1]
        xs = CubicHermiteSpline(ts, self.x[:, 1:], v, axis=0)(t)
        us = np.stack([np.interp(t, ts, self.u[:, k]) for k in range(self.u.shape[1])], axis=-1)
        return xs, us


@dataclass
class PointEnsemble:
    trajectories: list[PointTrajectory]
    weights: np.ndarray
    kernel_width: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(self.trajectories),):
            raise ConfigurationError("one weight per trajectory is required")
        if np.any(w < 0) or w.sum() <= 0:
            raise ConfigurationError("weights must be non-negative with positive sum")
        self.weights = w / w.sum()

    def positions(self, t: float) -> np.ndarray:
        """Spatial positions of all members at coordinate time ``t``, shape ``(N, d)``."""
        return np.stack([tr.at_time(t)[0] for tr in self.trajectories])


# ------------------------------------------------------------ field handling

FieldSpec = None | np.ndarray | FaradayTensor | Callable[[float, np.ndarray], np.ndarray]


def interpolate(f: np.ndarray, grid: SpacetimeGrid, points: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of ``f[..., *grid.shape]`` at ``points`` of shape ``(N, d)``.

    Periodic lattices wrap; absorbing ones clamp to the edge values.
    """
    d = grid.spatial_dims
    lead = f.shape[: f.ndim - d]
    frac = [(points[:, i] - grid.origin[i]) / grid.spacing[i] for i in range(d)]
    base, wts = [], []
    for i, s in enumerate(frac):
        n = grid.shape[i]
        i0 = np.floor(s).astype(int)
        w1 = s - i0
        if grid.boundary == "periodic":
            a, b = i0 % n, (i0 + 1) % n
        else:
            a, b = np.clip(i0, 0, n - 1), np.clip(i0 + 1, 0, n - 1)
        base.append((a, b))
        wts.append((1.0 - w1, w1))
    flat = f.reshape(lead + (-1,))
    out = np.zeros(lead + (points.shape[0],))
    for corner in range(2 ** d):
        bits = [(corner >> i) & 1 for i in range(d)]
        idx = np.ravel_multi_index([base[i][b] for i, b in enumerate(bits)], grid.shape)
        w = np.prod([wts[i][b] for i, b in enumerate(bits)], axis=0)
        out += flat[..., idx] * w
    return out


def _field_at(F_ext: FieldSpec, t: float, X: np.ndarray, D: int) -> np.ndarray:
    """``F_{mu nu}`` at the points ``X`` (N, d), shape ``(N, D, D)``."""
    N = X.shape[0]
    if F_ext is None:
        return np.zeros((N, D, D))
    if isinstance(F_ext, FaradayTensor):
        g = F_ext.grid
        c = F_ext.components
        if g.n_times == 1:
            vals = interpolate(c[:, :, 0], g, X)
        else:
            s = np.clip((t - g.t0) / g.time_step, 0.0, g.n_times - 1.0)
            k = min(int(np.floor(s)), g.n_times - 2)
            w = s - k
            vals = (1 - w) * interpolate(c[:, :, k], g, X) + w * interpolate(c[:, :, k + 1], g, X)
        return np.moveaxis(vals, -1, 0)
    if callable(F_ext):
        return np.broadcast_to(np.asarray(F_ext(t, X), dtype=float), (N, D, D))
    arr = np.asarray(F_ext, dtype=float)
    if arr.shape != (D, D):
        raise ConfigurationError(f"constant field must have shape {(D, D)}")
    return np.broadcast_to(arr, (N, D, D))


def four_velocity(v: Sequence[float] | np.ndarray) -> np.ndarray:
    """``u = gamma (1, v)`` for 3-velocities ``v`` (last axis), ``|v| < 1``."""
    v = np.asarray(v, dtype=float)
    v2 = np.sum(v**2, axis=-1, keepdims=True)
    if np.any(v2 >= 1.0):
        raise ConfigurationError("initial velocity must be timelike (|v| < 1)")
    gam = 1.0 / np.sqrt(1.0 - v2)
    return np.concatenate([gam, gam * v], axis=-1)


def _rhs(t: float, X: np.ndarray, U: np.ndarray, F_ext: FieldSpec, qm: float) -> tuple[np.ndarray, ...]:
    D = U.shape[1]
    F = _field_at(F_ext, t, X, D)
    g = metric(D)
    # du^mu/dtau = (q/m) F^mu_nu u^nu ; divide by u^0 for d/dt
    force = qm * np.einsum("m,nmk,nk->nm", g, F, U)
    inv = 1.0 / U[:, :1]
    return U[:, 1:] * inv, force * inv, inv[:, 0]


def integrate_batch(
    x0: np.ndarray, u0: np.ndarray, F_ext: FieldSpec, t_span: tuple[float, float], dt: float, qm: float = 1.0,
    grid: SpacetimeGrid | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """RK4 in coordinate time for ``N`` particles at once.

    Returns ``(t, X, U, tau, alive)`` with shapes ``(n,)``, ``(n, N, d)``,
    ``(n, N, D)``, ``(n, N)`` and ``(N,)``.  ``alive`` is False for particles
    that left an absorbing ``grid``; their state is frozen at exit.
    """
    X = np.array(x0, dtype=float, ndmin=2)
    U = np.array(u0, dtype=float, ndmin=2)
    t0, t1 = t_span
    n = max(1, int(np.ceil((t1 - t0) / dt - 1e-9)))
    h = (t1 - t0) / n
    tau = np.zeros(X.shape[0])
    alive = np.ones(X.shape[0], dtype=bool)
    Ts, Xs, Us, taus = [t0], [X.copy()], [U.copy()], [tau.copy()]
    lo = hi = None
    if grid is not None and grid.boundary == "absorbing":
        lo = np.array(grid.origin)
        hi = lo + (np.array(grid.shape) - 1) * np.array(grid.spacing)
    t = t0
    for _ in range(n):
        k1 = _rhs(t, X, U, F_ext, qm)
        k2 = _rhs(t + h / 2, X + h / 2 * k1[0], U + h / 2 * k1[1], F_ext, qm)
        k3 = _rhs(t + h / 2, X + h / 2 * k2[0], U + h / 2 * k2[1], F_ext, qm)
        k4 = _rhs(t + h, X + h * k3[0], U + h * k3[1], F_ext, qm)
        a = alive[:, None]
        X = np.where(a, X + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]), X)
        U = np.where(a, U + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]), U)
        tau = np.where(alive, tau + h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]), tau)
        t += h
        if lo is not None:
            alive &= np.all((X >= lo) & (X <= hi), axis=1)
        Ts.append(t)
        Xs.append(X.copy())
        Us.append(U.copy())
        taus.append(tau.copy())
    return np.array(Ts), np.array(Xs), np.array(Us), np.array(taus), alive


def lorentz_integrate(
    position: Sequence[float],
    velocity: Sequence[float],
    F_ext: FieldSpec = None,
    duration: float = 1.0,
    q: float = 1.0,
    m: float = 1.0,
    dt: float = 1e-2,
    t0: float = 0.0,
    grid: SpacetimeGrid | None = None,
) -> PointTrajectory:
    """Integrate ``m d^2x/dtau^2 = q F u`` from ``position`` with 3-velocity ``velocity``.

    ``F_ext`` is None, a constant ``(D, D)`` array of ``F_{mu nu}``, a
    callable ``(t, X) -> F_{mu nu}`` or a :class:`FaradayTensor`.  A
    trajectory leaving an absorbing ``grid`` is truncated at the exit and
    flagged in ``meta["truncated"]``.
    """
    if m <= 0:
        raise ConfigurationError("mass must be positive")
    x0 = np.asarray(position, dtype=float)
    u0 = four_velocity(velocity)
    ts, X, U, tau, alive = integrate_batch(x0[None], u0[None], F_ext, (t0, t0 + duration), dt, q / m, grid)
    X, U, tau = X[:, 0], U[:, 0], tau[:, 0]
    keep = len(ts)
    if not alive[0]:
        # keep samples up to and including the first one outside the box
        moved = np.any(np.diff(X, axis=0) != 0, axis=1)
        keep = int(np.nonzero(moved)[0].max()) + 2 if moved.any() else 1
    x4 = np.column_stack([ts[:keep], X[:keep]])
    tr = PointTrajectory(tau[:keep], x4, U[:keep], q, m)
    tr.meta["truncated"] = not bool(alive[0])
    tr.meta["normalization_drift"] = tr.normalization_drift()
    return tr


# ---------------------------------------------------------------- deposition


def _kernel_1d(x: np.ndarray, c: float, sigma: float) -> np.ndarray:
    return np.exp(-0.5 * ((x - c) / sigma) ** 2) / (np.sqrt(2.0 * np.pi) * sigma)


def _window(grid: SpacetimeGrid, i: int, c: float, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Lattice indices within ``radius`` of ``c`` along axis ``i`` and their (unwrapped) coordinates."""
    h, o, n = grid.spacing[i], grid.origin[i], grid.shape[i]
    lo = int(np.ceil((c - radius - o) / h))
    hi = int(np.floor((c + radius - o) / h))
    k = np.arange(lo, hi + 1)
    x = o + h * k
    if grid.boundary == "periodic":
        return k % n, x
    ok = (k >= 0) & (k < n)
    return k[ok], x[ok]


def deposit_points(
    grid: SpacetimeGrid, t: float, positions: np.ndarray, velocities: np.ndarray, weights: np.ndarray,
    q: float | np.ndarray, m: float | np.ndarray, sigma: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Mollified ``j^mu`` and ``T^{mu nu}`` of point particles at one instant.

    The world-line integral of a delta function gives ``delta^3 / u^0``, so a
    particle contributes ``q u^mu / u^0`` and ``m u^mu u^nu / u^0`` times the
    kernel.
    """
    d, D = grid.spatial_dims, grid.ndim
    j = np.zeros((D,) + grid.shape)
    T = np.zeros((D, D) + grid.shape)
    q = np.broadcast_to(np.asarray(q, dtype=float), weights.shape)
    m = np.broadcast_to(np.asarray(m, dtype=float), weights.shape)
    radius = KERNEL_CUTOFF * sigma
    for p in range(positions.shape[0]):
        if weights[p] == 0.0:
            continue
        idx, fac = [], []
        for i in range(d):
            k, x = _window(grid, i, positions[p, i], radius)
            idx.append(k)
            fac.append(_kernel_1d(x, positions[p, i], sigma))
        K = fac[0]
        for f in fac[1:]:
            K = np.multiply.outer(K, f)
        sl = np.ix_(*idx)
        u = velocities[p]
        jw = weights[p] * q[p] * u / u[0]
        Tw = weights[p] * m[p] * np.outer(u, u) / u[0]
        for mu in range(D):
            j[(mu,) + sl] += jw[mu] * K
            for nu in range(D):
                T[(mu, nu) + sl] += Tw[mu, nu] * K
    return j, T


def deposit_ensemble(
    ens: PointEnsemble, grid: SpacetimeGrid, order: int = 2
) -> tuple[CurrentDensity, EMTensor]:
    """Accumulate the ensemble's ``j`` and ``T`` on the space-time ``grid``.

    ``j.meta["continuity_residual"]`` holds the max of ``|d_mu j^mu|`` over
    interior time levels relative to ``max |j|/h``.
    """
    sigma = ens.kernel_width
    if sigma < 2.0 * max(grid.spacing):
        raise ConfigurationError("deposition kernel must be at least 2 grid spacings wide")
    D = grid.ndim
    j = np.zeros((D,) + grid.full_shape)
    T = np.zeros((D, D) + grid.full_shape)
    qs = np.array([tr.q for tr in ens.trajectories])
    ms = np.array([tr.m for tr in ens.trajectories])
    for n, t in enumerate(grid.times()):
        live = np.array([tr.times[0] - 1e-12 <= t <= tr.times[-1] + 1e-12 for tr in ens.trajectories])
        pos = np.zeros((len(ens.trajectories), grid.spatial_dims))
        vel = np.zeros((len(ens.trajectories), D))
        vel[:, 0] = 1.0
        for p, tr in enumerate(ens.trajectories):
            if live[p]:
                pos[p], vel[p] = tr.at_time(t)
        w = np.where(live, ens.weights, 0.0)
        j[:, n], T[:, :, n] = deposit_points(grid, t, pos, vel, w, qs, ms, sigma)
    cur = CurrentDensity(j, grid, conserved=True)
    tens = EMTensor(T, grid)
    if grid.n_times >= 3:
        c = continuity_residual(cur, order)[1:-1]
        scale = np.abs(j).max() / min(grid.steps) or 1.0
        cur.meta["continuity_residual"] = float(np.abs(c).max() / scale)
    return cur, tens


def ensemble_from_points(
    positions: np.ndarray, velocities: np.ndarray, weights: np.ndarray, F_ext: FieldSpec, duration: float,
    q: float = 1.0, m: float = 1.0, dt: float = 1e-2, kernel_width: float = 1.0, t0: float = 0.0,
) -> PointEnsemble:
    """Lorentz-force ensemble from initial positions and 3-velocities (vectorized RK4)."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    U0 = four_velocity(np.atleast_2d(velocities))
    ts, X, U, tau, _ = integrate_batch(positions, U0, F_ext, (t0, t0 + duration), dt, q / m)
    trs = [
        PointTrajectory(tau[:, p], np.column_stack([ts, X[:, p]]), U[:, p], q, m)
        for p in range(positions.shape[0])
    ]
    return PointEnsemble(trs, weights, kernel_width)


def ensemble_tenet_residual(
    ens: PointEnsemble, grid: SpacetimeGrid, F: FaradayTensor | None, order: int = 2
) -> tuple[np.ndarray, float]:
    """``d_nu T^{nu mu} - F^{mu nu} j_nu`` of the deposited ensemble and its scale.

    The scale is the largest single term ``|d_nu T^{nu mu}|`` (no sum).

    Only interior time levels are meaningful.
    """
    j, T = deposit_ensemble(ens, grid, order)
    res = lorentz_residual(T, F, j, order)
    # largest single term d_nu T^{nu mu} (no sum over nu)
    scale = max(float(np.abs(_d(T.components[nu], nu, grid, order)[:, 1:-1]).max()) for nu in range(grid.ndim))
    return res, scale


# ------------------------------------------------------------- Bohmian flow


@dataclass
class WaveHistory:
    """Snapshots of a conserved density and its velocity field ``v = j / rho``."""

    grid: SpacetimeGrid  # spatial lattice
    times: np.ndarray  # (nt,)
    density: np.ndarray  # (nt, *shape), normalized to unit integral
    velocity: np.ndarray  # (nt, d, *shape)

    def at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        s = np.clip(np.interp(t, self.times, np.arange(len(self.times))), 0, len(self.times) - 1)
        k = min(int(np.floor(s)), len(self.times) - 2) if len(self.times) > 1 else 0
        w = s - k
        if len(self.times) == 1:
            return self.density[0], self.velocity[0]
        return (1 - w) * self.density[k] + w * self.density[k + 1], (1 - w) * self.velocity[k] + w * self.velocity[k + 1]


def _history_from_current(grid: SpacetimeGrid, times: list[float], currents: list[np.ndarray]) -> WaveHistory:
    rho = np.array([c[0] for c in currents])
    if np.any(rho.sum(axis=tuple(range(1, rho.ndim))) <= 0):
        raise ConfigurationError("density must be positive (positive-frequency / positive-charge state)")
    vmax = np.abs(rho).max(axis=tuple(range(1, rho.ndim)), keepdims=True)
    floor = DENSITY_FLOOR * vmax
    safe = np.where(np.abs(rho) > floor, rho, np.inf)
    vel = np.array([c[1:] for c in currents]) / safe[:, None]
    norm = rho.sum(axis=tuple(range(1, rho.ndim)), keepdims=True) * grid.cell_volume
    return WaveHistory(grid, np.array(times), rho / norm, vel)


def wave_history(wave, duration: float, n_snapshots: int) -> WaveHistory:
    """Evolve a :class:`KGState` or :class:`DiracState` and record ``rho`` and ``v``.

    The density is the conserved charge density divided by ``q`` (``psi^dag
    psi`` for Dirac, the Klein-Gordon charge density for KG).
    """
    from .dirac import DiracState, dirac_current, dirac_step
    from .kg import KGState, kg_current, kg_step

    if isinstance(wave, KGState):
        step, cur, q = kg_step, kg_current, wave.params.q
        offset = -0.5 * wave.dt
    elif isinstance(wave, DiracState):
        step, cur, q = dirac_step, dirac_current, wave.params.q
        offset = 0.0
    else:
        raise ConfigurationError(f"unsupported wave type {type(wave).__name__}")
    if q == 0:
        raise ConfigurationError("Bohmian transport needs a charged field (q != 0)")
    dt = wave.grid.time_step
    n_steps = int(round(duration / dt))
    stride = max(1, n_steps // max(1, n_snapshots - 1))
    state = wave
    times, currents = [], []
    for k in range(0, n_steps + 1, stride):
        if k:
            state = step(state, stride)
        times.append(state.t + offset)
        currents.append(cur(state).components[:, 0] / q)
    return _history_from_current(wave.grid, times, currents)


def sample_density(rho: np.ndarray, grid: SpacetimeGrid, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` points from a lattice density (cell choice plus uniform jitter)."""
    p = np.clip(rho.ravel(), 0.0, None)
    p = p / p.sum()
    cells = rng.choice(p.size, size=n, p=p)
    idx = np.unravel_index(cells, grid.shape)
    jitter = rng.random((n, grid.spatial_dims)) - 0.5
    return np.stack([grid.origin[i] + grid.spacing[i] * (idx[i] + jitter[:, i]) for i in range(grid.spatial_dims)],
                    axis=1)


def bohm_transport(history: WaveHistory, x0: np.ndarray, t_end: float | None = None,
                   substeps: int = 1) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """RK4 transport of points along ``v`` (linear in space and time).

    Returns ``(times, X, V, degenerate)`` with ``X`` and ``V`` of shape
    ``(nt, N, d)``.
    """
    g = history.grid
    times = history.times
    if t_end is not None:
        times = times[times <= t_end + 1e-12]
    X = np.array(x0, dtype=float)
    deg = np.zeros(X.shape[0], dtype=bool)

    def vel(t: float, P: np.ndarray) -> np.ndarray:
        rho, v = history.at(t)
        r = interpolate(rho, g, P)
        deg[:] |= r < DENSITY_FLOOR * rho.max()
        return interpolate(v, g, P).T

    Xs, Vs = [X.copy()], [vel(times[0], X)]
    for a, b in zip(times[:-1], times[1:]):
        h = (b - a) / substeps
        t = a
        for _ in range(substeps):
            k1 = vel(t, X)
            k2 = vel(t + h / 2, X + h / 2 * k1)
            k3 = vel(t + h / 2, X + h / 2 * k2)
            k4 = vel(t + h, X + h * k3)
            X = X + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t += h
            if g.boundary == "periodic":
                lo = np.array(g.origin)
                span = np.array(g.shape) * np.array(g.spacing)
                X = lo - 0.5 * np.array(g.spacing) + np.mod(X - lo + 0.5 * np.array(g.spacing), span)
        Xs.append(X.copy())
        Vs.append(vel(b, X))
    return times, np.array(Xs), np.array(Vs), deg


def bohm_sample(
    wave, n_samples: int, seed: int, duration: float = 0.0, n_snapshots: int = 2,
    history: WaveHistory | None = None, substeps: int = 1, kernel_width: float = 1.0,
) -> PointEnsemble:
    """Bohmian ensemble: positions drawn from ``rho(t0)`` and carried along ``v = j / rho``.

    Either pass a wave state (evolved for ``duration`` with ``n_snapshots``
    recorded levels) or a prepared :class:`WaveHistory`.  Members whose path
    meets a density below the floor are listed in ``meta["degenerate"]``.
    """
    if history is None:
        history = wave_history(wave, duration, n_snapshots)
    rng = np.random.default_rng(seed)
    x0 = sample_density(history.density[0], history.grid, n_samples, rng)
    times, X, V, deg = bohm_transport(history, x0, substeps=substeps)
    q = getattr(getattr(wave, "params", None), "q", 1.0)
    m = getattr(getattr(wave, "params", None), "m", 1.0)
    v2 = np.sum(V**2, axis=-1)
    superluminal = np.any(v2 >= 1.0, axis=0)
    gam = 1.0 / np.sqrt(np.clip(1.0 - v2, 1e-300, None))
    gam = np.where(v2 < 1.0, gam, np.nan)
    trs = []
    for p in range(n_samples):
        u = np.column_stack([gam[:, p], gam[:, p, None] * V[:, p]])
        dtau = np.diff(times) * 0.5 * (1.0 / gam[1:, p] + 1.0 / gam[:-1, p])
        tau = np.concatenate([[0.0], np.cumsum(dtau)])
        trs.append(PointTrajectory(tau, np.column_stack([times, X[:, p]]), u, q, m))
    ens = PointEnsemble(trs, np.ones(n_samples), kernel_width)
    ens.meta.update(
        degenerate=np.nonzero(deg)[0].tolist(),
        superluminal=np.nonzero(superluminal)[0].tolist(),
        seed=seed,
        history=history,
    )
    return ens


def histogram_distance(samples: np.ndarray, rho: np.ndarray, grid: SpacetimeGrid, coarsen: int = 4) -> float:
    """Total-variation distance between a sample histogram and a lattice density (1-D).

    Bins are blocks of ``coarsen`` lattice cells.
    """
    if grid.spatial_dims != 1:
        raise ConfigurationError("histogram_distance is implemented for one spatial dimension")
    n = grid.shape[0] // coarsen * coarsen
    h = grid.spacing[0]
    edges = grid.origin[0] - 0.5 * h + h * coarsen * np.arange(n // coarsen + 1)
    counts, _ = np.histogram(samples.ravel(), bins=edges)
    p = rho[:n].reshape(-1, coarsen).sum(axis=1)
    return 0.5 * float(np.abs(counts / samples.shape[0] - p / p.sum()).sum())


def paired_deviation(ens: PointEnsemble, F_ext: FieldSpec, dt: float | None = None) -> float:
    """RMS over members and sample times of ``|x_Bohm - x_Lorentz|``.

    Each Lorentz partner starts at its Bohmian member's initial position and
    velocity and is integrated with the same charge and mass.
    """
    tr0 = ens.trajectories[0]
    times = tr0.times
    X0 = np.array([tr.x[0, 1:] for tr in ens.trajectories])
    U0 = np.array([tr.u[0] for tr in ens.trajectories])
    if np.any(~np.isfinite(U0)):
        raise ConfigurationError("Bohmian initial velocities must be timelike")
    step = dt or float(np.min(np.diff(times)))
    ts, X, _, _, _ = integrate_batch(X0, U0, F_ext, (times[0], times[-1]), step, tr0.q / tr0.m)
    XL = np.stack([np.stack([np.interp(times, ts, X[:, p, i]) for i in range(X.shape[2])], axis=-1)
                   for p in range(X.shape[1])], axis=1)
    XB = np.stack([tr.x[:, 1:] for tr in ens.trajectories], axis=1)
    return float(np.sqrt(np.mean(np.sum((XB - XL) ** 2, axis=-1))))
