"""Bound spectra, radiated lines of superposition ensembles and pulse-driven transitions.

A single charged particle sits in a static well on a lattice.  The lowest
eigenpairs come from a sparse shift-invert solve.  A superposition of
eigenstates has an oscillating ensemble current whose dipole radiates only at
the level differences ``(E_a - E_b) / hbar``.  A weak pulse ``-q E(t) x``
moves population between levels.  First-order amplitudes are quadratures of the
sampled field.  The "exact" route integrates the Schrodinger equation in the
truncated eigenbasis.

High-lying box-normalized eigenstates above ``threshold`` stand in for the
continuum, so "ionization" means population above that energy.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Literal, Sequence

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .grid import ConfigurationError, SpacetimeGrid


class SolverError(RuntimeError):
    """The eigensolver did not reach the requested residual."""


class ResolutionError(ValueError):
    """The sampling window cannot separate the expected lines."""


@dataclass(frozen=True)
class HamiltonianSpec:
    """``H = -hbar^2/(2m) Laplacian + q V(x)`` on ``grid``.

    ``potential`` is a callable of the coordinate arrays or an array of
    shape ``grid.shape``.  Absorbing boundaries mean a hard-wall box.
    """

    grid: SpacetimeGrid
    potential: Callable[..., np.ndarray] | np.ndarray
    mass: float = 1.0
    hbar: float = 1.0
    q: float = 1.0

    def __post_init__(self) -> None:
        if self.mass <= 0 or self.hbar <= 0:
            raise ConfigurationError("mass and hbar must be positive")

    def potential_array(self) -> np.ndarray:
        V = self.potential(*self.grid.mesh()) if callable(self.potential) else self.potential
        V = np.broadcast_to(np.asarray(V, dtype=float), self.grid.shape)
        if not np.all(np.isfinite(V)):
            raise ConfigurationError("potential must be finite on the grid")
        return V

    def matrix(self) -> sps.csr_matrix:
        g = self.grid
        periodic = g.boundary == "periodic"
        lap = None
        for i, (n, h) in enumerate(zip(g.shape, g.spacing)):
            d2 = sps.diags([np.ones(n - 1), -2.0 * np.ones(n), np.ones(n - 1)], [-1, 0, 1], format="lil")
            if periodic:
                d2[0, n - 1] = d2[n - 1, 0] = 1.0
            d2 = sps.csr_matrix(d2) / h**2
            eyes = [sps.identity(m) for m in g.shape]
            eyes[i] = d2
            term = eyes[0]
            for e in eyes[1:]:
                term = sps.kron(term, e)
            lap = term if lap is None else lap + term
        V = self.q * self.potential_array().ravel()
        return sps.csr_matrix(-0.5 * self.hbar**2 / self.mass * lap + sps.diags(V))


@dataclass
class BoundSpectrum:
    energies: np.ndarray
    states: np.ndarray  # (k, *shape), normalized so sum |phi|^2 dV = 1
    grid: SpacetimeGrid
    hbar: float = 1.0
    mass: float = 1.0
    q: float = 1.0
    residuals: np.ndarray | None = None

    @property
    def k(self) -> int:
        return len(self.energies)

    def overlap(self) -> np.ndarray:
        S = self.states.reshape(self.k, -1)
        return (S.conj() @ S.T) * self.grid.cell_volume

    def orthonormality_error(self) -> float:
        return float(np.abs(self.overlap() - np.eye(self.k)).max())

    def position_matrix(self, axis: int = 0) -> np.ndarray:
        """``X[a, b] = <phi_a| x_axis |phi_b>``."""
        x = self.grid.mesh()[axis].ravel()
        S = self.states.reshape(self.k, -1)
        return (S.conj() * x) @ S.T * self.grid.cell_volume

    def transition_frequencies(self) -> np.ndarray:
        """Distinct positive ``|E_a - E_b| / hbar`` for all level pairs, sorted."""
        E = self.energies
        w = np.abs(E[:, None] - E[None, :])[np.triu_indices(self.k, 1)] / self.hbar
        return np.sort(w)


def bound_spectrum(spec: HamiltonianSpec, k: int = 6, tol: float = 1e-8) -> BoundSpectrum:
    """Lowest ``k`` eigenpairs of ``spec`` from a shift-invert Lanczos solve."""
    H = spec.matrix()
    N = H.shape[0]
    if not 1 <= k < N - 1:
        raise ConfigurationError(f"k must be between 1 and {N - 2}")
    asym = abs(H - H.T).max() if H.nnz else 0.0
    if asym > 1e-12 * max(abs(H).max(), 1.0):
        raise ConfigurationError("discretized Hamiltonian is not Hermitian")
    # Gershgorin lower bound keeps the shift below the whole spectrum
    diag = H.diagonal()
    off = np.asarray(abs(H).sum(axis=1)).ravel() - np.abs(diag)
    sigma = float((diag - off).min()) - 1.0
    try:
        E, v = spla.eigsh(H, k=k, sigma=sigma, which="LM", tol=0.0, v0=np.ones(N))
    except spla.ArpackNoConvergence as exc:
        raise SolverError(f"eigensolver did not converge: {len(exc.eigenvalues)} of {k} pairs found") from exc
    order = np.argsort(E)
    E, v = E[order], v[:, order]
    dV = spec.grid.cell_volume
    res = np.linalg.norm(H @ v - v * E, axis=0)  # unit discrete norm, so this is the L2 residual
    if res.max() >= tol:
        raise SolverError(f"eigenpair residuals {np.array2string(res, precision=2)} exceed {tol:g}")
    # deterministic sign: largest component positive
    idx = np.abs(v).argmax(axis=0)
    v = v * np.sign(v[idx, np.arange(k)])
    states = (v.T / np.sqrt(dV)).reshape(k, *spec.grid.shape)
    return BoundSpectrum(E, states, spec.grid, spec.hbar, spec.mass, spec.q, res)


# ----------------------------------------------------------------- superposition lines
@dataclass
class Line:
    frequency: float
    power: float
    levels: tuple[int, int]  # nearest (upper, lower) level pair
    offset_bins: float  # (frequency - level difference) / bin width


@dataclass
class LineSpectrum:
    lines: list[Line]
    frequencies: np.ndarray
    power: np.ndarray
    bin_width: float
    times: np.ndarray
    dipole: np.ndarray  # q <x>(t) from the level expansion
    current: np.ndarray  # integral of the ensemble current j(t) over the lattice

    @property
    def positions(self) -> np.ndarray:
        return np.array([ln.frequency for ln in self.lines])


def superpose(coeffs: Sequence[complex], spectrum: BoundSpectrum, t: float) -> np.ndarray:
    """Normalized ``sum_a c_a phi_a exp(-i E_a t / hbar)``."""
    c = np.asarray(coeffs, dtype=complex)
    if c.shape != (spectrum.k,):
        raise ConfigurationError(f"need {spectrum.k} coefficients, got {c.shape}")
    nrm = np.linalg.norm(c)
    if nrm == 0:
        raise ConfigurationError("at least one coefficient must be nonzero")
    ph = c / nrm * np.exp(-1j * spectrum.energies * t / spectrum.hbar)
    return np.tensordot(ph, spectrum.states, axes=1)


def ensemble_current(psi: np.ndarray, spectrum: BoundSpectrum, axis: int = 0) -> np.ndarray:
    """Site current ``(q hbar/m) Im(psi* d psi)`` from averaged link currents.

    Link currents ``Im(psi_i* psi_{i+1}) / h`` are the ones the lattice
    Hamiltonian conserves.  Hard walls contribute no link.
    """
    g = spectrum.grid
    h = g.spacing[axis]
    nxt = np.roll(psi, -1, axis)
    link = np.imag(psi.conj() * nxt) / h
    if g.boundary != "periodic":
        idx = [slice(None)] * psi.ndim
        idx[axis] = -1
        link[tuple(idx)] = 0.0
    site = 0.5 * (link + np.roll(link, 1, axis))
    return spectrum.q * spectrum.hbar / spectrum.mass * site


def ensemble_spectrum(
    coeffs: Sequence[complex],
    spectrum: BoundSpectrum,
    duration: float,
    dt: float | None = None,
    axis: int = 0,
    threshold: float = 1e-3,
) -> LineSpectrum:
    """Lines radiated by the dipole of a superposition ensemble.

    The integrated current ``J(t)`` is the dipole velocity.  The line power is
    ``w^2 |FT[hann * J]|^2``, the spectrum of the dipole acceleration.  Peaks
    above ``threshold`` times the strongest one are reported, each with the
    level pair whose difference lies closest.
    """
    c = np.asarray(coeffs, dtype=complex)
    populated = np.flatnonzero(np.abs(c) > 0)
    E = spectrum.energies
    hb = spectrum.hbar
    cand = np.abs(E[populated][:, None] - E[populated][None, :]) / hb
    cand = np.unique(np.round(cand[np.triu_indices(len(populated), 1)], 14))
    wmax = float(cand.max()) if cand.size else 1.0
    if dt is None:
        dt = np.pi / (4.0 * wmax)
    if wmax * dt >= np.pi:
        raise ResolutionError(f"dt={dt:g} aliases the line at {wmax:g}")
    n = int(round(duration / dt))
    bin_w = 2.0 * np.pi / (n * dt)
    gaps = np.diff(np.concatenate([[0.0], cand]))
    # Hann main lobe spans +-2 bins
    if gaps.size and gaps.min() < 4.0 * bin_w:
        raise ResolutionError(
            f"window {duration:g} gives bin {bin_w:.3g}; smallest line gap {gaps.min():.3g} needs >= 4 bins"
        )
    times = dt * np.arange(n)

    J = np.empty(n)
    for i, t in enumerate(times):
        psi = superpose(c, spectrum, t)
        J[i] = ensemble_current(psi, spectrum, axis).sum() * spectrum.grid.cell_volume
    cn = c / np.linalg.norm(c)
    X = spectrum.position_matrix(axis)
    ph = cn[:, None].conj() * cn[None, :] * X
    dE = (E[:, None] - E[None, :]) / hb
    D = spectrum.q * np.real(np.einsum("ab,tab->t", ph, np.exp(1j * dE[None] * times[:, None, None])))

    freqs = 2.0 * np.pi * np.fft.rfftfreq(n, dt)
    P = freqs**2 * np.abs(np.fft.rfft(np.hanning(n) * J)) ** 2

    # stationary ensembles: current is zero to roundoff
    scale = abs(spectrum.q) * np.sqrt(max(float(np.abs(E).max()), 1e-300) / spectrum.mass)
    lines: list[Line] = []
    if np.abs(J).max() > 1e-9 * scale:
        cut = threshold * P.max()
        is_peak = (P[1:-1] > P[:-2]) & (P[1:-1] >= P[2:]) & (P[1:-1] > cut)
        all_pairs = [(a, b) for a in range(spectrum.k) for b in range(a)]
        diffs = np.array([abs(E[a] - E[b]) / hb for a, b in all_pairs])
        for i in np.flatnonzero(is_peak) + 1:
            j = int(np.abs(diffs - freqs[i]).argmin())
            a, b = all_pairs[j]
            up, lo = (a, b) if E[a] >= E[b] else (b, a)
            lines.append(Line(float(freqs[i]), float(P[i]), (up, lo), float((freqs[i] - diffs[j]) / bin_w)))
    return LineSpectrum(lines, freqs, P, bin_w, times, D, J)


# ------------------------------------------------------------------------- pulses
Envelope = Literal["gaussian", "flat"]


@dataclass(frozen=True)
class PulseSpec:
    """``E(t) = amplitude * g(t) * Re[xi(t) exp(i omega (t - t0))]`` along ``axis``.

    ``g`` peaks at ``t0`` (default ``5 * duration``): a Gaussian of rms width
    ``duration``, or a flat top of length ``duration`` with sin^2 ramps.
    ``xi`` is 1 for an infinite coherence length.  Otherwise it is seeded
    complex Gaussian noise with unit mean power and correlation time
    ``coherence_length`` (c = 1).  A short coherence length makes the pulse
    wide-band.
    """

    omega: float
    amplitude: float
    duration: float
    coherence_length: float = np.inf
    envelope: Envelope = "gaussian"
    seed: int = 0
    t0: float | None = None
    axis: int = 0

    def __post_init__(self) -> None:
        if self.amplitude < 0:
            raise ConfigurationError("pulse amplitude must be >= 0")
        if self.duration <= 0 or self.coherence_length <= 0:
            raise ConfigurationError("pulse duration and coherence length must be > 0")
        if self.omega < 0:
            raise ConfigurationError("pulse frequency must be >= 0")
        if self.envelope not in ("gaussian", "flat"):
            raise ConfigurationError(f"unknown envelope {self.envelope!r}")

    @property
    def center(self) -> float:
        return 5.0 * self.duration if self.t0 is None else self.t0

    @property
    def span(self) -> tuple[float, float]:
        return 0.0, 2.0 * self.center

    def envelope_at(self, t: np.ndarray) -> np.ndarray:
        s = np.asarray(t, dtype=float) - self.center
        if self.envelope == "gaussian":
            return np.exp(-0.5 * (s / self.duration) ** 2)
        ramp = 0.1 * self.duration
        half = 0.5 * self.duration
        u = np.clip((half + ramp - np.abs(s)) / ramp, 0.0, 1.0)
        return np.sin(0.5 * np.pi * u) ** 2

    def sample(self, wmax: float, per_period: int = 32) -> tuple[np.ndarray, np.ndarray]:
        """Field on a uniform grid over :attr:`span` resolving ``max(omega, wmax)``."""
        top = max(self.omega, wmax, 1e-12)
        dt = 2.0 * np.pi / (per_period * top)
        if np.isfinite(self.coherence_length):
            dt = min(dt, self.coherence_length / 8.0)
        a, b = self.span
        n = int(np.ceil((b - a) / dt)) + 1
        t = np.linspace(a, b, n)
        xi = self._noise(t)
        carrier = np.real(xi * np.exp(1j * self.omega * (t - self.center)))
        return t, self.amplitude * self.envelope_at(t) * carrier

    def _noise(self, t: np.ndarray) -> np.ndarray:
        if not np.isfinite(self.coherence_length):
            return np.ones_like(t, dtype=complex)
        rng = np.random.default_rng(self.seed)
        dt = t[1] - t[0]
        white = rng.standard_normal(t.size) + 1j * rng.standard_normal(t.size)
        # periodic Gaussian filter applied in Fourier space, so any width costs the same
        k = 2 * np.pi * np.fft.fftfreq(t.size, d=dt)
        gain = np.exp(-0.5 * (k * self.coherence_length) ** 2)
        xi = np.fft.ifft(np.fft.fft(white) * gain)
        # E|xi|^2 = 2 * sum(kernel^2) = 2 * mean(gain^2) by Parseval
        return xi / np.sqrt(2.0 * np.mean(gain**2))


@dataclass
class TransitionTable:
    initial: int
    probabilities: np.ndarray  # |c_f|^2 for every level, initial included
    energies: np.ndarray
    method: str
    valid: bool  # first-order validity: no off-initial probability above 0.1
    population_change: float  # max |P_after - P_before| over levels

    def ionization(self, threshold: float) -> float:
        return float(self.probabilities[self.energies > threshold].sum())


def _validity(P: np.ndarray, initial: int) -> bool:
    others = np.delete(P, initial)
    return bool(others.max(initial=0.0) <= 0.1)


def transition_probability(
    initial: int,
    pulse: PulseSpec,
    spectrum: BoundSpectrum,
    method: Literal["first_order", "exact"] = "first_order",
) -> TransitionTable:
    """Level populations after ``pulse`` for a particle starting in level ``initial``.

    The coupling is ``-q E(t) x_axis``.  ``first_order`` gives
    ``c_f = (i q / hbar) X_fi * integral E(t) exp(i w_fi t) dt`` for f != i,
    with ``P_i = 1 - sum_f P_f``.  ``exact`` integrates the Schrodinger
    equation in the ``k``-level basis with the exponential midpoint rule on
    the pulse sampling grid.
    """
    k = spectrum.k
    if not 0 <= initial < k:
        raise ConfigurationError(f"initial level {initial} outside 0..{k - 1}")
    E, hb, q = spectrum.energies, spectrum.hbar, spectrum.q
    X = spectrum.position_matrix(pulse.axis).real
    w = (E - E[initial]) / hb
    t, field_t = pulse.sample(float(np.abs(w).max()))

    if method == "first_order":
        integral = np.trapezoid(field_t[None, :] * np.exp(1j * w[:, None] * t[None, :]), t, axis=1)
        c = 1j * q / hb * X[:, initial] * integral
        P = np.abs(c) ** 2
        P[initial] = 0.0
        P[initial] = 1.0 - P.sum()
    elif method == "exact":
        # exponential midpoint rule for H(t) = diag(E) - q E(t) X in the level basis
        mid = 0.5 * (field_t[1:] + field_t[:-1])
        steps = np.diff(t)
        y = np.zeros(k, dtype=complex)
        y[initial] = 1.0
        for lo in range(0, mid.size, 1024):
            f, dt = mid[lo:lo + 1024], steps[lo:lo + 1024]
            lam, V = np.linalg.eigh(np.diag(E)[None] - q * f[:, None, None] * X[None])
            U = (V * np.exp(-1j * lam * dt[:, None] / hb)[:, None, :]) @ V.transpose(0, 2, 1)
            for Un in U:
                y = Un @ y
        P = np.abs(y) ** 2
    else:
        raise ConfigurationError(f"unknown method {method!r}")
    before = np.zeros(k)
    before[initial] = 1.0
    return TransitionTable(initial, P, E.copy(), method, _validity(P, initial), float(np.abs(P - before).max()))


def amplitude_law(
    initial: int,
    pulse: PulseSpec,
    spectrum: BoundSpectrum,
    amplitudes: Sequence[float],
    threshold: float,
    method: Literal["first_order", "exact"] = "exact",
) -> tuple[float, np.ndarray]:
    """Log-log slope of the population above ``threshold`` against pulse amplitude."""
    amps = np.asarray(amplitudes, dtype=float)
    if amps.size < 2 or np.any(amps <= 0):
        raise ConfigurationError("need at least two positive amplitudes")
    P = np.array([
        transition_probability(initial, _with_amplitude(pulse, a), spectrum, method).ionization(threshold)
        for a in amps
    ])
    if np.any(P <= 0):
        raise ConfigurationError("no population reaches the threshold; cannot fit a power law")
    slope = np.polyfit(np.log(amps), np.log(P), 1)[0]
    return float(slope), P


def _with_amplitude(pulse: PulseSpec, a: float) -> PulseSpec:
    return replace(pulse, amplitude=float(a))
