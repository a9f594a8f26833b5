"""Two-particle spin-correlation experiment with Stern-Gerlach analyzers and CHSH statistics.

Each particle carries one coordinate.  A spin singlet pair is prepared in the
exchange-symmetric spatial ground state of a smooth double well (one well per
analyzer) with softened Coulomb repulsion.  After the trap is switched off each
particle's spin frame is rotated by the angle of the analyzer on its side
(``theta_a`` for x < 0, ``theta_b`` for x > 0) and a sigma_z gradient splits
it into two lobes.  Outcomes are the side of each lobe relative to its
analyzer's free-flight centre.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla
from scipy import ndimage

from .grid import ConfigurationError, SpacetimeGrid
from .manybody import (
    PAULI,
    ExternalFields,
    ManyBodyState,
    ManyBodySystem,
    ParticleSpec,
    symmetry_deviation,
)

Mode = Literal["distinguishable", "identical_antisymmetric"]
SINGLET = np.array([0.0, 1.0, -1.0, 0.0]) / np.sqrt(2.0)
PAULI_X, PAULI_Z = PAULI[0], PAULI[2]
CHSH_ANGLES = (0.0, np.pi / 2, np.pi / 4, 3 * np.pi / 4)  # a, a', b, b'
TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class BellConfig:
    theta_a: float = 0.0
    theta_b: float = np.pi / 4
    gradient: float = 0.5  # b; the force on a spin-up particle is -g b
    release_time: float = 0.0  # free flight between switching the trap off and the analyzers
    analyzer_time: float = 6.0
    mode: Mode = "identical_antisymmetric"
    n_samples: int = 10_000
    seed: int = 0
    n: int = 256
    length: float = 76.8
    trap_points: int = 224  # ground state is solved on this central window, then embedded
    trap_omega: float = 0.154
    well_offset: float = 19.2  # the two trap minima sit at +-well_offset, one per analyzer
    coulomb: float = 2.0  # q^2 of the pair; the pair energy is coulomb / (4 pi r)
    softening: float = 0.5
    g: float = 1.0
    dt: float = 0.05

    def __post_init__(self) -> None:
        for th in (self.theta_a, self.theta_b):
            if not 0.0 <= th < TWO_PI:
                raise ConfigurationError(f"analyzer angles must lie in [0, 2 pi), got {th}")
        if not self.gradient > 0:
            raise ConfigurationError("gradient strength must be positive")
        if self.n_samples < 1:
            raise ConfigurationError("n_samples must be at least 1")
        if self.mode not in ("distinguishable", "identical_antisymmetric"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")

    def with_angles(self, a: float, b: float) -> "BellConfig":
        return replace(self, theta_a=float(a) % TWO_PI, theta_b=float(b) % TWO_PI)

    def grid(self) -> SpacetimeGrid:
        return SpacetimeGrid.uniform(1, self.n, self.length, time_step=self.dt)


def trap_potential(cfg: BellConfig, x: np.ndarray) -> np.ndarray:
    """Smooth double well ``omega^2 (sqrt(x^2 + 1) - x0)^2 / 2`` (energy, not potential)."""
    return 0.5 * cfg.trap_omega ** 2 * (np.sqrt(x ** 2 + 1.0) - cfg.well_offset) ** 2


def _system(cfg: BellConfig, trapped: bool) -> ManyBodySystem:
    q = np.sqrt(cfg.coulomb)
    parts = [ParticleSpec(q=q, m=1.0, g=cfg.g)] * 2
    if not trapped:
        return ManyBodySystem(cfg.grid(), parts, softening=cfg.softening)
    if (cfg.n - cfg.trap_points) % 2 or cfg.trap_points > cfg.n:
        raise ConfigurationError("trap_points must not exceed n and must have the same parity")
    h = cfg.length / cfg.n
    g = SpacetimeGrid(1, (cfg.trap_points,), (h,), time_step=cfg.dt)
    ext = ExternalFields(scalar=lambda x: trap_potential(cfg, x) / q)
    return ManyBodySystem(g, parts, ext, softening=cfg.softening)


_GROUND_CACHE: dict = {}


def _trap_key(cfg: BellConfig) -> tuple:
    return (cfg.n, cfg.length, cfg.trap_points, cfg.trap_omega, cfg.well_offset, cfg.coulomb, cfg.softening)


def _symmetric_ground_state(sysm: ManyBodySystem) -> tuple[np.ndarray, np.ndarray]:
    """Two lowest spatial eigenpairs within the exchange-symmetric sector.

    The antisymmetric sector is lifted by a penalty, so near-degenerate
    tunnelling partners of the other sector do not interfere.
    """
    n = sysm.grid.shape[0]
    Nc = n * n
    H = sysm.hamiltonian_matrix[:Nc, :Nc]
    idx = np.arange(Nc).reshape(n, n)
    P = sps.csr_matrix((np.ones(Nc), (idx.ravel(), idx.T.ravel())), shape=(Nc, Nc))
    span = float(np.abs(sysm.diagonal_potential).max()) + 4.0 * sysm.hbar ** 2 / sysm.grid.spacing[0] ** 2
    Hp = H + 0.5 * span * (sps.identity(Nc) - P)
    sigma = float(sysm.diagonal_potential.min()) - 1.0
    vals, vecs = spla.eigsh(Hp, k=2, sigma=sigma, which="LM")
    order = np.argsort(vals)
    return vals[order], vecs[:, order].T.reshape(2, n, n)


def prepare_singlet(cfg: BellConfig, spin: Sequence[complex] | None = None) -> ManyBodyState:
    """Spin state (singlet by default) times the symmetric spatial ground state of the trap.

    In ``distinguishable`` mode the spatial factor is cut to ``x1 < x2``
    (particle 1 in the left well), which removes the exchange copy.
    """
    key = _trap_key(cfg)
    if key not in _GROUND_CACHE:
        _GROUND_CACHE.clear()
        _GROUND_CACHE[key] = _symmetric_ground_state(_system(cfg, trapped=True))
    E, f_all = _GROUND_CACHE[key]
    if abs(E[1] - E[0]) < 1e-6 * max(abs(E[0]), 1.0):
        raise ConfigurationError(f"symmetric trap ground state is degenerate (E0 = {E[0]:.8g}, E1 = {E[1]:.8g})")
    f_trap = f_all[0].astype(complex)
    f_trap = f_trap / np.exp(1j * np.angle(f_trap.flat[np.argmax(np.abs(f_trap))]))
    edge = float(max(np.abs(f_trap[0]).max(), np.abs(f_trap[:, 0]).max()) / np.abs(f_trap).max())
    if edge > 1e-6:
        raise ConfigurationError(f"trap window too small: ground state reaches {edge:.1e} of its peak at the edge")
    o = (cfg.n - cfg.trap_points) // 2
    f = np.zeros((cfg.n, cfg.n), dtype=complex)
    f[o:o + cfg.trap_points, o:o + cfg.trap_points] = f_trap
    sysm = _system(cfg, trapped=False)
    chi = SINGLET if spin is None else np.asarray(spin, dtype=complex)
    chi = chi / np.linalg.norm(chi)
    if cfg.mode == "distinguishable":
        x = sysm.grid.axis(0)
        f = np.where(x[:, None] < x[None, :], f, 0.0)
    phi = chi.reshape(4, 1, 1) * f
    st = ManyBodyState(phi, sysm).normalized()
    st.meta["trap_energy"] = float(E[0])
    st.meta["trap_gap"] = float(E[1] - E[0])
    if cfg.mode == "identical_antisymmetric" and spin is None:
        st.symmetry = "antisymmetric"
    return st


def total_spin_squared(state: ManyBodyState) -> float:
    """``<S^2>`` (units of hbar^2) of a two-particle state."""
    from .manybody import _spin_op

    S = [0.5 * (_spin_op(2, 0, PAULI[k]) + _spin_op(2, 1, PAULI[k])) for k in range(3)]
    S2 = sum(s @ s for s in S)
    flat = state.phi.reshape(4, -1)
    rho_spin = flat @ flat.conj().T * state.system.volume_element
    return float(np.real(np.trace(S2 @ rho_spin)))


def reduced_spin(state: ManyBodyState, a: int = 0) -> np.ndarray:
    """Bloch vector of particle ``a``'s reduced spin density matrix."""
    phi = state.phi.reshape(2, 2, -1)
    if a == 1:
        phi = phi.transpose(1, 0, 2)
    flat = phi.reshape(2, -1)
    r = flat @ flat.conj().T * state.system.volume_element
    return np.real([np.trace(r @ P) for P in PAULI])


def _spin_bits(n: int = 2) -> np.ndarray:
    """``s[c, a]`` = +1 (up) or -1 (down) of particle ``a`` in spin component ``c``."""
    return np.array([[1 - 2 * ((c >> (n - 1 - a)) & 1) for a in range(n)] for c in range(2 ** n)])


def _flight(phi: np.ndarray, sysm: ManyBodySystem, duration: float, dt: float, extra: np.ndarray | None
            ) -> np.ndarray:
    """Strang split-operator steps with pair potential plus an optional spin-diagonal term."""
    n = max(1, int(round(duration / dt)))
    h = duration / n
    V = sysm.pair_potential[None] if extra is None else sysm.pair_potential[None] + extra
    half = np.exp(-0.5j * h * V / sysm.hbar)
    kin = np.exp(-1j * h * sysm.kinetic_symbol / sysm.hbar)
    for _ in range(n):
        phi = half * phi
        phi = np.fft.ifft2(np.fft.fft2(phi, axes=(1, 2)) * kin, axes=(1, 2))
        phi = half * phi
    return phi


def release(state: ManyBodyState, cfg: BellConfig) -> ManyBodyState:
    """Switch the trap off and fly freely (pair force only) for ``release_time``."""
    sysm = state.system
    phi = _flight(state.phi, sysm, cfg.release_time, cfg.dt, None) if cfg.release_time > 0 else state.phi
    out = ManyBodyState(phi, sysm, state.t + cfg.release_time, "none", dict(state.meta))
    out.symmetry = state.symmetry
    return out


def analyzer_rotation(theta: float) -> np.ndarray:
    """``U`` with ``U^dag sigma_z U = sin(theta) sigma_x + cos(theta) sigma_z``."""
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array([[c, s], [-s, c]], dtype=complex)


@dataclass
class AnalyzerResult:
    state: ManyBodyState
    rho: np.ndarray  # joint density (N, N)
    centers: tuple[float, float]  # free-flight centres of the left (A) and right (B) lobes
    widths: tuple[float, float]
    separation: float  # lobe separation in units of lobe width (minimum over sides)
    inconclusive: bool
    leaked: float  # density left near x = 0 when the analyzers act
    config: BellConfig


def _side_stats(rho1: np.ndarray, x: np.ndarray, h: float, side: int) -> tuple[float, float]:
    m = (x < 0) if side == 0 else (x > 0)
    w = rho1[m]
    c = float(np.sum(w * x[m]) / np.sum(w))
    return c, float(np.sqrt(np.sum(w * (x[m] - c) ** 2) / np.sum(w)))


def run_analyzers(state: ManyBodyState, cfg: BellConfig, released: bool = False) -> AnalyzerResult:
    """Rotate each side's spin frame, apply the sigma_z gradient and evolve until the lobes separate."""
    if not released:
        state = release(state, cfg)
    sysm = state.system
    x = sysm.grid.axis(0)
    h = sysm.grid.spacing[0]
    rho0 = np.sum(np.abs(state.phi) ** 2, axis=0)
    near = np.abs(x) < 4 * h
    leaked = float((np.sum(rho0[near, :]) + np.sum(rho0[:, near])) * sysm.volume_element)
    UA, UB = analyzer_rotation(cfg.theta_a), analyzer_rotation(cfg.theta_b)
    # per-coordinate 2x2 rotation, chosen by the side the coordinate is on
    U = np.where((x < 0)[:, None, None], UA[None], UB[None])  # (N, 2, 2)
    phi = state.phi.reshape(2, 2, *state.phi.shape[1:])
    phi = np.einsum("xij,jkxy->ikxy", U, phi)
    phi = np.einsum("ykl,ilxy->ikxy", U, phi)
    phi = phi.reshape(state.phi.shape)
    bits = _spin_bits()
    gb = cfg.g * cfg.gradient
    extra = gb * (bits[:, 0, None, None] * x[None, :, None] + bits[:, 1, None, None] * x[None, None, :])
    phi = _flight(phi, sysm, cfg.analyzer_time, cfg.dt, extra)
    out = ManyBodyState(phi, sysm, state.t + cfg.analyzer_time, "none", dict(state.meta))
    out.symmetry = state.symmetry
    rho = np.sum(np.abs(phi) ** 2, axis=0)
    # the spin rotation commutes with the gradient-free flight, so the reference is angle independent
    key = ("free_reference", cfg.analyzer_time, cfg.dt)
    if key not in state.meta:
        rho_free = np.sum(np.abs(_flight(state.phi, sysm, cfg.analyzer_time, cfg.dt, None)) ** 2, axis=0)
        r1 = np.sum(rho_free, axis=1) * h + np.sum(rho_free, axis=0) * h
        state.meta[key] = (_side_stats(r1, x, h, 0), _side_stats(r1, x, h, 1))
    (cA, wA), (cB, wB) = state.meta[key]
    shift = abs(gb) * cfg.analyzer_time ** 2  # lobe separation 2 * (F t^2 / 2m)
    sep = shift / max(wA, wB)
    return AnalyzerResult(out, rho, (cA, cB), (wA, wB), sep, sep < 4.0, leaked, cfg)


@dataclass
class Peak:
    center: tuple[float, float]
    integral: float
    outcome: tuple[int, int]  # (outcome at A, outcome at B)


@dataclass
class OutcomeTable:
    counts: dict  # {"++": n, "+-": n, "-+": n, "--": n}
    probabilities: dict
    E: float
    peaks: list[Peak]
    discarded: float
    inconclusive: bool
    meta: dict = field(default_factory=dict)

    @property
    def n_peaks(self) -> int:
        return len(self.peaks)

    @property
    def n(self) -> int:
        return int(sum(self.counts.values()))


def _outcome_sign(x: np.ndarray, centers: tuple[float, float], gb: float) -> np.ndarray:
    c = np.where(x < 0, centers[0], centers[1])
    # spin up is pushed along -sign(g b)
    return np.where(np.sign(-gb) * (x - c) > 0, 1, -1)


def find_peaks(rho: np.ndarray, x: np.ndarray, h: float, threshold: float = 0.01) -> list[tuple]:
    """Connected regions above ``threshold * max`` as ``(centre, integral)`` pairs."""
    lab, n = ndimage.label(rho > threshold * rho.max())
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    out = []
    for k in range(1, n + 1):
        m = lab == k
        w = rho[m]
        c = (float(np.sum(w * X1[m]) / w.sum()), float(np.sum(w * X2[m]) / w.sum()))
        out.append((c, float(w.sum() * h * h)))
    return out


def correlation(result: AnalyzerResult, sampled: bool = False) -> OutcomeTable:
    """Outcome statistics from the separated joint density.

    Probabilities integrate the density over the four sign sectors of the
    (analyzer, analyzer) assignment; points within one grid spacing of an
    analyzer centre are discarded as ties.  With ``sampled`` the counts are
    a seeded multinomial draw of ``n_samples`` outcomes, otherwise the
    expected counts are rounded from the exact probabilities.
    """
    cfg = result.config
    sysm = result.state.system
    x = sysm.grid.axis(0)
    h = sysm.grid.spacing[0]
    gb = cfg.g * cfg.gradient
    sgn = _outcome_sign(x, result.centers, gb)
    c = np.where(x < 0, result.centers[0], result.centers[1])
    tie = np.abs(x - c) < h
    rho = result.rho * h * h
    # particle sitting at A (x < 0) and at B (x > 0); identical mode counts both orderings
    left = x < 0
    P = {}
    for sa in (1, -1):
        for sb in (1, -1):
            okA = (sgn == sa) & left & ~tie
            okB = (sgn == sb) & ~left & ~tie
            p = np.sum(rho[np.ix_(okA, okB)]) + np.sum(rho[np.ix_(okB, okA)])
            P[("+" if sa > 0 else "-") + ("+" if sb > 0 else "-")] = float(p)
    total = sum(P.values())
    discarded = float(1.0 - total)
    probs = {k: v / total for k, v in P.items()}
    E = probs["++"] + probs["--"] - probs["+-"] - probs["-+"]
    if sampled:
        rng = np.random.default_rng(cfg.seed)
        keys = ["++", "+-", "-+", "--"]
        draw = rng.multinomial(cfg.n_samples, [probs[k] for k in keys])
        counts = {k: int(v) for k, v in zip(keys, draw)}
        E = (counts["++"] + counts["--"] - counts["+-"] - counts["-+"]) / cfg.n_samples
    else:
        counts = _round_counts(probs, cfg.n_samples)
    peaks = []
    for centre, integral in find_peaks(result.rho, x, h):
        a_idx = 0 if centre[0] < 0 else 1
        xa, xb = (centre[0], centre[1]) if a_idx == 0 else (centre[1], centre[0])
        oa = int(_outcome_sign(np.array([xa]), result.centers, gb)[0])
        ob = int(_outcome_sign(np.array([xb]), result.centers, gb)[0])
        peaks.append(Peak(centre, integral, (oa, ob)))
    peaks.sort(key=lambda p: (p.center[0], p.center[1]))
    return OutcomeTable(counts, probs, float(E), peaks, discarded, result.inconclusive,
                        {"separation": result.separation, "leaked": result.leaked, "seed": cfg.seed})


def _round_counts(probs: dict, n: int) -> dict:
    """Largest-remainder rounding so the counts sum to ``n``."""
    keys = list(probs)
    raw = np.array([probs[k] * n for k in keys])
    base = np.floor(raw).astype(int)
    order = np.argsort(-(raw - base), kind="stable")
    base[order[: n - base.sum()]] += 1
    return {k: int(b) for k, b in zip(keys, base)}


def swap_pairs(peaks: Sequence[Peak], tol: float) -> list[tuple[Peak, Peak]]:
    """Pairs of peaks related by exchanging the two coordinates."""
    pairs = []
    used = set()
    for i, p in enumerate(peaks):
        for k, q in enumerate(peaks):
            if k <= i or k in used or i in used:
                continue
            if abs(p.center[0] - q.center[1]) < tol and abs(p.center[1] - q.center[0]) < tol:
                pairs.append((p, q))
                used.update((i, k))
    return pairs


def chsh_value(E_ab: float, E_abp: float, E_apb: float, E_apbp: float) -> float:
    return abs(E_ab - E_abp + E_apb + E_apbp)


@dataclass
class CHSHResult:
    S: float
    tables: dict  # {(theta_a, theta_b): OutcomeTable}
    angles: tuple


def chsh(cfg: BellConfig, angles: Sequence[float] = CHSH_ANGLES, spin: Sequence[complex] | None = None,
         sampled: bool = False) -> CHSHResult:
    """``S = |E(a,b) - E(a,b') + E(a',b) + E(a',b')|`` from four analyzer runs sharing one release."""
    a, ap, b, bp = angles
    flown = release(prepare_singlet(cfg, spin), cfg)
    tables = {}
    for ta, tb in ((a, b), (a, bp), (ap, b), (ap, bp)):
        c = cfg.with_angles(ta, tb)
        tables[(ta, tb)] = correlation(run_analyzers(flown, c, released=True), sampled)
    S = chsh_value(tables[(a, b)].E, tables[(a, bp)].E, tables[(ap, b)].E, tables[(ap, bp)].E)
    return CHSHResult(float(S), tables, tuple(angles))


def angle_sweep(cfg: BellConfig, deltas: Sequence[float], spin: Sequence[complex] | None = None
                ) -> list[tuple[float, OutcomeTable]]:
    """``E`` against ``delta = theta_b - theta_a`` with ``theta_a`` fixed, one shared release."""
    flown = release(prepare_singlet(cfg, spin), cfg)
    return [(float(d), correlation(run_analyzers(flown, cfg.with_angles(cfg.theta_a, cfg.theta_a + d),
                                                 released=True))) for d in deltas]


def local_table_chsh(outcomes_a: Sequence[Sequence[int]], outcomes_b: Sequence[Sequence[int]]) -> float:
    """CHSH value of a deterministic local table: row ``k`` gives (A(a), A(a')) and (B(b), B(b'))."""
    A = np.asarray(outcomes_a, dtype=float)
    B = np.asarray(outcomes_b, dtype=float)
    E = lambda i, j: float(np.mean(A[:, i] * B[:, j]))  # noqa: E731
    return chsh_value(E(0, 0), E(0, 1), E(1, 0), E(1, 1))


def singlet_marginal_check(state: ManyBodyState) -> dict:
    """Exchange antisymmetry, ``<S^2>`` and Bloch-vector norms of a prepared pair."""
    return {
        "antisymmetry": symmetry_deviation(state, "antisymmetric"),
        "S2": total_spin_squared(state),
        "bloch": [float(np.linalg.norm(reduced_spin(state, a))) for a in range(2)],
    }
