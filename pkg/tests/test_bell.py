from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ensemble_tenets.bell import (
    PAULI_X,
    PAULI_Z,
    BellConfig,
    analyzer_rotation,
    angle_sweep,
    chsh,
    correlation,
    local_table_chsh,
    prepare_singlet,
    release,
    run_analyzers,
    singlet_marginal_check,
    swap_pairs,
)
from ensemble_tenets.grid import ConfigurationError

CFG = BellConfig()


@pytest.fixture(scope="module")
def flown():
    return release(prepare_singlet(CFG), CFG)


@pytest.fixture(scope="module")
def sweep():
    return angle_sweep(CFG, [k * np.pi / 8 for k in range(8)])


def test_config_validation():
    with pytest.raises(ConfigurationError):
        BellConfig(theta_a=7.0)
    with pytest.raises(ConfigurationError):
        BellConfig(gradient=0.0)
    with pytest.raises(ConfigurationError):
        BellConfig(n_samples=0)
    assert CFG.with_angles(-np.pi / 2, 2 * np.pi).theta_a == pytest.approx(1.5 * np.pi)


@pytest.mark.parametrize("theta", [0.0, 0.3, np.pi / 2, 2.5])
def test_analyzer_rotation_measures_along_axis(theta):
    U = analyzer_rotation(theta)
    assert np.allclose(U.conj().T @ U, np.eye(2))
    assert np.allclose(U.conj().T @ PAULI_Z @ U, np.sin(theta) * PAULI_X + np.cos(theta) * PAULI_Z)


def test_singlet_preparation():
    s = prepare_singlet(CFG)
    chk = singlet_marginal_check(s)
    assert abs(chk["S2"]) < 1e-10
    assert chk["antisymmetry"] < 1e-12
    assert max(chk["bloch"]) < 1e-8
    assert s.meta["trap_gap"] > 0


def test_equal_angles_anticorrelated(sweep):
    tab = sweep[0][1]
    assert tab.probabilities["++"] + tab.probabilities["--"] < 0.01
    assert tab.E == pytest.approx(-1.0, abs=0.02)


def test_correlation_follows_cosine_at_eight_angles(sweep):
    for d, tab in sweep:
        assert tab.E == pytest.approx(-np.cos(d), abs=0.02), d
        assert not tab.inconclusive
        P = tab.probabilities
        assert P["+-"] == pytest.approx(np.cos(d / 2) ** 2 / 2, abs=0.01)
        assert P["++"] == pytest.approx(np.sin(d / 2) ** 2 / 2, abs=0.01)
        # no signalling: each side alone is 50/50
        assert P["++"] + P["+-"] == pytest.approx(0.5, abs=1e-3)
        assert P["++"] + P["-+"] == pytest.approx(0.5, abs=1e-3)
        assert tab.n == CFG.n_samples


def test_correlation_depends_only_on_difference(flown, sweep):
    c = CFG.with_angles(np.pi / 3, np.pi / 3 + np.pi / 4)
    E = correlation(run_analyzers(flown, c, released=True)).E
    assert E == pytest.approx(sweep[2][1].E, abs=1e-3)


def test_eight_peaks_and_swap_pairs(sweep):
    # every outcome pair is populated for 0 < delta < pi
    for d, tab in sweep[1:]:
        assert tab.n_peaks == 8, (d, tab.n_peaks)
        pairs = swap_pairs(tab.peaks, tol=0.5)
        assert len(pairs) == 4
        for p, q in pairs:
            assert abs(p.integral - q.integral) < 1e-6
            assert p.outcome == q.outcome


def test_distinguishable_four_peaks():
    d = replace(CFG, mode="distinguishable")
    tab = correlation(run_analyzers(prepare_singlet(d), d.with_angles(0.0, np.pi / 4)))
    assert tab.n_peaks == 4
    assert tab.E == pytest.approx(-np.sqrt(0.5), abs=0.02)


def test_chsh_violation_and_product_control():
    r = chsh(CFG)
    assert r.S == pytest.approx(2 * np.sqrt(2), abs=0.1)
    prod = chsh(replace(CFG, mode="distinguishable"), spin=[0, 1, 0, 0])
    assert prod.S <= 2.05


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([-1, 1]), st.sampled_from([-1, 1]),
                          st.sampled_from([-1, 1]), st.sampled_from([-1, 1])), min_size=1, max_size=40))
def test_local_tables_obey_bound(rows):
    A = [r[:2] for r in rows]
    B = [r[2:] for r in rows]
    assert local_table_chsh(A, B) <= 2.0 + 1e-12


def test_monte_carlo_counts(flown):
    c = CFG.with_angles(0.0, np.pi / 4)
    res = run_analyzers(flown, c, released=True)
    exact = correlation(res)
    a = correlation(res, sampled=True)
    b = correlation(res, sampled=True)
    assert a.counts == b.counts
    assert a.n == c.n_samples
    for k, p in exact.probabilities.items():
        se = np.sqrt(p * (1 - p) / c.n_samples)
        assert abs(a.counts[k] / c.n_samples - p) < 4 * se
    se_E = np.sqrt((1 - exact.E ** 2) / c.n_samples)
    assert abs(a.E - exact.E) < 4 * se_E
    other = correlation(run_analyzers(flown, replace(c, seed=1), released=True), sampled=True)
    assert other.counts != a.counts


def test_short_flight_is_inconclusive(flown):
    c = replace(CFG, analyzer_time=1.0)
    res = run_analyzers(flown, c, released=True)
    assert res.inconclusive
    assert correlation(res).inconclusive
