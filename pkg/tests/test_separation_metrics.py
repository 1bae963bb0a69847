import math

import numpy as np
import pytest
from scipy.stats import wilcoxon as scipy_wilcoxon

from mbrsep.separation_metrics import (DB_CAP, BssResult, MetricError, bonferroni, bss_decompose, bss_eval,
                                       wilcoxon_signed_rank)

from oracles import brute_force_wilcoxon_p


def _delay_matrix(refs, filter_len):
    """Explicit (n + L - 1) x (nsrc * L) matrix whose columns are delayed references."""
    nsrc, n = refs.shape
    cols = []
    for r in refs:
        for k in range(filter_len):
            c = np.zeros(n + filter_len - 1)
            c[k:k + n] = r
            cols.append(c)
    return np.stack(cols, axis=1)


def _lstsq_projection(refs, signal, filter_len):
    a = _delay_matrix(refs, filter_len)
    coef, *_ = np.linalg.lstsq(a, signal, rcond=None)
    return a @ coef


def _orthonormal_pair(n, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((n, 2)))
    return q[:, 0], q[:, 1]


@pytest.mark.parametrize("filter_len", [1, 3, 8])
def test_components_match_explicit_least_squares(filter_len):
    rng = np.random.default_rng(filter_len)
    refs = rng.standard_normal((2, 200))
    est = 0.8 * refs[0] + 0.3 * np.roll(refs[1], 2) + 0.1 * rng.standard_normal(200)
    d = bss_decompose(est, refs, 0, filter_len)
    padded = np.concatenate([est, np.zeros(filter_len - 1)])
    s_target = _lstsq_projection(refs[:1], padded, filter_len)
    p_all = _lstsq_projection(refs, padded, filter_len)
    np.testing.assert_allclose(d.s_target, s_target, atol=1e-10)
    np.testing.assert_allclose(d.e_interf, p_all - s_target, atol=1e-10)
    np.testing.assert_allclose(d.e_artif, padded - p_all, atol=1e-10)


def test_decomposition_identity_and_orthogonality():
    rng = np.random.default_rng(7)
    refs = rng.standard_normal((2, 2000))
    est = refs[0] + 0.5 * refs[1] + 0.3 * rng.standard_normal(2000)
    d = bss_decompose(est, refs, 0, filter_len=16)
    padded = np.concatenate([est, np.zeros(15)])
    total = d.s_target + d.e_interf + d.e_artif
    assert np.linalg.norm(total - padded) <= 1e-10 * np.linalg.norm(padded)
    parts = (d.s_target, d.e_interf, d.e_artif)
    for i in range(3):
        for j in range(i + 1, 3):
            inner = abs(np.dot(parts[i], parts[j]))
            assert inner < 1e-8 * np.linalg.norm(parts[i]) * np.linalg.norm(parts[j])


def test_perfect_estimate_is_infinite():
    rng = np.random.default_rng(0)
    refs = rng.standard_normal((2, 4000))
    r = bss_eval(refs[0], refs, 0, filter_len=32)
    assert r.sdr == r.sir == r.sar == math.inf
    sdr, sir, sar, capped = r.capped()
    assert (sdr, sir, sar, capped) == (DB_CAP, DB_CAP, DB_CAP, True)


@pytest.mark.parametrize("gain", [-3.0, 0.01, 1.0, 250.0])
def test_scaled_target_stays_infinite(gain):
    rng = np.random.default_rng(1)
    refs = rng.standard_normal((2, 3000))
    assert bss_eval(gain * refs[0], refs, 0, filter_len=8).sdr == math.inf


def test_orthonormal_interference_case():
    s1, s2 = _orthonormal_pair(1000, 2)
    d = bss_decompose(s1 + 0.5 * s2, np.stack([s1, s2]), 0, filter_len=1)
    np.testing.assert_allclose(d.s_target, s1, atol=1e-12)
    np.testing.assert_allclose(d.e_interf, 0.5 * s2, atol=1e-12)
    assert np.abs(d.e_artif).max() < 1e-12
    r = bss_eval(s1 + 0.5 * s2, np.stack([s1, s2]), 0, filter_len=1)
    expected = 10 * math.log10(1 / 0.25)
    assert r.sdr == pytest.approx(expected, abs=1e-9) and r.sir == pytest.approx(expected, abs=1e-9)
    assert r.sar == math.inf


def test_orthogonalized_noise_gives_sar_equal_sdr():
    rng = np.random.default_rng(3)
    refs = rng.standard_normal((2, 500))
    noise = rng.standard_normal(500)
    q, _ = np.linalg.qr(refs.T)
    noise -= q @ (q.T @ noise)
    noise *= 0.3 * np.linalg.norm(refs[0]) / np.linalg.norm(noise)
    r = bss_eval(refs[0] + noise, refs, 0, filter_len=1)
    assert r.sir == math.inf
    assert r.sar == pytest.approx(r.sdr, abs=1e-9)
    assert r.sdr == pytest.approx(10 * math.log10(1 / 0.09), abs=1e-6)


def test_sir_unchanged_by_positive_scaling():
    rng = np.random.default_rng(4)
    refs = rng.standard_normal((2, 1500))
    est = refs[0] + 0.4 * refs[1] + 0.2 * rng.standard_normal(1500)
    a = bss_eval(est, refs, 0, filter_len=4)
    b = bss_eval(3.5 * est, refs, 0, filter_len=4)
    assert b.sir == pytest.approx(a.sir, abs=1e-9)
    assert b.sdr == pytest.approx(a.sdr, abs=1e-9) and b.sar == pytest.approx(a.sar, abs=1e-9)


def test_delayed_target_is_absorbed_by_filter():
    rng = np.random.default_rng(5)
    refs = rng.standard_normal((2, 2000))
    refs[0, -3:] = 0  # so the delay loses nothing off the end
    delayed = np.concatenate([np.zeros(3), refs[0][:-3]])
    assert bss_eval(delayed, refs, 0, filter_len=8).sdr > 40
    assert bss_eval(delayed, refs, 0, filter_len=1).sdr < 10


def test_filter_longer_than_signal_is_accepted():
    rng = np.random.default_rng(6)
    refs = rng.standard_normal((2, 40))
    r = bss_eval(refs[0] + 0.1 * refs[1], refs, 0, filter_len=64)
    assert isinstance(r, BssResult)


def test_errors():
    rng = np.random.default_rng(0)
    refs = rng.standard_normal((2, 100))
    with pytest.raises(MetricError, match="samples"):
        bss_eval(refs[0][:50], refs)
    with pytest.raises(MetricError, match="all zeros"):
        bss_eval(refs[0], np.stack([refs[0], np.zeros(100)]), filter_len=4)
    with pytest.raises(MetricError, match="filter_len"):
        bss_eval(refs[0], refs, filter_len=0)
    s1, s2 = _orthonormal_pair(100, 1)
    with pytest.raises(MetricError, match="zero target"):
        bss_eval(s2, np.stack([s1, s2]), 0, filter_len=1)


@pytest.mark.parametrize("n,expected", [(5, 0.0625), (6, 0.03125)])
def test_wilcoxon_all_positive_enumeration(n, expected):
    rep = wilcoxon_signed_rank(np.linspace(1, 2, n) + 1, np.ones(n))
    p_enum, _ = brute_force_wilcoxon_p(np.linspace(1, 2, n))
    assert p_enum == pytest.approx(expected, abs=1e-15)
    assert rep.p_value == pytest.approx(expected, abs=1e-15) and rep.method == "exact"
    assert rep.statistic == 0


@pytest.mark.parametrize("seed", range(6))
def test_exact_p_matches_enumeration_with_ties(seed):
    rng = np.random.default_rng(seed)
    n = 8 + seed
    d = np.round(rng.normal(0.3, 1.0, n), 1)
    d[d == 0] = 0.1
    p_enum, _ = brute_force_wilcoxon_p(d)
    assert wilcoxon_signed_rank(d, np.zeros(n)).p_value == pytest.approx(p_enum, abs=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_exact_p_matches_scipy_without_ties(seed):
    rng = np.random.default_rng(100 + seed)
    d = rng.normal(0.4, 1.0, 12)
    ref = scipy_wilcoxon(d, method="exact").pvalue
    assert wilcoxon_signed_rank(d, np.zeros(12)).p_value == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("n", range(15, 21))
def test_exact_and_normal_agree_for_moderate_n(n):
    rng = np.random.default_rng(n)
    d = rng.normal(0.3, 1.0, n)
    exact = wilcoxon_signed_rank(d, np.zeros(n), method="exact").p_value
    approx = wilcoxon_signed_rank(d, np.zeros(n), method="normal").p_value
    assert abs(exact - approx) < 0.02


def test_large_sample_uses_normal_approximation():
    rng = np.random.default_rng(9)
    d = rng.normal(0.2, 1.0, 40)
    rep = wilcoxon_signed_rank(d, np.zeros(40))
    assert rep.method == "normal"
    ref = scipy_wilcoxon(d, method="approx", correction=True).pvalue
    assert rep.p_value == pytest.approx(ref, abs=1e-10)


def test_zero_differences_dropped_and_minimum_size():
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1, 2, 3, 4, 5], [1, 2, 3, 4, 5])
    with pytest.raises(ValueError, match=">= 5"):
        wilcoxon_signed_rank([1, 2, 3, 4, 5, 6], [0, 0, 0, 0, 5, 6])
    rep = wilcoxon_signed_rank([2, 3, 4, 5, 6, 7, 1], [1, 1, 1, 1, 1, 1, 1])
    assert rep.n_effective == 6


def test_bonferroni_examples():
    assert bonferroni([0.01], 5) == [pytest.approx(0.05)]
    assert bonferroni([0.5], 3) == [1.0]
    assert bonferroni([0.2, 0.03], 1) == [0.2, 0.03]
    assert bonferroni([0.01, 0.02]) == [0.02, 0.04]
    with pytest.raises(ValueError):
        bonferroni([1.5])
