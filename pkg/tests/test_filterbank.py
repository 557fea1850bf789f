import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import firwin

from mpinfilter.filterbank import (
    SIGMA_FLOOR,
    DesignError,
    FilterBankConfig,
    FilterBankModel,
    StandardizationStats,
    StateError,
    accumulate,
    accumulated_energies,
    decimate,
    design_bank,
    extract_kernel,
    fir_exact,
    fir_mp,
    fit_standardization,
    frequency_response,
    greenwood,
    greenwood_inverse,
    hwr,
    standardize,
)

from mpinfilter.response import cascade_gain, peak_frequency

from oracles import conv_loops, dtft_mag, pairwise_sum, two_pass_stats


# --- design ----------------------------------------------------------------


def test_bank_shape(bank):
    assert bank.bp_coeffs.shape == (30, 16)
    assert bank.lp_coeffs.shape == (5, 6)
    assert bank.config.total_filters == 30
    assert list(bank.octave_of) == [o for o in range(6) for _ in range(5)]


def test_taps_symmetric_and_lp_unity_dc(bank):
    assert np.array_equal(bank.bp_coeffs, bank.bp_coeffs[:, ::-1])
    assert np.allclose(bank.lp_coeffs.sum(axis=1), 1.0, atol=1e-6)


def test_centers_descend_and_follow_greenwood(bank):
    c = bank.center_freqs
    assert np.all(np.diff(c) < 0)
    u = greenwood_inverse(c)
    assert np.allclose(np.diff(u), np.diff(u)[0])
    assert c[0] == pytest.approx(bank.config.freq_range[1])
    assert c[-1] == pytest.approx(bank.config.freq_range[0])
    assert greenwood(greenwood_inverse(1234.5)) == pytest.approx(1234.5)


def test_octave_rates_cover_bands(bank):
    for p in range(30):
        rate = bank.config.octave_rate(int(bank.octave_of[p]))
        assert rate >= 2 * bank.band_edges[p, 1]


def test_highest_octave_response_peaks_at_center(bank):
    fs = bank.config.octave_rate(0)
    for p in bank.filters_in_octave(0):
        fc = bank.center_freqs[p]
        g = frequency_response(bank.bp_coeffs[p], [fc, fc / 2, min(2 * fc, fs / 2 - 1)], fs)
        assert g[0] >= g[1] and g[0] >= g[2]


def test_frequency_response_matches_dtft_oracle(bank):
    f = np.linspace(10, 7990, 37)
    assert np.allclose(frequency_response(bank.bp_coeffs[3], f, 16000), dtft_mag(bank.bp_coeffs[3], f, 16000))


def _cascade_peak(bank, p):
    f, g = cascade_gain(bank, p)
    return f[np.argmax(g)]


def reference_peak(bank, p):
    """Peak of a full-rate design over the filter's nominal band, same time span."""
    cfg = bank.config
    o = int(bank.octave_of[p])
    block = bank.center_freqs[bank.filters_in_octave(o)]
    bw = (block[0] - block[-1]) / (len(block) - 1)
    fc = bank.center_freqs[p]
    fs = cfg.base_sample_rate
    ref = firwin(cfg.bp_taps * 2**o, [fc - bw / 2, fc + bw / 2], pass_zero=False, fs=fs)
    return peak_frequency(ref, fs)


def test_cascade_gain_matches_dtft_oracle(bank):
    p = 17
    f, g = cascade_gain(bank, p, n_fft=1024)
    o = int(bank.octave_of[p])
    pick = np.arange(0, f.size, 37)
    expect = dtft_mag(bank.bp_coeffs[p], f[pick], bank.config.octave_rate(o))
    for s in range(o):
        expect = expect * dtft_mag(bank.lp_coeffs[s], f[pick], bank.config.octave_rate(s))
    assert np.allclose(g[pick], expect, atol=1e-12)


def test_decimated_bank_matches_full_rate_reference(bank):
    rel = [abs(_cascade_peak(bank, p) - reference_peak(bank, p)) / reference_peak(bank, p) for p in range(30)]
    assert max(rel) <= 0.05


def test_unaligned_bank_still_matches_reference():
    bank = design_bank(FilterBankConfig(align_peaks=False))
    rel = [abs(_cascade_peak(bank, p) - reference_peak(bank, p)) / reference_peak(bank, p) for p in range(30)]
    assert max(rel) <= 0.05


def test_infeasible_config_names_filter():
    with pytest.raises(DesignError, match="filter 0"):
        design_bank(FilterBankConfig(freq_range=(50.0, 7990.0)))
    with pytest.raises(DesignError, match="filter 29"):
        design_bank(FilterBankConfig(freq_range=(1.0, 5500.0)))


@pytest.mark.parametrize(
    "kwargs",
    [{"freq_range": (0.0, 5000.0)}, {"freq_range": (50.0, 8000.0)}, {"filters_per_octave": 0}, {"bp_taps": 0}],
)
def test_invalid_config_rejected(kwargs):
    with pytest.raises(ValueError):
        FilterBankConfig(**kwargs)


def test_bank_serialization_round_trip(bank):
    again = FilterBankModel.from_dict(bank.to_dict())
    assert again == bank
    assert FilterBankConfig.from_dict(bank.config.to_dict()) == bank.config


def test_bank_is_immutable(bank):
    with pytest.raises(ValueError):
        bank.bp_coeffs[0, 0] = 1.0


# --- FIR ---------------------------------------------------------------------


def test_fir_exact_examples():
    x = np.arange(7.0)
    assert np.array_equal(fir_exact(x, [1.0]), x)
    y = fir_exact(np.full(12, 8.0), [0.25] * 4)
    assert np.allclose(y[3:], 8.0)
    with pytest.raises(ValueError):
        fir_exact(x, [])


def test_fir_exact_matches_loop_oracle():
    rng = np.random.default_rng(11)
    x, h = rng.normal(size=32), rng.normal(size=16)
    assert np.allclose(fir_exact(x, h), conv_loops(x, h), rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5), st.floats(-5, 5))
def test_fir_exact_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y, h = rng.normal(size=40), rng.normal(size=40), rng.normal(size=9)
    assert np.allclose(fir_exact(a * x + b * y, h), a * fir_exact(x, h) + b * fir_exact(y, h), atol=1e-9)


def test_fir_mp_zero_and_antisymmetry(bank):
    h = bank.bp_coeffs[7]
    assert np.array_equal(fir_mp(np.zeros(50), h, 1.0), np.zeros(50))
    x = np.random.default_rng(3).uniform(-1, 1, 300)
    assert np.array_equal(fir_mp(-x, h, 1.0), -fir_mp(x, h, 1.0))


def test_fir_mp_differs_from_exact(bank):
    x = np.random.default_rng(4).uniform(-1, 1, 300)
    h = bank.bp_coeffs[2]
    assert np.sum((fir_mp(x, h, 1.0) - fir_exact(x, h)) ** 2) > 0


def test_fir_mp_rejects_bad_gamma():
    with pytest.raises(ValueError):
        fir_mp(np.ones(4), [1.0], 0.0)


def test_decimate(bank):
    lp = bank.lp_coeffs[0]
    y = decimate(np.full(40, 3.0), lp)
    assert np.allclose(y[3:], 3.0)
    assert decimate(np.ones(10), lp).size == 5
    assert decimate(np.ones(11), lp).size == 6
    t = np.arange(4000) / 16000
    tone = np.sin(2 * np.pi * 6500 * t)
    passed = np.sin(2 * np.pi * 500 * t)
    assert np.std(decimate(tone, lp)[50:]) < 0.5 * np.std(decimate(passed, lp)[50:])


# --- rectification, accumulation, standardization ------------------------------


def test_hwr_and_accumulate():
    assert hwr(-3.0) == 0 and hwr(0.0) == 0 and hwr(2.5) == 2.5
    assert accumulate(np.zeros(5)) == 0
    assert accumulate([1, 2, 3]) == 6
    d = np.random.default_rng(0).uniform(0, 1, 10_001)
    assert accumulate(d) == pytest.approx(pairwise_sum(d), rel=1e-9)


def test_fit_standardization_examples():
    st_ = fit_standardization(np.array([[1.0, 2.0], [1.0, 2.0]]))
    assert np.array_equal(st_.sigma, [0.0, 0.0])
    st_ = fit_standardization(np.array([[0.0], [2.0]]))
    assert st_.mu[0] == pytest.approx(1.0) and st_.sigma[0] == pytest.approx(np.sqrt(2))
    S = np.random.default_rng(1).normal(size=(10, 30))
    mu, sd = two_pass_stats(S)
    st_ = fit_standardization(S)
    assert np.allclose(st_.mu, mu, atol=1e-9) and np.allclose(st_.sigma, sd, atol=1e-9)
    with pytest.raises(ValueError):
        fit_standardization(np.ones((1, 30)))


def test_standardization_stats_validation():
    with pytest.raises(ValueError):
        StandardizationStats([1.0], [-1.0])
    with pytest.raises(ValueError):
        StandardizationStats([1.0, 2.0], [1.0])


def test_standardize_zero_sigma_is_finite():
    st_ = StandardizationStats([1.0, 2.0], [0.0, 1.0])
    phi = standardize([1.5, 2.0], st_)
    assert np.all(np.isfinite(phi))
    assert phi[0] == pytest.approx(0.5 / SIGMA_FLOOR)
    with pytest.raises(StateError):
        standardize([1.0, 2.0], None)


# --- kernel extraction -------------------------------------------------------------


@pytest.mark.parametrize("mode", ["exact", "mp"])
def test_silence_kernel(bank, mode):
    st_ = StandardizationStats(np.linspace(1, 30, 30), np.linspace(0.5, 3, 30))
    phi = extract_kernel(np.zeros(1600), bank, st_, mode).phi
    assert np.allclose(phi, -st_.mu / st_.sigma)


def test_mean_profile_clip_gives_zero_kernel(bank):
    # exact-mode energies are positively homogeneous in the input
    x = np.random.default_rng(9).uniform(-0.5, 0.5, 4000)
    S = np.stack([accumulated_energies(a * x, bank) for a in (0.5, 1.5)])
    phi = extract_kernel(x, bank, fit_standardization(S), "exact").phi
    assert np.allclose(phi, 0.0, atol=1e-9)


def test_kernel_requires_stats(bank):
    with pytest.raises(StateError):
        extract_kernel(np.zeros(100), bank, None)


def test_kernel_determinism(bank):
    x = np.random.default_rng(2).uniform(-1, 1, 3000)
    st_ = StandardizationStats(np.ones(30), np.ones(30))
    a = extract_kernel(x, bank, st_, "mp")
    b = extract_kernel(x.copy(), bank, st_, "mp")
    assert np.array_equal(a.phi, b.phi)
    assert len(a) == 30


def test_mode_rejects_unknown(bank):
    with pytest.raises(ValueError):
        accumulated_energies(np.zeros(10), bank, "fast")


# --- exact versus MP kernels ---------------------------------------------------------


def _rank_corr(a, b):
    from scipy.stats import spearmanr

    return np.array([spearmanr(x, y)[0] for x, y in zip(a, b)])


def test_mp_energies_rank_like_exact_on_synthetic_audio(bank, synth_dataset, synth_energies):
    clips = synth_dataset.clips[:12]
    exact = np.stack([accumulated_energies(c.samples, bank, "exact") for c in clips])
    tuned = _rank_corr(exact, synth_energies[:12])
    assert tuned.min() >= 0.8
    # moving gamma_f toward its tuned value improves the agreement
    coarse = _rank_corr(exact, np.stack([accumulated_energies(c.samples, bank, "mp", 0.2) for c in clips]))
    assert np.median(tuned) > np.median(coarse)


def test_mp_kernel_rank_correlation_on_real_audio(bank):
    import os
    from pathlib import Path

    from mpinfilter.data import IngestOptions, ingest

    root = os.environ.get("MPINFILTER_ESC10_DIR")
    if not root or not Path(root).is_dir():
        pytest.skip("needs a real corpus: set MPINFILTER_ESC10_DIR")
    ds = ingest(root, "dog", IngestOptions(seed=0))
    clips = [ds.clips[i].samples for i in ds.indices("test")]
    exact = np.stack([accumulated_energies(x, bank, "exact") for x in clips])
    mp = np.stack([accumulated_energies(x, bank, "mp") for x in clips])
    phi_e = standardize(exact, fit_standardization(exact))
    phi_m = standardize(mp, fit_standardization(mp))
    assert np.median(_rank_corr(phi_e, phi_m)) >= 0.8
