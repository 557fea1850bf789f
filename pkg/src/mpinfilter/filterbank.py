"""Octave-decimated FIR band-pass bank used as feature extractor and kernel.

Filters are placed on the Greenwood cochlear map and grouped into octaves in
descending frequency order.  Octave ``o`` runs at ``fs / 2**o``; every octave
after the first is fed by low-pass filtering and 2x decimating the previous
octave's stream, so a 16-tap band-pass suffices everywhere.  Each filter's
output is half-wave rectified, accumulated over the clip and standardized
with training statistics to give one entry of the kernel vector.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import firwin

from .mp import MPDomainError, mp_inner_product_batch

log = logging.getLogger(__name__)

__all__ = [
    "DesignError",
    "StateError",
    "FilterBankConfig",
    "FilterBankModel",
    "StandardizationStats",
    "KernelVector",
    "greenwood",
    "greenwood_inverse",
    "design_bank",
    "frequency_response",
    "fir_exact",
    "fir_mp",
    "decimate",
    "hwr",
    "accumulate",
    "fit_standardization",
    "octave_streams",
    "filter_outputs",
    "accumulated_energies",
    "standardize",
    "extract_kernel",
    "SIGMA_FLOOR",
    "DEFAULT_GAMMA_F",
]

SIGMA_FLOOR = 1e-6
DEFAULT_GAMMA_F = 1.0

MODES = ("exact", "mp")


class DesignError(ValueError):
    """Filter-bank configuration cannot be realized."""


class StateError(RuntimeError):
    """Operation needs state (e.g. fitted statistics) that is missing."""


def greenwood(u, A=165.4, a=2.1, k=0.88):
    """Greenwood place-to-frequency map ``A * (10**(a*u) - k)``."""
    return A * (10.0 ** (a * np.asarray(u, dtype=float)) - k)


def greenwood_inverse(f, A=165.4, a=2.1, k=0.88):
    return np.log10(np.asarray(f, dtype=float) / A + k) / a


@dataclass(frozen=True)
class FilterBankConfig:
    filters_per_octave: int = 5
    num_octaves: int = 6
    bp_taps: int = 16
    lp_taps: int = 6
    base_sample_rate: float = 16000.0
    greenwood_params: tuple[float, float, float] = (165.4, 2.1, 0.88)
    freq_range: tuple[float, float] = (50.0, 5500.0)
    align_peaks: bool = True

    def __post_init__(self):
        for name in ("filters_per_octave", "num_octaves", "bp_taps", "lp_taps"):
            if int(getattr(self, name)) < 1:
                raise DesignError(f"{name} must be a positive integer")
        f_low, f_high = self.freq_range
        if not 0 < f_low < f_high:
            raise DesignError(f"freq_range must satisfy 0 < f_low < f_high, got {self.freq_range}")
        if f_high >= self.base_sample_rate / 2:
            raise DesignError(f"f_high={f_high} is not below Nyquist {self.base_sample_rate / 2}")
        object.__setattr__(self, "greenwood_params", tuple(float(v) for v in self.greenwood_params))
        object.__setattr__(self, "freq_range", (float(f_low), float(f_high)))

    @property
    def total_filters(self) -> int:
        return self.filters_per_octave * self.num_octaves

    def octave_rate(self, octave: int) -> float:
        return self.base_sample_rate / 2**octave

    def to_dict(self) -> dict:
        return {
            "filters_per_octave": self.filters_per_octave,
            "num_octaves": self.num_octaves,
            "bp_taps": self.bp_taps,
            "lp_taps": self.lp_taps,
            "base_sample_rate": self.base_sample_rate,
            "greenwood_params": list(self.greenwood_params),
            "freq_range": list(self.freq_range),
            "align_peaks": self.align_peaks,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FilterBankConfig":
        d = dict(d)
        d["greenwood_params"] = tuple(d["greenwood_params"])
        d["freq_range"] = tuple(d["freq_range"])
        return cls(**d)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FilterBankModel:
    config: FilterBankConfig
    bp_coeffs: np.ndarray  # (P, bp_taps)
    lp_coeffs: np.ndarray  # (num_octaves - 1, lp_taps); row s feeds octave s + 1
    center_freqs: np.ndarray
    band_edges: np.ndarray  # (P, 2), Hz
    octave_of: np.ndarray

    def __post_init__(self):
        for name in ("bp_coeffs", "lp_coeffs", "center_freqs", "band_edges"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        octave_of = np.array(self.octave_of, dtype=int)
        octave_of.setflags(write=False)
        object.__setattr__(self, "octave_of", octave_of)

    @property
    def num_filters(self) -> int:
        return self.bp_coeffs.shape[0]

    def filters_in_octave(self, octave: int) -> np.ndarray:
        return np.flatnonzero(self.octave_of == octave)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "bp_coeffs": self.bp_coeffs.tolist(),
            "lp_coeffs": self.lp_coeffs.tolist(),
            "center_freqs": self.center_freqs.tolist(),
            "band_edges": self.band_edges.tolist(),
            "octave_of": self.octave_of.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FilterBankModel":
        lp = np.array(d["lp_coeffs"], dtype=float)
        cfg = FilterBankConfig.from_dict(d["config"])
        return cls(
            config=cfg,
            bp_coeffs=np.array(d["bp_coeffs"], dtype=float),
            lp_coeffs=lp.reshape(-1, cfg.lp_taps),
            center_freqs=np.array(d["center_freqs"], dtype=float),
            band_edges=np.array(d["band_edges"], dtype=float),
            octave_of=np.array(d["octave_of"], dtype=int),
        )

    def __eq__(self, other):
        if not isinstance(other, FilterBankModel):
            return NotImplemented
        return self.config == other.config and all(
            np.array_equal(getattr(self, n), getattr(other, n))
            for n in ("bp_coeffs", "lp_coeffs", "center_freqs", "band_edges", "octave_of")
        )

    __hash__ = None


@dataclass(frozen=True)
class StandardizationStats:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu, sigma = _frozen(self.mu).ravel(), _frozen(self.sigma).ravel()
        if mu.shape != sigma.shape:
            raise ValueError("mu and sigma must have the same length")
        if np.any(sigma < 0):
            raise ValueError("sigma must be non-negative")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    def __eq__(self, other):
        if not isinstance(other, StandardizationStats):
            return NotImplemented
        return np.array_equal(self.mu, other.mu) and np.array_equal(self.sigma, other.sigma)

    __hash__ = None


@dataclass(frozen=True)
class KernelVector:
    phi: np.ndarray
    energies: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        phi = _frozen(self.phi).ravel()
        if not np.all(np.isfinite(phi)):
            raise ValueError("kernel vector has non-finite entries")
        object.__setattr__(self, "phi", phi)

    def __len__(self):
        return self.phi.size


def frequency_response(h, freqs, fs) -> np.ndarray:
    """Magnitude of the DTFT of taps ``h`` at ``freqs`` (Hz)."""
    h = np.asarray(h, dtype=float)
    n = np.arange(h.size)
    phase = np.exp(-2j * np.pi * np.outer(np.asarray(freqs, dtype=float), n) / fs)
    return np.abs(phase @ h)


def _lowpass(numtaps: int) -> np.ndarray:
    # Cutoff at a quarter of the pre-decimation rate, i.e. the new Nyquist.
    lp = firwin(numtaps, 0.5, window="hamming")
    return lp / lp.sum()


def _bandpass(numtaps, lo, hi, fs) -> np.ndarray:
    h = firwin(numtaps, [lo, hi], pass_zero=False, window="hamming", fs=fs)
    return 0.5 * (h + h[::-1])  # exact linear phase; firwin is symmetric only to rounding


def _peak_freq(gain, grid):
    return grid[int(np.argmax(gain))]


def design_bank(config: FilterBankConfig | None = None) -> FilterBankModel:
    """Greenwood-spaced, octave-decimated band-pass bank.

    Centers come from sampling the Greenwood map at equally spaced places
    between ``freq_range``.  Within an octave all filters share one bandwidth,
    the mean center spacing of that octave.  With ``align_peaks`` each pass
    band is slid so that the cascade (anti-alias chain times band-pass) peaks
    at the Greenwood center.
    """
    cfg = config or FilterBankConfig()
    P = cfg.total_filters
    F = cfg.filters_per_octave
    A, a, k = cfg.greenwood_params
    f_low, f_high = cfg.freq_range
    u = np.linspace(greenwood_inverse(f_high, A, a, k), greenwood_inverse(f_low, A, a, k), P)
    centers = greenwood(u, A, a, k)

    lp = _lowpass(cfg.lp_taps)
    bp = np.zeros((P, cfg.bp_taps))
    edges = np.zeros((P, 2))
    octave_of = np.repeat(np.arange(cfg.num_octaves), F)

    for o in range(cfg.num_octaves):
        fs = cfg.octave_rate(o)
        nyq = fs / 2
        idx = np.arange(o * F, (o + 1) * F)
        block = centers[idx]
        bw = (block[0] - block[-1]) / (F - 1) if F > 1 else block[0] / 2
        grid = np.linspace(nyq * 1e-3, nyq * (1 - 1e-3), 4001)
        chain = np.ones_like(grid)
        for s in range(o):
            chain *= frequency_response(lp, grid, cfg.octave_rate(s))
        for p in idx:
            fc = centers[p]
            lo, hi = fc - bw / 2, fc + bw / 2
            if hi >= nyq or lo <= 0:
                raise DesignError(
                    f"filter {p} band [{lo:.1f}, {hi:.1f}] Hz does not fit octave {o} "
                    f"(rate {fs:.1f} Hz, Nyquist {nyq:.1f} Hz)"
                )
            shift = 0.0
            if cfg.align_peaks and cfg.bp_taps > 2:
                shift = _align_shift(cfg.bp_taps, fc, bw, fs, grid, chain)
            edges[p] = (lo + shift, hi + shift)
            bp[p] = _bandpass(cfg.bp_taps, *edges[p], fs)

    lp_stages = np.tile(lp, (max(cfg.num_octaves - 1, 0), 1))
    return FilterBankModel(cfg, bp, lp_stages, centers, edges, octave_of)


def _align_shift(numtaps, fc, bw, fs, grid, chain):
    """Bisection on a band shift so the cascade gain peaks at ``fc``."""
    nyq = fs / 2
    dft = np.exp(-2j * np.pi * np.outer(grid, np.arange(numtaps)) / fs)

    def offset(shift):
        h = _bandpass(numtaps, fc - bw / 2 + shift, fc + bw / 2 + shift, fs)
        return _peak_freq(chain * np.abs(dft @ h), grid) - fc

    a = max(-(fc - bw / 2) + 1e-3 * nyq, -bw)
    b = min(nyq - (fc + bw / 2) - 1e-3 * nyq, bw)
    if offset(a) > 0 or offset(b) < 0:
        log.warning("cannot align peak of %.1f Hz band at %.1f Hz; left unaligned", fc, fs)
        return 0.0
    for _ in range(30):
        m = 0.5 * (a + b)
        if offset(m) < 0:
            a = m
        else:
            b = m
    return 0.5 * (a + b)


def _windows(x, m):
    """Row ``n`` is ``[x(n), x(n-1), ..., x(n-m+1)]`` with zero history."""
    padded = np.concatenate([np.zeros(m - 1), x])
    view = np.lib.stride_tricks.sliding_window_view(padded, m)
    return view[:, ::-1]


def fir_exact(x, h) -> np.ndarray:
    """``y(n) = sum_k h(k) x(n-k)``, zero initial state, same length as ``x``."""
    h = np.asarray(h, dtype=float)
    if h.size == 0:
        raise ValueError("FIR needs at least one tap")
    x = np.asarray(x, dtype=float)
    return np.convolve(x, h)[: x.size]


def fir_mp(x, h, gamma_f: float = DEFAULT_GAMMA_F) -> np.ndarray:
    """FIR filter with every inner product replaced by its MP approximation."""
    if not gamma_f > 0:
        raise MPDomainError("gamma_f must be positive")
    h = np.asarray(h, dtype=float)
    x = np.asarray(x, dtype=float)
    if h.size == 0:
        raise ValueError("FIR needs at least one tap")
    if x.size == 0:
        return np.zeros(0)
    return mp_inner_product_batch(h, _windows(x, h.size), gamma_f)


def _filter(x, h, mode, gamma_f):
    if mode == "exact":
        return fir_exact(x, h)
    if mode == "mp":
        return fir_mp(x, h, gamma_f)
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def decimate(x, lp, mode: str = "exact", gamma_f: float = DEFAULT_GAMMA_F) -> np.ndarray:
    """Anti-alias low-pass then keep samples 0, 2, 4, ..."""
    return _filter(x, lp, mode, gamma_f)[::2]


def hwr(q):
    """Half-wave rectifier ``max(0, q)``."""
    return np.maximum(q, 0.0) if isinstance(q, np.ndarray) else max(0.0, float(q))


def accumulate(d) -> float:
    return float(np.sum(np.asarray(d, dtype=float)))


def fit_standardization(S) -> StandardizationStats:
    """Per-filter mean and Bessel-corrected std over training rows of ``S``."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] < 2:
        raise ValueError("standardization needs a matrix with at least two training rows")
    return StandardizationStats(S.mean(axis=0), S.std(axis=0, ddof=1))


def octave_streams(x, bank: FilterBankModel, mode="exact", gamma_f=DEFAULT_GAMMA_F) -> list[np.ndarray]:
    """Input of every octave: the clip itself, then successive decimations."""
    streams = [np.asarray(x, dtype=float)]
    for lp in bank.lp_coeffs:
        streams.append(decimate(streams[-1], lp, mode, gamma_f))
    return streams


def filter_outputs(x, bank: FilterBankModel, mode="exact", gamma_f=DEFAULT_GAMMA_F) -> list[np.ndarray]:
    """Band-pass output of every filter at its octave's rate."""
    streams = octave_streams(x, bank, mode, gamma_f)
    return [_filter(streams[bank.octave_of[p]], bank.bp_coeffs[p], mode, gamma_f) for p in range(bank.num_filters)]


def accumulated_energies(x, bank: FilterBankModel, mode="exact", gamma_f=DEFAULT_GAMMA_F) -> np.ndarray:
    """``s_p``: rectified band-pass output summed over the clip, per filter."""
    return np.array([accumulate(hwr(y)) for y in filter_outputs(x, bank, mode, gamma_f)])


def standardize(s, stats: StandardizationStats | None) -> np.ndarray:
    if stats is None:
        raise StateError("standardization statistics have not been fitted")
    s = np.asarray(s, dtype=float)
    if s.shape[-1] != stats.mu.size:
        raise ValueError(f"expected {stats.mu.size} energies, got {s.shape[-1]}")
    sigma = np.where(stats.sigma > 0, stats.sigma, SIGMA_FLOOR)
    return (s - stats.mu) / sigma


def extract_kernel(
    x,
    bank: FilterBankModel,
    stats: StandardizationStats | None,
    mode: str = "exact",
    gamma_f: float = DEFAULT_GAMMA_F,
) -> KernelVector:
    """Kernel vector of one clip sampled at the bank's base rate."""
    if stats is None:
        raise StateError("standardization statistics have not been fitted")
    s = accumulated_energies(x, bank, mode, gamma_f)
    return KernelVector(standardize(s, stats), energies=s)
