"""Time-resolved gain of every filter for a linear chirp."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy.signal import chirp

from .filterbank import DEFAULT_GAMMA_F, FilterBankModel, filter_outputs

__all__ = ["ChirpResponse", "linear_chirp", "chirp_response", "group_delay", "cascade_gain", "peak_frequency"]

CSV_HEADER = "filter,center_hz,frame,time_s,inst_freq_hz,gain"


def linear_chirp(duration: float, f0: float, f1: float, fs: float, amplitude: float = 1.0) -> np.ndarray:
    t = np.arange(int(round(duration * fs))) / fs
    return amplitude * chirp(t, f0, duration, f1, method="linear")


@dataclass
class ChirpResponse:
    """Per-filter frame RMS of the band-pass output.

    ``times[p]`` and ``gains[p]`` are per filter because frame lengths follow
    each octave's sample rate.  Times refer to the input: each filter's
    cascade group delay has been subtracted.
    """

    center_freqs: np.ndarray
    times: list
    gains: list
    f0: float
    f1: float
    duration: float

    def inst_freq(self, t):
        return self.f0 + (self.f1 - self.f0) * np.asarray(t) / self.duration

    def peak_times(self) -> np.ndarray:
        """Time of each filter's largest gain, refined by a parabola through
        the peak frame and its neighbours (frame grids differ per octave)."""
        out = np.full(len(self.gains), np.nan)
        for p, (t, g) in enumerate(zip(self.times, self.gains)):
            if g.size == 0:
                continue
            k = int(np.argmax(g))
            out[p] = t[k]
            if 0 < k < g.size - 1:
                a, b, c = g[k - 1], g[k], g[k + 1]
                curve = a - b - b + c
                if curve < 0:
                    out[p] += 0.5 * (a - c) / curve * (t[k + 1] - t[k])
        return out

    def peak_freqs(self) -> np.ndarray:
        """Instantaneous chirp frequency at which each filter responds most."""
        return self.inst_freq(self.peak_times())

    def peak_filter_index(self) -> np.ndarray:
        """Filter whose center is nearest to each filter's peak frequency."""
        f = self.peak_freqs()
        return np.argmin(np.abs(self.center_freqs[None, :] - f[:, None]), axis=1)

    def is_monotone_ridge(self) -> bool:
        """Centers descend with filter index, so the ridge must reach later filters earlier."""
        return bool(np.all(np.diff(self.peak_times()) <= 0))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for p, (t, g) in enumerate(zip(self.times, self.gains)):
            fi = self.inst_freq(t)
            for k in range(t.size):
                buf.write(f"{p},{float(self.center_freqs[p])!r},{k},{float(t[k])!r},{float(fi[k])!r},{float(g[k])!r}\n")
        return buf.getvalue()


def group_delay(bank: FilterBankModel, p: int) -> float:
    """Delay in seconds from the clip to filter ``p``'s output.

    Every stage is linear phase, so each contributes half its span.
    """
    cfg = bank.config
    o = int(bank.octave_of[p])
    half_lp = (bank.lp_coeffs.shape[1] - 1) / 2 if bank.lp_coeffs.size else 0.0
    d = (bank.bp_coeffs.shape[1] - 1) / 2 / cfg.octave_rate(o)
    return d + sum(half_lp / cfg.octave_rate(s) for s in range(o))


def chirp_response(
    bank: FilterBankModel,
    mode: str = "exact",
    gamma_f: float = DEFAULT_GAMMA_F,
    duration: float = 4.0,
    f0: float = 20.0,
    f1: float = 7900.0,
    amplitude: float = 1.0,
    frame_seconds: float = 0.02,
) -> ChirpResponse:
    fs = bank.config.base_sample_rate
    x = linear_chirp(duration, f0, f1, fs, amplitude)
    times, gains = [], []
    for p, y in enumerate(filter_outputs(x, bank, mode, gamma_f)):
        rate = bank.config.octave_rate(int(bank.octave_of[p]))
        fl = max(int(frame_seconds * rate), 4)
        nf = y.size // fl
        frames = y[: nf * fl].reshape(nf, fl)
        gains.append(np.sqrt(np.mean(frames**2, axis=1)))
        times.append((np.arange(nf) + 0.5) * fl / rate - group_delay(bank, p))
    return ChirpResponse(bank.center_freqs, times, gains, f0, f1, duration)


def cascade_gain(bank: FilterBankModel, p: int, n_fft: int = 1 << 16):
    """Magnitude response from the clip to filter ``p``'s output.

    Includes every anti-alias stage in front of the filter.  Returns
    ``(freqs, gain)`` on a uniform grid up to the filter's Nyquist frequency,
    from zero-padded FFTs that share one bin spacing across rates.
    """
    cfg = bank.config
    o = int(bank.octave_of[p])
    rate = cfg.octave_rate(o)
    half = n_fft // 2 + 1
    gain = np.abs(np.fft.rfft(bank.bp_coeffs[p], n_fft))
    for s in range(o):
        # stage s runs 2**(o - s) times faster; a longer FFT keeps the same bin spacing
        n_s = n_fft << (o - s)
        gain = gain * np.abs(np.fft.rfft(bank.lp_coeffs[s], n_s))[:half]
    return np.arange(half) * rate / n_fft, gain


def peak_frequency(taps, fs: float, n_fft: int = 1 << 18) -> float:
    """Frequency of maximum gain of a single FIR, by zero-padded FFT."""
    gain = np.abs(np.fft.rfft(np.asarray(taps, dtype=float), n_fft))
    return float(np.argmax(gain) * fs / n_fft)
