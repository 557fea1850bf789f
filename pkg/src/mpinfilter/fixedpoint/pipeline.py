"""End-to-end classifier on integer codes.

Everything reachable from :func:`fixed_pipeline` uses only the primitives of
:mod:`.arith` (add/sub, compare, shift).  Real-valued constants (filter taps,
standardization offsets and scales, weights, margins) are converted to codes
once, in :meth:`QuantizedModel.from_model`; that conversion is the offline
"ROM programming" step and is not part of the audited datapath.

Stages and their formats:

* audio and filter streams: the 10-bit datapath format ``DATAPATH``;
* accumulators: unbounded-width sums of rectified band-pass outputs, cut to
  a 10-bit kernel tap by a per-filter truncating right shift;
* standardization: offset subtraction, then a constant scale realized as a
  canonical-signed-digit shift-and-add network;
* classifier: kernel entries and weights in ``CLASSIFIER``; operand sums one
  bit wider.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from ..filterbank import SIGMA_FLOOR
from ..kernel_machine import Decision, TrainedModel
from .arith import (
    FX_MP_ITERS,
    FixedPointFormat,
    OpTrace,
    ShiftAddConstant,
    fx_add,
    fx_mp_batch,
    fx_neg,
    fx_relu,
    fx_saturate,
    fx_shr,
    fx_sub,
)

log = logging.getLogger(__name__)

__all__ = [
    "DATAPATH",
    "CLASSIFIER",
    "KERNEL_TAP_BITS",
    "QuantizedModel",
    "quantize_audio",
    "fx_fir_mp",
    "fixed_energies",
    "fixed_kernel",
    "fixed_pipeline",
    "fixed_infer",
    "fixed_predict",
    "RUNTIME_FUNCTIONS",
]

DATAPATH = FixedPointFormat(10, 8)
CLASSIFIER = FixedPointFormat(10, 6)
KERNEL_TAP_BITS = 10
ACC_HEADROOM_SIGMAS = 6.0
CSD_BITS = 10
DEFAULT_STORAGE_BITS = 8


def _coeff_codes(values, bits: int, fmt: FixedPointFormat) -> np.ndarray:
    """Store at ``bits`` on the tensor's own binary point, then shift onto ``fmt``."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return np.zeros(values.shape, dtype=np.int64)
    store = FixedPointFormat.fit(values, bits, max_frac=fmt.frac_bits)
    codes = np.asarray(store.quantize(values, warn=False), dtype=np.int64)
    return np.left_shift(codes, fmt.frac_bits - store.frac_bits)


@dataclass(frozen=True, eq=False)
class QuantizedModel:
    """Integer constants for :func:`fixed_pipeline`."""

    datapath: FixedPointFormat
    classifier: FixedPointFormat
    bp_codes: np.ndarray  # (P, taps), datapath frac
    lp_codes: np.ndarray  # (stages, taps)
    octave_of: np.ndarray
    gamma_f: int
    acc_shift: np.ndarray  # per filter
    mu_codes: np.ndarray  # offset in truncated-accumulator units
    scales: tuple  # ShiftAddConstant per filter
    w_plus: np.ndarray
    w_minus: np.ndarray
    b_plus: int
    b_minus: int
    gamma1: int
    gamma_n: int

    @property
    def num_filters(self) -> int:
        return self.bp_codes.shape[0]

    @property
    def operand_format(self) -> FixedPointFormat:
        return FixedPointFormat(self.classifier.word_bits + 1, self.classifier.frac_bits)

    @property
    def tap_format(self) -> FixedPointFormat:
        return FixedPointFormat(KERNEL_TAP_BITS, 0)

    @classmethod
    def from_model(
        cls,
        model: TrainedModel,
        bits: int | None = None,
        datapath: FixedPointFormat = DATAPATH,
        classifier: FixedPointFormat = CLASSIFIER,
    ) -> "QuantizedModel":
        """Convert every constant of ``model`` to integer codes.

        ``bits`` is the storage width for taps and weights; it defaults to
        the model's quantization format, or 8 for a float model.
        """
        if bits is None:
            bits = model.quant.word_bits if model.quant is not None else DEFAULT_STORAGE_BITS
        bank = model.bank
        fd, fc = datapath.frac_bits, classifier.frac_bits
        mu = model.stats.mu
        sigma = np.where(model.stats.sigma > 0, model.stats.sigma, SIGMA_FLOOR)

        # Size each accumulator tap so mu + 6 sigma lands in the top code range.
        bound = np.ldexp(np.maximum(mu + ACC_HEADROOM_SIGMAS * sigma, 0.0), fd)
        shifts = np.array(
            [max(0, int(math.ceil(b)).bit_length() - (KERNEL_TAP_BITS - 1)) for b in bound], dtype=np.int64
        )
        mu_codes = np.array([int(np.round(math.ldexp(m, fd - int(k)))) for m, k in zip(mu, shifts)], dtype=np.int64)
        scales = tuple(
            ShiftAddConstant.from_float(math.ldexp(1.0 / s, int(k) + fc - fd), CSD_BITS) for s, k in zip(sigma, shifts)
        )

        weights = np.concatenate([model.w_plus, model.w_minus, [model.b_plus, model.b_minus]])
        wcodes = _coeff_codes(weights, bits, classifier)
        wcodes = np.asarray(fx_saturate(wcodes, classifier), dtype=np.int64)
        P = model.num_filters
        return cls(
            datapath=datapath,
            classifier=classifier,
            bp_codes=_coeff_codes(bank.bp_coeffs, bits, datapath),
            lp_codes=_coeff_codes(bank.lp_coeffs, bits, datapath).reshape(bank.lp_coeffs.shape),
            octave_of=np.asarray(bank.octave_of, dtype=np.int64),
            gamma_f=max(1, int(datapath.quantize(model.gamma_f, warn=False))),
            acc_shift=shifts,
            mu_codes=mu_codes,
            scales=scales,
            w_plus=wcodes[:P],
            w_minus=wcodes[P : 2 * P],
            b_plus=int(wcodes[2 * P]),
            b_minus=int(wcodes[2 * P + 1]),
            gamma1=max(1, int(classifier.quantize(model.gamma1, warn=False))),
            gamma_n=max(1, int(classifier.quantize(model.gamma_n, warn=False))),
        )


def quantize_audio(x, fmt: FixedPointFormat = DATAPATH, trace: OpTrace | None = None) -> np.ndarray:
    """Converter stage: round samples onto ``fmt``; clipping is counted, not fatal."""
    x = np.asarray(x, dtype=float)
    scaled = np.ldexp(x, fmt.frac_bits)
    codes = (np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)).astype(np.int64)
    out = np.asarray(fx_saturate(codes, fmt, trace), dtype=np.int64)
    n_sat = int(np.count_nonzero(out != codes))
    if n_sat:
        log.warning("%d input sample(s) clipped to %s", n_sat, fmt)
    return out


def _windows(x, m: int, step: int):
    padded = np.concatenate([np.zeros(m - 1, dtype=np.int64), x])
    return np.lib.stride_tricks.sliding_window_view(padded, m)[::step, ::-1]


def fx_fir_mp(x, taps, gamma: int, fmt: FixedPointFormat, trace: OpTrace | None = None, stage="fir", step: int = 1):
    """MP-domain FIR on codes for one or more tap sets sharing the input.

    ``taps`` is ``(F, M)`` (or ``(M,)``); the result is ``(F, ceil(N/step))``
    holding outputs ``0, step, 2*step, ...``.  Rails are the literal
    ``h+ = h, h- = -h, x+ = x, x- = -x``.
    """
    x = np.asarray(x, dtype=np.int64)
    h = np.atleast_2d(np.asarray(taps, dtype=np.int64))
    F, M = h.shape
    if x.size == 0:
        return np.zeros((F, 0), dtype=np.int64)
    x_neg = np.asarray(fx_neg(x, fmt, trace), dtype=np.int64)
    xp = _windows(x, M, step)[None, :, :]
    xm = _windows(x_neg, M, step)[None, :, :]
    hp = h[:, None, :]
    hm = -h[:, None, :]  # stored negated constants
    plus = np.concatenate([fx_add(hp, xp, fmt, trace), fx_add(hm, xm, fmt, trace)], axis=2)
    minus = np.concatenate([fx_add(hp, xm, fmt, trace), fx_add(hm, xp, fmt, trace)], axis=2)
    zp = fx_mp_batch(plus.reshape(-1, plus.shape[2]), gamma, fmt, FX_MP_ITERS, trace, stage)
    zm = fx_mp_batch(minus.reshape(-1, minus.shape[2]), gamma, fmt, FX_MP_ITERS, trace, stage)
    y = np.asarray(fx_sub(zp, zm, fmt, trace), dtype=np.int64).reshape(F, -1)
    if trace is not None:
        trace.observe(stage, y)
    return y


def fixed_energies(xq, qm: QuantizedModel, trace: OpTrace | None = None) -> np.ndarray:
    """Accumulated rectified band-pass outputs (wide integer codes) per filter."""
    d = qm.datapath
    streams = [np.asarray(xq, dtype=np.int64)]
    for s, lp in enumerate(qm.lp_codes):
        streams.append(fx_fir_mp(streams[-1], lp, qm.gamma_f, d, trace, f"lowpass{s + 1}", step=2)[0])
    acc = np.zeros(qm.num_filters, dtype=np.int64)
    for o, stream in enumerate(streams):
        idx = np.flatnonzero(qm.octave_of == o)
        if idx.size == 0:
            continue
        y = fx_fir_mp(stream, qm.bp_codes[idx], qm.gamma_f, d, trace, "bandpass")
        r = np.asarray(fx_relu(y, trace), dtype=np.int64)
        acc[idx] = r.sum(axis=1)
        if trace is not None:
            trace.count("add", r.size)
            trace.observe("accumulator", acc[idx])
    return acc


def fixed_kernel(acc, qm: QuantizedModel, trace: OpTrace | None = None) -> np.ndarray:
    """Upper-bit kernel taps, centered and scaled into the classifier format."""
    acc = np.asarray(acc, dtype=np.int64)
    taps = np.array([fx_shr(a, int(k), trace) for a, k in zip(acc, qm.acc_shift)], dtype=np.int64)
    taps = np.asarray(fx_saturate(taps, qm.tap_format, trace), dtype=np.int64)
    centered = np.asarray(fx_sub(taps, qm.mu_codes, FixedPointFormat(KERNEL_TAP_BITS + 1, 0), trace), dtype=np.int64)
    scaled = np.array([c.apply(v, trace) for c, v in zip(qm.scales, centered)], dtype=np.int64)
    phi = np.asarray(fx_saturate(scaled, qm.classifier, trace), dtype=np.int64)
    if trace is not None:
        trace.observe("kernel_tap", taps)
        trace.observe("standardize", scaled)
        trace.observe("kernel", phi)
    return phi


def _classify(phi, qm: QuantizedModel, trace: OpTrace | None) -> Decision:
    of = qm.operand_format
    plus = np.concatenate(
        [fx_add(qm.w_plus, phi, of, trace), fx_sub(qm.w_minus, phi, of, trace), [qm.b_plus]]
    ).astype(np.int64)
    minus = np.concatenate(
        [fx_sub(qm.w_plus, phi, of, trace), fx_add(qm.w_minus, phi, of, trace), [qm.b_minus]]
    ).astype(np.int64)
    if trace is not None:
        trace.observe("classifier_operands", np.concatenate([plus, minus]))
    z_pm = fx_mp_batch(np.stack([plus, minus]), qm.gamma1, of, FX_MP_ITERS, trace, "classifier_mp")
    z = fx_mp_batch(z_pm[None, :], qm.gamma_n, of, FX_MP_ITERS, trace, "normalize_mp")[0]
    p_plus = fx_relu(fx_sub(z_pm[0], z, of, trace), trace)
    p_minus = fx_relu(fx_sub(z_pm[1], z, of, trace), trace)
    p = fx_sub(p_plus, p_minus, of, trace)
    if trace is not None:
        trace.count("compare")  # sign test for the label
    return Decision(of.dequantize(p), of.dequantize(p_plus), of.dequantize(p_minus), int(p > 0))


def fixed_pipeline(xq, qm: QuantizedModel, trace: OpTrace | None = None) -> Decision:
    """Decision for one clip of datapath codes at the bank's base rate."""
    if trace is not None:
        trace.observe("input", xq)
    acc = fixed_energies(xq, qm, trace)
    phi = fixed_kernel(acc, qm, trace)
    return _classify(phi, qm, trace)


def fixed_infer(x, model: TrainedModel | QuantizedModel, trace: OpTrace | None = None) -> Decision:
    """Quantize a float clip and run :func:`fixed_pipeline`.

    A float model (``quant`` unset) is converted with the default storage
    width.
    """
    qm = model if isinstance(model, QuantizedModel) else QuantizedModel.from_model(model)
    return fixed_pipeline(quantize_audio(x, qm.datapath, trace), qm, trace)


def fixed_predict(clips, model: TrainedModel | QuantizedModel, trace: OpTrace | None = None) -> list[Decision]:
    """:func:`fixed_infer` over many clips (arrays or objects with ``samples``)."""
    qm = model if isinstance(model, QuantizedModel) else QuantizedModel.from_model(model)
    return [fixed_infer(getattr(c, "samples", c), qm, trace) for c in clips]


# Functions executed per sample at inference time; checked structurally for
# multiply/divide operators by the test suite.
RUNTIME_FUNCTIONS = (fx_fir_mp, fixed_energies, fixed_kernel, _classify, fixed_pipeline, _windows)
