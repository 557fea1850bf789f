"""Saturating two's-complement arithmetic restricted to add/sub, shift and compare.

Values travel as raw integer codes (Python ints or ``int64`` arrays); a
:class:`FixedPointFormat` says how to read them.  Every primitive takes an
optional :class:`OpTrace` and bumps the matching counter, so a run can be
audited for multiplications after the fact.
"""

from __future__ import annotations

import io
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from ..mp import MPDomainError

__all__ = [
    "FixedPointFormat",
    "OpTrace",
    "AuditError",
    "SaturationWarning",
    "signed_width",
    "fx_add",
    "fx_sub",
    "fx_neg",
    "fx_shl",
    "fx_shr",
    "fx_max",
    "fx_relu",
    "fx_saturate",
    "fx_align",
    "fx_mp",
    "fx_mp_batch",
    "fx_mul",
    "csd_digits",
    "ShiftAddConstant",
    "audit",
    "mac_chain_widths",
    "mp_chain_widths",
    "FX_MP_ITERS",
]

FX_MP_ITERS = 24


class AuditError(AssertionError):
    """A multiplierless path used a multiplier."""


class SaturationWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class FixedPointFormat:
    """Signed Q format: ``word_bits`` total, ``frac_bits`` after the point."""

    word_bits: int
    frac_bits: int
    signed: bool = field(default=True, init=False)

    def __post_init__(self):
        if not 2 <= self.word_bits <= 32:
            raise ValueError(f"word_bits must be in [2, 32], got {self.word_bits}")
        if not 0 <= self.frac_bits < self.word_bits:
            raise ValueError(f"frac_bits must be in [0, word_bits), got {self.frac_bits}")

    @property
    def max_int(self) -> int:
        return (1 << (self.word_bits - 1)) - 1

    @property
    def min_int(self) -> int:
        return -(1 << (self.word_bits - 1))

    @property
    def lsb(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def max_value(self) -> float:
        return self.max_int * self.lsb

    @property
    def min_value(self) -> float:
        return self.min_int * self.lsb

    def quantize(self, values, warn: bool = True):
        """Round half away from zero, then saturate.  Returns integer codes."""
        v = np.asarray(values, dtype=float)
        scaled = np.ldexp(v, self.frac_bits)
        codes = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
        clipped = np.clip(codes, self.min_int, self.max_int)
        n_sat = int(np.count_nonzero(clipped != codes))
        if n_sat and warn:
            warnings.warn(f"{n_sat} value(s) saturated in Q{self.word_bits}.{self.frac_bits}", SaturationWarning, stacklevel=2)
        out = clipped.astype(np.int64)
        return int(out) if out.ndim == 0 else out

    def dequantize(self, codes):
        out = np.ldexp(np.asarray(codes, dtype=float), -self.frac_bits)
        return float(out) if out.ndim == 0 else out

    def round_trip(self, values, warn: bool = True):
        return self.dequantize(self.quantize(values, warn=warn))

    @classmethod
    def fit(cls, values, word_bits: int, max_frac: int | None = None) -> "FixedPointFormat":
        """Finest binary point for ``word_bits`` that still covers ``max|values|``."""
        peak = float(np.max(np.abs(values))) if np.size(values) else 0.0
        frac = word_bits - 1
        if peak > 0:
            frac = word_bits - 1 - max(math.ceil(math.log2(peak)), -64)
            # round-to-nearest can push the peak one code past max_int
            while frac > 0 and round(peak * 2.0**frac) > (1 << (word_bits - 1)) - 1:
                frac -= 1
        frac = min(frac, word_bits - 1)
        if max_frac is not None:
            frac = min(frac, max_frac)
        return cls(word_bits, max(frac, 0))

    def to_dict(self) -> dict:
        return {"word_bits": self.word_bits, "frac_bits": self.frac_bits}

    @classmethod
    def from_dict(cls, d) -> "FixedPointFormat":
        return cls(int(d["word_bits"]), int(d["frac_bits"]))

    def __str__(self):
        return f"Q{self.word_bits}.{self.frac_bits}"


OPS = ("add", "sub", "compare", "shift", "multiply")


@dataclass
class OpTrace:
    """Operation counters plus the widest value seen per pipeline stage."""

    add: int = 0
    sub: int = 0
    compare: int = 0
    shift: int = 0
    multiply: int = 0
    saturations: int = 0
    max_width_bits: dict = field(default_factory=lambda: defaultdict(int))

    def count(self, op: str, n: int = 1):
        setattr(self, op, getattr(self, op) + int(n))

    def observe(self, stage: str, codes):
        w = signed_width(codes)
        if w > self.max_width_bits[stage]:
            self.max_width_bits[stage] = w

    def merge(self, other: "OpTrace") -> "OpTrace":
        for op in OPS + ("saturations",):
            self.count(op, getattr(other, op))
        for stage in sorted(other.max_width_bits):
            self.max_width_bits[stage] = max(self.max_width_bits[stage], other.max_width_bits[stage])
        return self

    def counters(self) -> dict:
        return {op: getattr(self, op) for op in OPS + ("saturations",)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("kind,name,value\n")
        for op, n in self.counters().items():
            buf.write(f"op,{op},{n}\n")
        for stage in sorted(self.max_width_bits):
            buf.write(f"width,{stage},{self.max_width_bits[stage]}\n")
        return buf.getvalue()

    def render(self) -> str:
        lines = [f"{'operation':<12}{'count':>16}"]
        lines += [f"{op:<12}{n:>16,d}" for op, n in self.counters().items()]
        if self.max_width_bits:
            lines.append("")
            lines.append(f"{'stage':<24}{'max bits':>8}")
            lines += [f"{s:<24}{self.max_width_bits[s]:>8d}" for s in sorted(self.max_width_bits)]
        return "\n".join(lines)


def _size(a) -> int:
    return int(np.size(a))


def _note(trace, op, a):
    if trace is not None:
        trace.count(op, _size(a))


def signed_width(codes) -> int:
    """Two's-complement bits needed to hold every code in ``codes``."""
    a = np.asarray(codes, dtype=np.int64)
    if a.size == 0:
        return 0
    hi, lo = int(a.max()), int(a.min())
    return max(max(hi, 0).bit_length(), (-lo - 1).bit_length() if lo < 0 else 0) + 1


def _scalar_or_array(x):
    return int(x) if np.ndim(x) == 0 else x


def fx_saturate(codes, fmt: FixedPointFormat, trace: OpTrace | None = None, wrap: bool = False):
    a = np.asarray(codes, dtype=np.int64)
    if wrap:
        span = 1 << fmt.word_bits
        out = ((a - fmt.min_int) & (span - 1)) + fmt.min_int
    else:
        out = np.clip(a, fmt.min_int, fmt.max_int)
    if trace is not None:
        trace.count("compare", a.size + a.size)  # upper and lower bound
        trace.saturations += int(np.count_nonzero(out != a))
    return _scalar_or_array(out)


def fx_add(a, b, fmt: FixedPointFormat, trace: OpTrace | None = None, wrap: bool = False):
    """Saturating add of two codes in ``fmt``."""
    s = np.asarray(a, dtype=np.int64) + np.asarray(b, dtype=np.int64)
    _note(trace, "add", s)
    return fx_saturate(s, fmt, trace, wrap)


def fx_sub(a, b, fmt: FixedPointFormat, trace: OpTrace | None = None, wrap: bool = False):
    s = np.asarray(a, dtype=np.int64) - np.asarray(b, dtype=np.int64)
    _note(trace, "sub", s)
    return fx_saturate(s, fmt, trace, wrap)


def fx_neg(a, fmt: FixedPointFormat, trace: OpTrace | None = None):
    return fx_sub(0, a, fmt, trace)


def fx_shl(a, k: int, fmt: FixedPointFormat | None = None, trace: OpTrace | None = None):
    s = np.left_shift(np.asarray(a, dtype=np.int64), k)
    _note(trace, "shift", s)
    return fx_saturate(s, fmt, trace) if fmt is not None else _scalar_or_array(s)


def fx_shr(a, k: int, trace: OpTrace | None = None):
    """Arithmetic right shift (floor)."""
    s = np.right_shift(np.asarray(a, dtype=np.int64), k)
    _note(trace, "shift", s)
    return _scalar_or_array(s)


def fx_align(a, from_frac: int, to_frac: int, fmt: FixedPointFormat | None = None, trace=None):
    """Move codes between binary points with a shift."""
    if to_frac >= from_frac:
        return fx_shl(a, to_frac - from_frac, fmt, trace)
    return fx_shr(a, from_frac - to_frac, trace)


def fx_max(a, b, trace: OpTrace | None = None):
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    out = np.where(a >= b, a, b)
    _note(trace, "compare", out)
    return _scalar_or_array(out)


def fx_relu(a, trace: OpTrace | None = None):
    return fx_max(a, 0, trace)


def fx_mul(a, b, trace: OpTrace | None = None):
    """Plain integer multiply.  Exists for reference paths only; the audit flags it."""
    out = np.asarray(a, dtype=np.int64) * np.asarray(b, dtype=np.int64)
    _note(trace, "multiply", out)
    return _scalar_or_array(out)


def _ceil_log2_count(count):
    # priority encoder on the support counter
    c = np.asarray(count, dtype=np.int64)
    return np.where(c > 1, np.frexp(np.maximum(c - 1, 1).astype(float))[1], 0).astype(np.int64)


def fx_mp_batch(
    values,
    gamma,
    fmt: FixedPointFormat,
    iters: int = FX_MP_ITERS,
    trace: OpTrace | None = None,
    stage: str = "mp",
):
    """Row-wise integer MP using the shift/add water-filling iteration.

    ``values`` is an ``(R, n)`` array of codes in ``fmt``; ``gamma`` a code (or
    one per row).  The residual is accumulated without saturation (its width
    is recorded under ``stage``); the level itself saturates in ``fmt``.
    Iteration stops when every row's step has shifted down to zero.
    """
    v = np.asarray(values, dtype=np.int64)
    if v.ndim != 2 or v.shape[1] == 0:
        raise MPDomainError("fx_mp_batch expects a non-empty 2-D array")
    if iters < 1:
        raise MPDomainError("iters must be >= 1")
    R, n = v.shape
    g = np.broadcast_to(np.asarray(gamma, dtype=np.int64), (R,))
    if np.any(g < 0):
        raise MPDomainError("gamma must be non-negative")

    top = v.max(axis=1)
    if trace is not None:
        trace.count("compare", v.size - R)
    z = np.asarray(fx_sub(top, g, fmt, trace), dtype=np.int64).copy()
    # Rows still moving, compacted whenever some of them settle.
    rows = np.flatnonzero(g > 0)
    va, za, ga = v[rows], z[rows], g[rows]
    for _ in range(iters):
        if rows.size == 0:
            break
        vz = va - za[:, None]
        above = vz > 0
        # masked terms are non-negative, so the running sum peaks at its total
        excess = np.where(above, vz, 0).sum(axis=1)
        r = excess - ga
        if trace is not None:
            trace.count("sub", vz.size + rows.size)
            trace.count("compare", vz.size + rows.size)
            trace.count("add", vz.size)  # masked accumulate + support counter
            trace.observe(stage, excess)
            trace.observe(stage, r)
        step = np.right_shift(np.maximum(r, 0), _ceil_log2_count(above.sum(axis=1)))
        if trace is not None:
            trace.count("shift", rows.size)
        za = np.asarray(fx_add(za, step, fmt, trace), dtype=np.int64)
        settled = step == 0
        if settled.any():
            z[rows] = za
            keep = ~settled
            rows, va, za, ga = rows[keep], va[keep], za[keep], ga[keep]
    z[rows] = za
    return z


def fx_mp(values, gamma, fmt: FixedPointFormat, iters: int = FX_MP_ITERS, trace: OpTrace | None = None, stage="mp"):
    """Scalar wrapper around :func:`fx_mp_batch`."""
    v = np.asarray(values, dtype=np.int64).ravel()
    if v.size == 0:
        raise MPDomainError("MP needs at least one value")
    if int(gamma) < 0:
        raise MPDomainError("gamma must be non-negative")
    return int(fx_mp_batch(v[None, :], int(gamma), fmt, iters, trace, stage)[0])


def csd_digits(m: int) -> list[tuple[int, int]]:
    """Canonical signed-digit form of integer ``m`` as ``(sign, shift)`` pairs."""
    digits = []
    k = 0
    m = int(m)
    while m != 0:
        if m & 1:
            d = 2 - (m & 3)  # +1 or -1, chosen so no two adjacent digits are nonzero
            digits.append((d, k))
            m -= d
        m >>= 1
        k += 1
    return digits


@dataclass(frozen=True)
class ShiftAddConstant:
    """Multiplication by a fixed constant ``mantissa * 2**exponent`` via CSD.

    ``apply`` computes ``floor(x * mantissa * 2**exponent)`` (up to guard-bit
    truncation) using only shifts and adds.
    """

    mantissa: int
    exponent: int

    @classmethod
    def from_float(cls, c: float, bits: int) -> "ShiftAddConstant":
        if c == 0:
            return cls(0, 0)
        e = math.floor(math.log2(abs(c))) - (bits - 2)
        m = int(np.sign(c) * math.floor(abs(c) * 2.0**-e + 0.5))
        return cls(m, e)

    @property
    def value(self) -> float:
        return math.ldexp(self.mantissa, self.exponent)

    def apply(self, x, trace: OpTrace | None = None, guard: int = 8):
        xg = np.left_shift(np.asarray(x, dtype=np.int64), guard)
        _note(trace, "shift", xg)
        acc = np.zeros_like(xg)
        for sign, k in csd_digits(self.mantissa):
            term = np.left_shift(xg, k)
            _note(trace, "shift", term)
            acc = acc + term if sign > 0 else acc - term
            _note(trace, "add" if sign > 0 else "sub", term)
        e = self.exponent - guard
        out = np.left_shift(acc, e) if e >= 0 else np.right_shift(acc, -e)
        _note(trace, "shift", out)
        return _scalar_or_array(out)

    def to_list(self):
        return [self.mantissa, self.exponent]


def audit(trace: OpTrace, require_multiplierless: bool = True) -> str:
    """Render the counter table; raise :class:`AuditError` on any multiply."""
    verdict = "PASS" if trace.multiply == 0 else "FAIL"
    report = f"{trace.render()}\n\nmultiplierless audit: {verdict}"
    if require_multiplierless and trace.multiply:
        raise AuditError(f"{trace.multiply} multiplication(s) in a multiplierless path\n{report}")
    return report


def _clog2(n: int) -> int:
    return max(int(n) - 1, 0).bit_length()


def mac_chain_widths(input_bits: int, dims, weight_bits=None) -> list[int]:
    """Output width of each multiply-accumulate layer.

    A product needs the sum of its operand widths; accumulating ``d`` terms
    adds ``ceil(log2 d)`` bits.  Weights default to the width of the layer's
    input.
    """
    widths, w_in = [], input_bits
    for i, d in enumerate(dims):
        wb = w_in if weight_bits is None else (weight_bits[i] if np.ndim(weight_bits) else weight_bits)
        w_in = w_in + wb + _clog2(d)
        widths.append(w_in)
    return widths


def mp_chain_widths(input_bits: int, dims, weight_bits=None) -> list[int]:
    """Output width of each MP layer: one add of weight and input, then a
    ``d``-term accumulation in the water-filling residual."""
    widths, w_in = [], input_bits
    for i, d in enumerate(dims):
        wb = w_in if weight_bits is None else (weight_bits[i] if np.ndim(weight_bits) else weight_bits)
        w_in = max(w_in, wb) + 1 + _clog2(d)
        widths.append(w_in)
    return widths
