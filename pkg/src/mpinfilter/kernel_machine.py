"""MP-domain kernel machine readout.

The linear decision ``w.K + b`` is evaluated on differential rails as
``z+ - z-`` where both scores are MP water levels over weight/kernel sums,
then normalized by a second two-input MP so that ``p+`` and ``p-`` act like
class shares.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .filterbank import (
    DEFAULT_GAMMA_F,
    FilterBankModel,
    KernelVector,
    StandardizationStats,
    extract_kernel,
)
from .fixedpoint.arith import FixedPointFormat, OpTrace
from .mp import MPDomainError, mp_exact, mp_exact_batch

__all__ = [
    "GAMMA_N",
    "TrainedModel",
    "Decision",
    "score_multisets",
    "score",
    "score_batch",
    "decide",
    "decide_batch",
    "infer",
    "linear_reference",
]

GAMMA_N = 1.0

INFER_MODES = ("exact", "mp", "fixed")


def _vec(a) -> np.ndarray:
    a = np.array(a, dtype=float).ravel()
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TrainedModel:
    w_plus: np.ndarray
    w_minus: np.ndarray
    b_plus: float
    b_minus: float
    gamma1: float
    stats: StandardizationStats
    bank: FilterBankModel
    gamma_f: float = DEFAULT_GAMMA_F
    gamma_n: float = GAMMA_N
    quant: FixedPointFormat | None = None
    feature_mode: str = "mp"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        wp, wm = _vec(self.w_plus), _vec(self.w_minus)
        P = self.bank.num_filters
        if wp.size != P or wm.size != P or self.stats.mu.size != P:
            raise ValueError(
                f"model dimension mismatch: bank has {P} filters, weights {wp.size}/{wm.size}, stats {self.stats.mu.size}"
            )
        if not self.gamma1 > 0 or not self.gamma_f > 0 or not self.gamma_n > 0:
            raise ValueError("gamma parameters must be positive")
        if self.feature_mode not in ("exact", "mp"):
            raise ValueError(f"feature_mode must be 'exact' or 'mp', got {self.feature_mode!r}")
        object.__setattr__(self, "w_plus", wp)
        object.__setattr__(self, "w_minus", wm)
        object.__setattr__(self, "b_plus", float(self.b_plus))
        object.__setattr__(self, "b_minus", float(self.b_minus))
        object.__setattr__(self, "gamma1", float(self.gamma1))
        object.__setattr__(self, "gamma_f", float(self.gamma_f))
        object.__setattr__(self, "gamma_n", float(self.gamma_n))

    @property
    def num_filters(self) -> int:
        return self.w_plus.size

    def swapped(self) -> "TrainedModel":
        """Model with the positive and negative rails exchanged."""
        return replace(self, w_plus=self.w_minus, w_minus=self.w_plus, b_plus=self.b_minus, b_minus=self.b_plus)

    def __eq__(self, other):
        if not isinstance(other, TrainedModel):
            return NotImplemented
        return (
            np.array_equal(self.w_plus, other.w_plus)
            and np.array_equal(self.w_minus, other.w_minus)
            and (self.b_plus, self.b_minus, self.gamma1, self.gamma_f, self.gamma_n)
            == (other.b_plus, other.b_minus, other.gamma1, other.gamma_f, other.gamma_n)
            and self.stats == other.stats
            and self.bank == other.bank
            and self.quant == other.quant
            and self.feature_mode == other.feature_mode
        )

    __hash__ = None


@dataclass(frozen=True)
class Decision:
    p: float
    p_plus: float
    p_minus: float
    label: int  # 1 positive, 0 negative

    def csv_row(self, clip_id: str) -> str:
        return f"{clip_id},{float(self.p)!r},{float(self.p_plus)!r},{float(self.p_minus)!r},{int(self.label)}"

    CSV_HEADER = "clip_id,p,p_plus,p_minus,label"


def _phi(phi) -> np.ndarray:
    return phi.phi if isinstance(phi, KernelVector) else np.asarray(phi, dtype=float)


def score_multisets(phi, w_plus, w_minus, b_plus, b_minus):
    """The two MP operands for kernel rails ``K+ = phi``, ``K- = -phi``.

    Order is fixed: ``w+`` block, ``w-`` block, bias.
    """
    k = _phi(phi)
    w_plus = np.asarray(w_plus, dtype=float)
    w_minus = np.asarray(w_minus, dtype=float)
    if k.shape[-1] != w_plus.size or w_minus.size != w_plus.size:
        raise MPDomainError(f"kernel has {k.shape[-1]} entries, weights have {w_plus.size}/{w_minus.size}")
    lead = k.shape[:-1]
    bp = np.broadcast_to(b_plus, lead + (1,))
    bm = np.broadcast_to(b_minus, lead + (1,))
    plus_set = np.concatenate([w_plus + k, w_minus - k, bp], axis=-1)
    minus_set = np.concatenate([w_plus - k, w_minus + k, bm], axis=-1)
    return plus_set, minus_set


def score(phi, model: TrainedModel) -> tuple[float, float]:
    """``(z+, z-)`` for one kernel vector."""
    plus_set, minus_set = score_multisets(phi, model.w_plus, model.w_minus, model.b_plus, model.b_minus)
    return mp_exact(plus_set, model.gamma1), mp_exact(minus_set, model.gamma1)


def score_batch(Phi, w_plus, w_minus, b_plus, b_minus, gamma1, return_support=False):
    plus_set, minus_set = score_multisets(np.atleast_2d(Phi), w_plus, w_minus, b_plus, b_minus)
    zp = mp_exact_batch(plus_set, gamma1, return_support)
    zm = mp_exact_batch(minus_set, gamma1, return_support)
    return zp, zm


def decide(z_plus: float, z_minus: float, gamma_n: float = GAMMA_N) -> Decision:
    """Normalize the score pair and read out ``p = p+ - p-``.

    ``p == 0`` is reported as the negative class.
    """
    z = mp_exact([z_plus, z_minus], gamma_n)
    p_plus = max(z_plus - z, 0.0)
    p_minus = max(z_minus - z, 0.0)
    p = p_plus - p_minus
    return Decision(p, p_plus, p_minus, int(p > 0))


def decide_batch(z_plus, z_minus, gamma_n: float = GAMMA_N):
    """Vectorized :func:`decide`; returns ``(p, p_plus, p_minus, z)`` arrays."""
    zz = np.stack([np.asarray(z_plus, float), np.asarray(z_minus, float)], axis=1)
    z = mp_exact_batch(zz, gamma_n)
    p_plus = np.maximum(zz[:, 0] - z, 0.0)
    p_minus = np.maximum(zz[:, 1] - z, 0.0)
    return p_plus - p_minus, p_plus, p_minus, z


def infer(x, model: TrainedModel, mode: str = "mp", trace: OpTrace | None = None) -> Decision:
    """End-to-end decision for one clip at the bank's base rate.

    ``exact`` and ``mp`` select the filtering arithmetic (float); ``fixed``
    runs the integer pipeline and needs a quantized model.
    """
    if mode == "fixed":
        from .fixedpoint.pipeline import fixed_infer

        return fixed_infer(x, model, trace=trace)
    if mode not in INFER_MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {INFER_MODES}")
    phi = extract_kernel(x, model.bank, model.stats, mode, model.gamma_f)
    return decide(*score(phi, model), model.gamma_n)


def linear_reference(phi, w, b: float, trace: OpTrace | None = None) -> float:
    """Plain multiply-accumulate ``w.phi + b``.  Test oracle only."""
    k = _phi(phi)
    w = np.asarray(w, dtype=float)
    if k.shape != w.shape:
        raise MPDomainError(f"dimension mismatch: {k.shape} vs {w.shape}")
    if trace is not None:
        trace.count("multiply", k.size)
        trace.count("add", k.size)
    return float(np.dot(w, k) + b)
