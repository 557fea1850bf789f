"""Margin propagation (MP) primitive.

``MP(v, gamma)`` is the water level ``z`` at which the mass of ``v`` above
``z`` equals ``gamma``::

    sum_i max(v_i - z, 0) == gamma

It replaces the log-sum-exp / multiply-accumulate of a conventional
inner product by sorting, additions and comparisons.  This module holds the
exact solver, a shift/add iterative solver, the subgradient used for
training and the differential-rail inner product built on top of them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "MPDomainError",
    "MPInput",
    "DifferentialVector",
    "MPGradient",
    "mp_exact",
    "mp_exact_batch",
    "mp_hw",
    "mp_hw_trace",
    "mp_gradient",
    "mp_inner_product",
    "mp_inner_product_batch",
    "residual",
    "DEFAULT_HW_ITERS",
]

DEFAULT_HW_ITERS = 16


class MPDomainError(ValueError):
    """Raised for inputs outside the domain of the MP operator."""


@dataclass(frozen=True)
class MPInput:
    values: np.ndarray
    gamma: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if values.size == 0:
            raise MPDomainError("MP needs at least one value")
        if not np.all(np.isfinite(values)):
            raise MPDomainError("MP values must be finite")
        gamma = float(self.gamma)
        if not np.isfinite(gamma) or gamma < 0:
            raise MPDomainError(f"gamma must be a finite non-negative number, got {self.gamma!r}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "gamma", gamma)


@dataclass(frozen=True)
class DifferentialVector:
    """Signed vector carried on two rails, ``value = plus - minus``."""

    plus: np.ndarray
    minus: np.ndarray

    def __post_init__(self):
        plus = np.asarray(self.plus, dtype=float).ravel()
        minus = np.asarray(self.minus, dtype=float).ravel()
        if plus.shape != minus.shape:
            raise MPDomainError(f"rail length mismatch: {plus.size} vs {minus.size}")
        plus.setflags(write=False)
        minus.setflags(write=False)
        object.__setattr__(self, "plus", plus)
        object.__setattr__(self, "minus", minus)

    @classmethod
    def encode(cls, x) -> "DifferentialVector":
        # x+ = x, x- = -x; decode gives 2x, which MP's inner product absorbs.
        x = np.asarray(x, dtype=float)
        return cls(x, -x)

    def decode(self) -> np.ndarray:
        return self.plus - self.minus

    def __len__(self):
        return self.plus.size


@dataclass(frozen=True)
class MPGradient:
    partials: np.ndarray
    support_size: int


def _as_input(values, gamma) -> MPInput:
    if isinstance(values, MPInput):
        return values
    return MPInput(values, gamma)


def residual(values, z, gamma) -> float:
    """``sum(max(v - z, 0)) - gamma``; zero at the MP solution."""
    v = np.asarray(values, dtype=float)
    return float(np.maximum(v - z, 0.0).sum() - gamma)


def mp_exact(values, gamma=None) -> float:
    """Exact reverse water-filling.

    Accepts either an :class:`MPInput` or ``(values, gamma)``.

    >>> mp_exact([3.0, 1.0, 2.0], 1.0)
    2.0
    """
    inp = _as_input(values, gamma)
    v, g = inp.values, inp.gamma
    if g == 0.0:
        return float(v.max())
    s = np.sort(v)[::-1]
    csum = np.cumsum(s)
    k = np.arange(1, s.size + 1)
    levels = (csum - g) / k
    # The active set is the largest prefix whose smallest member stays above
    # its own water level.
    n = int(np.count_nonzero(s > levels))
    return float(levels[n - 1])


def mp_exact_batch(values, gamma, return_support: bool = False):
    """Row-wise :func:`mp_exact` for a 2-D array.

    ``gamma`` is a scalar or one value per row.  With ``return_support`` the
    boolean mask ``values > z`` is returned as well.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim != 2 or v.shape[1] == 0:
        raise MPDomainError("mp_exact_batch expects a non-empty 2-D array")
    g = np.broadcast_to(np.asarray(gamma, dtype=float), (v.shape[0],))
    if np.any(g < 0) or not np.all(np.isfinite(g)):
        raise MPDomainError("gamma must be finite and non-negative")
    s = -np.sort(-v, axis=1)
    csum = np.cumsum(s, axis=1)
    k = np.arange(1, v.shape[1] + 1)
    levels = (csum - g[:, None]) / k
    n = np.count_nonzero(s > levels, axis=1)
    # gamma == 0 gives an empty strict prefix; the level of the top element is
    # exactly max(v) then.
    n = np.maximum(n, 1)
    z = levels[np.arange(v.shape[0]), n - 1]
    if return_support:
        return z, v > z[:, None]
    return z


def mp_gradient(values, gamma=None) -> MPGradient:
    """Subgradient of MP with respect to its values.

    Partial derivatives are ``1/|S|`` on the strict support ``S = {v_i > z}``
    and zero elsewhere.
    """
    inp = _as_input(values, gamma)
    if inp.gamma == 0.0:
        raise MPDomainError("MP gradient is undefined for gamma == 0")
    z = mp_exact(inp)
    support = inp.values > z
    n = int(support.sum())
    return MPGradient(support / n, n)


def _shift_for_count(count: int) -> int:
    # Smallest k with 2**k >= count: a priority encoder in hardware.
    return int(count - 1).bit_length() if count > 1 else 0


def mp_hw_trace(values, gamma=None, iters: int = DEFAULT_HW_ITERS) -> list[float]:
    """Iterates of the shift/add MP solver, starting guess included.

    The solver starts below the root at ``max(v) - gamma`` and repeatedly adds
    the residual shifted right by ``ceil(log2(|S|))``, with ``|S|`` the number
    of values above the current level.  Because the residual is convex and its
    slope never exceeds ``|S|`` in magnitude to the right of the iterate, a
    step never crosses the root: the residual stays non-negative and never
    increases.
    """
    inp = _as_input(values, gamma)
    if iters < 1:
        raise MPDomainError("iters must be >= 1")
    v, g = inp.values, inp.gamma
    top = float(v.max())
    if g == 0.0:
        return [top]
    z = top - g
    path = [z]
    for _ in range(iters):
        above = v > z
        r = float((v[above] - z).sum()) - g
        if r <= 0.0:
            break
        z = z + r / (1 << _shift_for_count(int(above.sum())))
        path.append(z)
    return path


def mp_hw(values, gamma=None, iters: int = DEFAULT_HW_ITERS) -> float:
    """Hardware-style MP solver using only add/sub, compare and shifts."""
    return mp_hw_trace(values, gamma, iters)[-1]


def _rails(h: DifferentialVector, x: DifferentialVector):
    if len(h) != len(x):
        raise MPDomainError(f"inner product length mismatch: {len(h)} vs {len(x)}")
    return (
        np.concatenate([h.plus + x.plus, h.minus + x.minus]),
        np.concatenate([h.plus + x.minus, h.minus + x.plus]),
    )


def mp_inner_product(h: DifferentialVector, x: DifferentialVector, gamma_f: float) -> float:
    """MP approximation of ``<h, x>`` on differential rails."""
    if not gamma_f > 0:
        raise MPDomainError("gamma_f must be positive")
    same, cross = _rails(h, x)
    return mp_exact(same, gamma_f) - mp_exact(cross, gamma_f)


def mp_inner_product_batch(h, windows, gamma_f: float) -> np.ndarray:
    """:func:`mp_inner_product` of taps ``h`` against every row of ``windows``.

    Uses the literal rail choice ``h+ = h, h- = -h, x+ = x, x- = -x``.
    """
    if not gamma_f > 0:
        raise MPDomainError("gamma_f must be positive")
    h = np.asarray(h, dtype=float)
    w = np.asarray(windows, dtype=float)
    if w.ndim != 2 or w.shape[1] != h.size:
        raise MPDomainError(f"windows must have {h.size} columns")
    a = h + w
    b = h - w
    same = np.concatenate([a, -a], axis=1)
    cross = np.concatenate([b, -b], axis=1)
    return mp_exact_batch(same, gamma_f) - mp_exact_batch(cross, gamma_f)
