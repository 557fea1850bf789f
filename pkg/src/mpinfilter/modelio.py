"""Versioned JSON model file.

Floats are written with Python's shortest round-trip representation, so
``load(save(m)) == m`` bit for bit.  Layout (``schema_version`` 1)::

    {
      "format": "mpinfilter-model",
      "schema_version": 1,
      "filterbank": {"config": {...}, "bp_coeffs": [[...]], "lp_coeffs": [[...]],
                     "center_freqs": [...], "band_edges": [[lo, hi], ...],
                     "octave_of": [...]},
      "standardization": {"mu": [...], "sigma": [...]},
      "classifier": {"w_plus": [...], "w_minus": [...], "b_plus": x, "b_minus": x},
      "gamma": {"gamma1": x, "gamma_n": x, "gamma_f": x},
      "feature_mode": "mp",
      "quant": null | {"word_bits": n, "frac_bits": n},
      "meta": {...}
    }
"""

from __future__ import annotations

import json
import math
from pathlib import Path

from .filterbank import FilterBankModel, StandardizationStats
from .fixedpoint.arith import FixedPointFormat
from .kernel_machine import TrainedModel

__all__ = ["SCHEMA_VERSION", "ModelFileError", "model_to_dict", "model_from_dict", "save_model", "load_model"]

FORMAT_TAG = "mpinfilter-model"
SCHEMA_VERSION = 1


class ModelFileError(ValueError):
    pass


def _finite(name, values):
    flat = values if isinstance(values, list) else [values]
    stack = list(flat)
    while stack:
        v = stack.pop()
        if isinstance(v, list):
            stack.extend(v)
        elif isinstance(v, float) and not math.isfinite(v):
            raise ModelFileError(f"field {name!r} holds a non-finite value")
    return values


def model_to_dict(model: TrainedModel) -> dict:
    return {
        "format": FORMAT_TAG,
        "schema_version": SCHEMA_VERSION,
        "filterbank": model.bank.to_dict(),
        "standardization": {"mu": model.stats.mu.tolist(), "sigma": model.stats.sigma.tolist()},
        "classifier": {
            "w_plus": model.w_plus.tolist(),
            "w_minus": model.w_minus.tolist(),
            "b_plus": model.b_plus,
            "b_minus": model.b_minus,
        },
        "gamma": {"gamma1": model.gamma1, "gamma_n": model.gamma_n, "gamma_f": model.gamma_f},
        "feature_mode": model.feature_mode,
        "quant": model.quant.to_dict() if model.quant is not None else None,
        "meta": model.meta,
    }


def _get(d, key, where):
    try:
        return d[key]
    except (KeyError, TypeError):
        raise ModelFileError(f"missing field {where}{key!r}") from None


def model_from_dict(d: dict) -> TrainedModel:
    if _get(d, "format", "") != FORMAT_TAG:
        raise ModelFileError(f"not a model file (format={d.get('format')!r})")
    version = _get(d, "schema_version", "")
    if version != SCHEMA_VERSION:
        raise ModelFileError(f"unsupported schema_version {version!r}; this build reads {SCHEMA_VERSION}")
    clf = _get(d, "classifier", "")
    gam = _get(d, "gamma", "")
    std = _get(d, "standardization", "")
    try:
        bank = FilterBankModel.from_dict(_get(d, "filterbank", ""))
        stats = StandardizationStats(
            _finite("mu", _get(std, "mu", "standardization.")), _finite("sigma", _get(std, "sigma", "standardization."))
        )
        quant = d.get("quant")
        return TrainedModel(
            w_plus=_finite("w_plus", _get(clf, "w_plus", "classifier.")),
            w_minus=_finite("w_minus", _get(clf, "w_minus", "classifier.")),
            b_plus=_finite("b_plus", _get(clf, "b_plus", "classifier.")),
            b_minus=_finite("b_minus", _get(clf, "b_minus", "classifier.")),
            gamma1=_get(gam, "gamma1", "gamma."),
            gamma_n=_get(gam, "gamma_n", "gamma."),
            gamma_f=_get(gam, "gamma_f", "gamma."),
            stats=stats,
            bank=bank,
            quant=FixedPointFormat.from_dict(quant) if quant is not None else None,
            feature_mode=d.get("feature_mode", "mp"),
            meta=dict(d.get("meta") or {}),
        )
    except ModelFileError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"invalid model file: {exc}") from exc


def save_model(model: TrainedModel, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(model_to_dict(model), indent=1, allow_nan=False) + "\n")
    return path


def load_model(path) -> TrainedModel:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{path}: not valid JSON ({exc})") from exc
    return model_from_dict(d)
