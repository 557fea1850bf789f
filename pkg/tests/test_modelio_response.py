import json
import math

import numpy as np
import pytest

from mpinfilter.fixedpoint.arith import FixedPointFormat
from mpinfilter.modelio import (
    SCHEMA_VERSION,
    ModelFileError,
    load_model,
    model_from_dict,
    model_to_dict,
    save_model,
)
from mpinfilter.response import CSV_HEADER, chirp_response, linear_chirp
from mpinfilter.trainer import quantize_model


# --- model file -------------------------------------------------------------------


def test_round_trip_is_bit_exact(tmp_path, synth_model):
    path = save_model(synth_model, tmp_path / "m.json")
    again = load_model(path)
    assert again == synth_model
    assert np.array_equal(again.w_plus, synth_model.w_plus)
    assert np.array_equal(again.bank.bp_coeffs, synth_model.bank.bp_coeffs)


def test_quantized_round_trip(tmp_path, synth_model):
    q = quantize_model(synth_model, 8)
    again = load_model(save_model(q, tmp_path / "q.json"))
    assert again == q and again.quant == q.quant


def test_schema_fields(synth_model):
    d = model_to_dict(synth_model)
    assert d["format"] == "mpinfilter-model" and d["schema_version"] == SCHEMA_VERSION
    assert set(d) >= {"filterbank", "standardization", "classifier", "gamma", "feature_mode", "quant"}
    json.dumps(d, allow_nan=False)


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda d: d.update(format="other"), "format"),
        (lambda d: d.update(schema_version=99), "version"),
        (lambda d: d.pop("classifier"), "classifier"),
        (lambda d: d["classifier"].update(b_plus=math.inf), "finite"),
    ],
)
def test_invalid_files_rejected(synth_model, mutate, match):
    d = model_to_dict(synth_model)
    mutate(d)
    with pytest.raises(ModelFileError, match=match):
        model_from_dict(d)


def test_unparseable_file(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ModelFileError):
        load_model(tmp_path / "bad.json")


# --- chirp response --------------------------------------------------------------------


def test_linear_chirp_sweeps_linearly():
    x = linear_chirp(1.0, 100.0, 1100.0, 16000)
    assert x.size == 16000 and np.max(np.abs(x)) <= 1.0
    # zero crossings per 0.1 s grow with the instantaneous frequency
    zc = [np.sum(np.diff(np.sign(x[k : k + 1600])) != 0) for k in range(0, 16000, 1600)]
    assert all(b >= a for a, b in zip(zc, zc[1:]))


@pytest.fixture(scope="module")
def ridges(bank):
    return chirp_response(bank, "exact"), chirp_response(bank, "mp")


def test_exact_mode_gives_clean_diagonal_ridge(ridges, bank):
    exact, _ = ridges
    assert exact.is_monotone_ridge()
    # one 20 ms frame spans ~40 Hz of the sweep, which swamps the lowest bands
    upper = bank.center_freqs >= 500
    rel = np.abs(exact.peak_freqs() - bank.center_freqs) / bank.center_freqs
    assert np.max(rel[upper]) <= 0.05
    idx = exact.peak_filter_index()
    assert np.max(np.abs(idx - np.arange(30))) <= 1
    assert np.all(np.diff(idx) >= 0)


@pytest.mark.parametrize("frame", [0.02, 0.01, 0.005])
def test_one_second_chirp_ridge_is_monotone(bank, frame):
    assert chirp_response(bank, "exact", duration=1.0, frame_seconds=frame).is_monotone_ridge()


def test_group_delay_is_compensated(bank):
    from mpinfilter.response import group_delay

    # lowest octave: 7.5 band-pass samples at 500 Hz plus 2.5 samples per halving stage
    expect = 7.5 / 500 + sum(2.5 / (16000 / 2**s) for s in range(5))
    assert group_delay(bank, 29) == pytest.approx(expect)
    assert group_delay(bank, 0) == pytest.approx(7.5 / 16000)


def test_mp_mode_keeps_ridge_with_distortion(ridges):
    exact, mp = ridges
    assert np.max(np.abs(mp.peak_filter_index() - exact.peak_filter_index())) <= 1
    diff = sum(np.sum((a / a.max() - b / b.max()) ** 2) for a, b in zip(exact.gains, mp.gains))
    assert diff > 0


def test_zero_amplitude_chirp_gives_all_zero_table(bank):
    resp = chirp_response(bank, "mp", duration=0.5, amplitude=0.0)
    assert all(np.all(g == 0) for g in resp.gains)
    lines = resp.to_csv().splitlines()
    assert lines[0] == CSV_HEADER
    assert all(float(line.rsplit(",", 1)[1]) == 0.0 for line in lines[1:])
