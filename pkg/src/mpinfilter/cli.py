"""Command-line front end.

Every command writes its tables as CSV files with a header row and finishes
by printing a result block to stdout::

    [result]
    {"command": "...", "status": "ok", ...}

The exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import IngestOptions, LabeledDataset, ingest, prepare_clip, read_wav
from .filterbank import DEFAULT_GAMMA_F, FilterBankConfig, FilterBankModel, design_bank
from .fixedpoint.arith import AuditError, OpTrace, audit
from .kernel_machine import Decision, infer
from .modelio import load_model, save_model
from .response import chirp_response
from .trainer import (
    TrainConfig,
    accuracy,
    bitwidth_sweep,
    compute_energies,
    geometric_schedule,
    predict,
    quantize_model,
    train,
)

log = logging.getLogger("mpinfilter")


class UsageError(ValueError):
    """Invalid flag or configuration value; exits with status 2."""


def _result(command: str, **fields) -> dict:
    block = {"command": command, "status": "ok"}
    block.update(fields)
    return block


def _print_result(block: dict) -> None:
    print("[result]")
    print(json.dumps(block, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def _write(path, text: str) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return str(path)


# ---------------------------------------------------------------- parsing


def parse_schedule(text: str, epochs: int) -> tuple:
    """``START:END`` (geometric over ``epochs``), ``G`` (constant) or ``E:G,E:G,...``."""
    text = text.strip()
    try:
        if "," in text or text.count(":") > 1:
            pairs = []
            for item in text.split(","):
                e, g = item.split(":")
                pairs.append((int(e), float(g)))
            return tuple(pairs)
        if ":" in text:
            a, b = (float(v) for v in text.split(":"))
            return tuple(geometric_schedule(a, b, epochs))
        return ((0, float(text)),)
    except ValueError as exc:
        raise UsageError(f"gamma1-schedule: cannot parse {text!r} ({exc})") from None


def _parse_widths(text: str) -> list[int]:
    try:
        widths = [int(w) for w in text.split(",") if w.strip()]
    except ValueError:
        raise UsageError(f"widths: expected comma-separated integers, got {text!r}") from None
    if not widths:
        raise UsageError("widths: empty list")
    return widths


def _train_config(args) -> TrainConfig:
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    values: dict = {}
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"config: cannot read {args.config} ({exc})") from None
        if not isinstance(cfg, dict):
            raise UsageError("config: expected a JSON object")
        for key, val in cfg.items():
            if key not in fields:
                raise UsageError(f"config: unknown field {key!r}")
            values[key] = val
    for key in ("learning_rate", "epochs", "batch_size", "gamma_f", "seed", "bits", "jobs", "feature_mode"):
        val = getattr(args, key, None)
        if val is not None:
            values[key] = val
    if getattr(args, "quant_aware", False):
        values["quant_aware"] = True
    sched = getattr(args, "gamma1_schedule", None) or values.pop("gamma1_schedule", None)
    if isinstance(sched, str):
        values["gamma1_schedule"] = parse_schedule(sched, int(values.get("epochs", TrainConfig.epochs)))
    elif sched is not None:
        values["gamma1_schedule"] = tuple(tuple(p) for p in sched)
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError, RuntimeError) as exc:
        raise UsageError(f"train config: {exc}") from None


def _load_bank(path) -> FilterBankModel:
    if not path:
        return design_bank()
    d = json.loads(Path(path).read_text())
    return FilterBankModel.from_dict(d.get("filterbank", d))


def _clips_from_inputs(inputs, split: str):
    """``(clip_id, samples, label or None)`` for WAV files and dataset archives."""
    out = []
    for item in inputs:
        p = Path(item)
        if p.suffix == ".npz":
            ds = LabeledDataset.load(p)
            idx = np.arange(len(ds)) if split == "all" else ds.indices(split)
            out += [(ds.clips[i].source_id, ds.clips[i].samples, int(ds.labels[i])) for i in idx]
        else:
            x, rate = read_wav(p)
            segs = prepare_clip(x, rate)
            if not segs:
                log.warning("%s: no audible segment", p)
            out += [(f"{p.stem}#{i}", s, None) for i, s in enumerate(segs)]
    return out


# ---------------------------------------------------------------- commands


def cmd_design_bank(args) -> dict:
    cfg = FilterBankConfig(
        filters_per_octave=args.filters_per_octave,
        num_octaves=args.octaves,
        freq_range=(args.f_low, args.f_high),
        align_peaks=not args.no_align,
    )
    bank = design_bank(cfg)
    out = _write(args.out, json.dumps({"filterbank": bank.to_dict()}, indent=1) + "\n")
    rows = ["filter,octave,rate_hz,center_hz,low_hz,high_hz"]
    for p in range(bank.num_filters):
        o = int(bank.octave_of[p])
        lo, hi = bank.band_edges[p]
        rows.append(f"{p},{o},{float(cfg.octave_rate(o))!r},{float(bank.center_freqs[p])!r},{float(lo)!r},{float(hi)!r}")
    table = _write(Path(args.out).with_suffix(".csv"), "\n".join(rows) + "\n")
    return _result("design-bank", bank=out, table=table, filters=bank.num_filters)


def cmd_ingest(args) -> dict:
    opts = IngestOptions(seed=args.seed, test_fraction=args.test_fraction, label_from=args.label_from)
    ds = ingest(args.root, args.positive, opts)
    ds.save(args.out)
    n_train, n_test = ds.indices("train").size, ds.indices("test").size
    return _result(
        "ingest", dataset=str(args.out), clips=len(ds), train=n_train, test=n_test, positives=int(ds.labels.sum())
    )


def _energies(ds, bank, mode, gamma_f, jobs):
    return compute_energies(ds.clips, bank, mode, gamma_f, jobs)


def cmd_train(args) -> dict:
    cfg = _train_config(args)
    ds = LabeledDataset.load(args.data)
    bank = _load_bank(args.bank)
    E = _energies(ds, bank, cfg.feature_mode, cfg.gamma_f, cfg.jobs)
    model, res = train(ds, bank, cfg, energies=E)
    save_model(model, args.out)
    log_path = _write(args.log or Path(args.out).with_suffix(".log.csv"), res.log_csv())
    p = predict(model, E)
    tr, te = ds.indices("train"), ds.indices("test")
    return _result(
        "train",
        model=str(args.out),
        log=log_path,
        best_epoch=res.best_epoch,
        final_loss=res.log[res.best_epoch][1],
        train_acc=accuracy(p[tr], ds.labels[tr]),
        test_acc=accuracy(p[te], ds.labels[te]) if te.size else None,
    )


def cmd_infer(args) -> dict:
    model = load_model(args.model)
    clips = _clips_from_inputs(args.inputs, args.split)
    if not clips:
        raise UsageError("infer: no clips found in the inputs")
    trace = OpTrace() if args.mode == "fixed" else None
    qm = None
    if args.mode == "fixed":
        from .fixedpoint.pipeline import QuantizedModel, fixed_infer

        qm = QuantizedModel.from_model(model)
    rows = [Decision.CSV_HEADER]
    correct = labelled = 0
    for cid, x, lab in clips:
        d = fixed_infer(x, qm, trace) if qm is not None else infer(x, model, args.mode)
        rows.append(d.csv_row(cid))
        if lab is not None:
            labelled += 1
            correct += int(d.label == lab)
    out = _write(args.out, "\n".join(rows) + "\n")
    block = _result("infer", decisions=out, mode=args.mode, clips=len(clips))
    if labelled:
        block["accuracy"] = correct / labelled
    if trace is not None:
        block["trace"] = _write(args.trace or Path(args.out).with_suffix(".trace.csv"), trace.to_csv())
        block["multiply"] = trace.multiply
    return block


def cmd_quantize(args) -> dict:
    model = load_model(args.model)
    q = quantize_model(model, args.bits, per_tensor=not args.exact_format)
    save_model(q, args.out)
    block = _result("quantize", model=str(args.out), bits=args.bits, weight_format=str(q.quant))
    if args.data:
        from .fixedpoint.pipeline import fixed_predict

        ds = LabeledDataset.load(args.data)
        idx = ds.indices(args.split) if args.split != "all" else np.arange(len(ds))
        clips = [ds.clips[i] for i in idx]
        labels = ds.labels[idx]
        pf = predict(model, compute_energies(clips, model.bank, model.feature_mode, model.gamma_f, args.jobs))
        pq = predict(q, compute_energies(clips, q.bank, q.feature_mode, q.gamma_f, args.jobs))
        fixed = np.array([d.p for d in fixed_predict(clips, q)])
        block.update(
            split=args.split,
            float_acc=accuracy(pf, labels),
            quantized_float_acc=accuracy(pq, labels),
            fixed_acc=accuracy(fixed, labels),
            fixed_float_agreement=float(np.mean((fixed > 0) == (pf > 0))),
        )
    return block


def cmd_sweep_bits(args) -> dict:
    cfg = _train_config(args)
    ds = LabeledDataset.load(args.data)
    model = load_model(args.model) if args.model else None
    bank = model.bank if model is not None else _load_bank(args.bank)
    rows, text = bitwidth_sweep(ds, bank, cfg, _parse_widths(args.widths), model=model)
    out = _write(args.out, text)
    return _result("sweep-bits", table=out, rows=[{"width": w, "train_acc": a, "test_acc": b} for w, a, b in rows])


def cmd_chirp_response(args) -> dict:
    bank = load_model(args.model).bank if args.model else _load_bank(args.bank)
    resp = chirp_response(
        bank, args.mode, args.gamma_f, duration=args.duration, f0=args.f0, f1=args.f1, amplitude=args.amplitude
    )
    out = _write(args.out, resp.to_csv())
    return _result(
        "chirp-response",
        table=out,
        mode=args.mode,
        monotone_ridge=resp.is_monotone_ridge(),
        peak_filter_index=resp.peak_filter_index().tolist(),
    )


def _trace_from_csv(path) -> OpTrace:
    trace = OpTrace()
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "kind,name,value":
        raise UsageError(f"trace: {path} is not a trace CSV")
    for line in lines[1:]:
        kind, name, value = line.split(",")
        if kind == "op":
            trace.count(name, int(value))
        elif kind == "width":
            trace.max_width_bits[name] = int(value)
    return trace


def cmd_audit(args) -> dict:
    if args.trace:
        trace = _trace_from_csv(args.trace)
    else:
        if not args.model or not args.inputs:
            raise UsageError("audit: give --trace, or --model with input clips")
        from .fixedpoint.pipeline import QuantizedModel, fixed_infer

        qm = QuantizedModel.from_model(load_model(args.model))
        trace = OpTrace()
        for _, x, _ in _clips_from_inputs(args.inputs, args.split):
            fixed_infer(x, qm, trace)
    if args.out:
        _write(args.out, trace.to_csv())
    report = audit(trace, require_multiplierless=False)
    print(report, file=sys.stderr)
    block = _result("audit", verdict="PASS" if trace.multiply == 0 else "FAIL", **trace.counters())
    block["max_width_bits"] = dict(sorted(trace.max_width_bits.items()))
    if trace.multiply:
        block["status"] = "failed"
        raise AuditError(json.dumps(block, sort_keys=True))
    return block


# ---------------------------------------------------------------- main


def _add_train_flags(p, schedule=True):
    p.add_argument("--config", help="JSON file with training-config fields")
    p.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    if schedule:
        p.add_argument(
            "--gamma1-schedule", help="START:END geometric, a constant, or explicit EPOCH:GAMMA,EPOCH:GAMMA,..."
        )
    p.add_argument("--gamma-f", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--bits", type=int)
    p.add_argument("--quant-aware", action="store_true")
    p.add_argument("--feature-mode", choices=("exact", "mp"))
    p.add_argument("--jobs", type=int)
    p.add_argument("--bank", help="filter-bank JSON from design-bank (default: built-in design)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mpinfilter", description="MP-domain in-filter audio classifier")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("design-bank", help="design the octave filter bank")
    p.add_argument("--filters-per-octave", type=int, default=5)
    p.add_argument("--octaves", type=int, default=6)
    p.add_argument("--f-low", type=float, default=FilterBankConfig.freq_range[0])
    p.add_argument("--f-high", type=float, default=FilterBankConfig.freq_range[1])
    p.add_argument("--no-align", action="store_true", help="skip cascade peak alignment")
    p.add_argument("--out", default="bank.json")
    p.set_defaults(func=cmd_design_bank)

    p = sub.add_parser("ingest", help="WAV corpus to a one-vs-all dataset archive")
    p.add_argument("root")
    p.add_argument("--positive", required=True, help="target class name")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--label-from", choices=("auto", "dir", "esc50", "fsdd"), default="auto")
    p.add_argument("--out", default="dataset.npz")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a kernel machine")
    p.add_argument("--data", required=True)
    _add_train_flags(p)
    p.add_argument("--out", default="model.json")
    p.add_argument("--log", help="training log CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="classify clips")
    p.add_argument("--model", required=True)
    p.add_argument("inputs", nargs="+", help="WAV files or dataset .npz archives")
    p.add_argument("--mode", choices=("exact", "mp", "fixed"), default="mp")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--out", default="decisions.csv")
    p.add_argument("--trace", help="operation trace CSV (fixed mode)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("quantize", help="round a model to a fixed-point word length")
    p.add_argument("--model", required=True)
    p.add_argument("--bits", type=int, default=8)
    p.add_argument("--exact-format", action="store_true", help="weights in Q<bits>.<bits-1> instead of a fitted point")
    p.add_argument("--data", help="dataset archive for a float/fixed comparison")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="model.q.json")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("sweep-bits", help="accuracy versus word length")
    p.add_argument("--data", required=True)
    p.add_argument("--widths", default="32,16,12,10,8,6,4")
    p.add_argument("--model", help="reuse a trained float model")
    _add_train_flags(p)
    p.add_argument("--out", default="sweep.csv")
    p.set_defaults(func=cmd_sweep_bits)

    p = sub.add_parser("chirp-response", help="per-filter gain over a linear chirp")
    p.add_argument("--bank")
    p.add_argument("--model", help="take the bank from a model file")
    p.add_argument("--mode", choices=("exact", "mp"), default="exact")
    p.add_argument("--gamma-f", type=float, default=DEFAULT_GAMMA_F)
    p.add_argument("--duration", type=float, default=4.0)
    p.add_argument("--f0", type=float, default=20.0)
    p.add_argument("--f1", type=float, default=7900.0)
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--out", default="chirp.csv")
    p.set_defaults(func=cmd_chirp_response)

    p = sub.add_parser("audit", help="multiplierless audit of the fixed-point pipeline")
    p.add_argument("--trace", help="trace CSV written by 'infer --mode fixed'")
    p.add_argument("--model")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--out", help="write the trace CSV")
    p.set_defaults(func=cmd_audit)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        block = args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        _print_result({"command": args.command, "status": "usage-error", "error": str(exc)})
        return 2
    except AuditError as exc:
        print("multiplierless audit failed", file=sys.stderr)
        _print_result(json.loads(str(exc)))
        return 1
    except Exception as exc:  # noqa: BLE001 - report any failure as a result block
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        _print_result({"command": args.command, "status": "error", "error": f"{type(exc).__name__}: {exc}"})
        return 1
    _print_result(block)
    return 0


if __name__ == "__main__":
    sys.exit(main())
