"""Command line: ``mspquant {quantize,train,infer,estimate,report,schema}``.

Exit codes: 0 success, 2 invalid input, 3 numeric failure, 4 I/O or format error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import fpga, pipeline
from .errors import FormatError, MSPError, ValidationError
from .modelio import dumps_json, load_model, save_model
from .qmodel import QuantizedModel, SchemeRatio
from .shift import ENGINES, infer

log = logging.getLogger("mspquant")


def _ratio(text):
    return SchemeRatio.parse(text)


def _write(path, data: bytes):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(data)


def cmd_quantize(args):
    net, manifest = load_model(args.model_in)
    if isinstance(net, QuantizedModel):
        raise ValidationError(f"{args.model_in} is already quantized")
    calib = None
    if args.calib:
        calib = pipeline.load_dataset(args.calib, args.split, args.seed, args.calib_samples)
    model = pipeline.quantize_net(
        net, args.scheme, args.ratio, args.bits, args.m1, args.m2, args.alpha, calib, args.act_bits
    )
    save_model(model, args.model_out, manifest.get("input_shape"))
    summary = pipeline.quantize_summary(net, model)
    summary["scheme"] = args.scheme
    text = dumps_json(summary)
    if args.summary:
        _write(args.summary, text)
    sys.stdout.write(text.decode())
    return 0


def cmd_train(args):
    run = pipeline.load_run_config(args.config)
    if args.seed is not None:
        run["seed"] = args.seed
    out = args.out or run["paths"].get("out")
    if out is None:
        raise ValidationError("no output directory: pass --out or set paths.out")
    metrics = pipeline.run_training(run, out)
    print(f"float test acc {metrics['float_test_acc']:.4f}  quantized test acc {metrics['test_acc']:.4f}  "
          f"feasibility gap {metrics['feasibility_gap']:.3g}  engines agree: {str(metrics['engines_agree']).lower()}")
    return 0


def cmd_infer(args):
    model, _ = load_model(args.model)
    if not isinstance(model, QuantizedModel):
        raise ValidationError(f"{args.model} holds a float model; quantize it first")
    data = pipeline.load_dataset(args.dataset, args.split, args.seed, args.limit)
    res = infer(model, data, args.engine)
    other = infer(model, data, "float_ref" if args.engine == "shift" else "shift")
    agree = bool(np.array_equal(res.predictions, other.predictions))
    print(f"accuracy: {res.accuracy:.6f} ({len(data)} samples, engine {args.engine})")
    print(f"engines agree: {str(agree).lower()}")
    if args.out:
        d = res.to_dict()
        d["engines_agree"] = agree
        d["dataset"] = args.dataset
        _write(args.out, dumps_json(d))
    return 0 if agree else 3


def _profile(args):
    if args.model:
        model, manifest = load_model(args.model)
        net = model.net if isinstance(model, QuantizedModel) else model
        shape = manifest.get("input_shape")
        if shape is None:
            raise ValidationError(f"{args.model} does not record its input shape")
        ratio = model.ratio if isinstance(model, QuantizedModel) else None
        return fpga.network_profile(net, shape), ratio
    return fpga.resnet18_profile(), None


def cmd_estimate(args):
    layers, model_ratio = _profile(args)
    ratio = args.ratio or model_ratio or pipeline.resolve_ratio("msp")
    cost = fpga.load_calibration(args.calibration)
    if args.wide_ends:
        layers = fpga.with_wide_ends(layers)
    report = fpga.estimate_report(args.device, ratio, layers, cost)
    text = dumps_json(report)
    if args.out:
        _write(args.out, text)
    if args.csv:
        _write(args.csv, fpga.perf_csv([report]).encode())
    sys.stdout.write(text.decode())
    return 0


def cmd_report(args):
    files, n_runs = pipeline.build_report(args.runs)
    if n_runs == 0:
        print(f"warning: no runs with metrics.json under {args.runs}; accuracy table is empty", file=sys.stderr)
    out = Path(args.out) if args.out else Path(args.runs) / "report"
    for name, text in sorted(files.items()):
        _write(out / name, text.encode())
    for name in ("accuracy.md", "ablation.md", "performance.md"):
        print(f"## {name[:-3]}\n")
        print(files[name])
    return 0


def cmd_schema(args):
    sys.stdout.write(dumps_json(pipeline.RUN_CONFIG_SCHEMA).decode())
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="mspquant", description="Mixed-scheme row-wise quantization toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="post-training quantization of a float model")
    q.add_argument("model_in")
    q.add_argument("model_out")
    q.add_argument("--scheme", choices=sorted(pipeline.SCHEMES), default="msp")
    q.add_argument("--ratio", help="SPoT:Fixed4:Fixed8 integer percentages, e.g. 65:30:5")
    q.add_argument("--bits", type=int, default=4)
    q.add_argument("--m1", type=int)
    q.add_argument("--m2", type=int)
    q.add_argument("--alpha", choices=("max_abs", "least_squares"), default="max_abs")
    q.add_argument("--calib", help="dataset for activation clip calibration (idx:DIR or moons)")
    q.add_argument("--calib-samples", type=int, default=256)
    q.add_argument("--split", default="train")
    q.add_argument("--act-bits", type=int, default=4)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--summary", help="also write the JSON summary here")
    q.set_defaults(func=cmd_quantize)

    t = sub.add_parser("train", help="float pre-training then ADMM quantization training")
    t.add_argument("config", help="RunConfig JSON (see `mspquant schema`)")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="evaluate a quantized model")
    i.add_argument("model")
    i.add_argument("--engine", choices=ENGINES, default="shift")
    i.add_argument("--dataset", required=True, help="idx:DIR, moons or gaussians")
    i.add_argument("--split", default="test")
    i.add_argument("--limit", type=int)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("estimate", help="FPGA resource and throughput estimate")
    e.add_argument("model", nargs="?", help="model file; default is a ResNet-18 MAC profile")
    e.add_argument("--device", default="xc7z045", choices=sorted(fpga.DEVICES))
    e.add_argument("--ratio")
    e.add_argument("--calibration", help="cost model JSON (default: shipped calibration)")
    e.add_argument("--wide-ends", action="store_true", help="run first/last layers unquantized")
    e.add_argument("--out")
    e.add_argument("--csv")
    e.set_defaults(func=cmd_estimate)

    r = sub.add_parser("report", help="accuracy, ablation and performance tables")
    r.add_argument("runs")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("schema", help="print the RunConfig JSON schema")
    s.set_defaults(func=cmd_schema)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if getattr(args, "ratio", None) is not None:
            args.ratio = _ratio(args.ratio)
        return args.func(args)
    except MSPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return FormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
