"""End-to-end helpers behind the command line: run configuration, dataset sources,
training runs, quantization summaries and report tables."""
from __future__ import annotations

import copy
import csv
import io
import json
from dataclasses import replace
from pathlib import Path

import jsonschema
import numpy as np

from . import fpga
from .admm import TrainConfig, calibrate_activations, train, train_float
from .assignment import quantize_model
from .core import Flatten, MaxPool2x2, NetworkIR, ReLU, conv2d, dense, mlp
from .data import Dataset, load_idx_dataset, train_test
from .errors import FormatError, ValidationError
from .modelio import dumps_json, save_model
from .qmodel import FIXED_TAG, POT_TAG, SPOT_TAG, QuantizedModel, SchemeConfig, SchemeRatio
from .quantizers import AlphaPolicy
from .shift import infer

# scheme name -> (default ratio, uniform row tag)
SCHEMES = {
    "msp": ("65:30:5", None),
    "ms": ("65:35:0", None),
    "mp": ("0:95:5", None),
    "fixed": (None, FIXED_TAG),
    "spot": (None, SPOT_TAG),
    "pot": (None, POT_TAG),
}
SYNTHETIC = ("moons", "gaussians")

_TRAINING_PROPS = {
    "epochs": {"type": "integer", "minimum": 1},
    "pretrain_epochs": {"type": "integer", "minimum": 1},
    "batch_size": {"type": "integer", "minimum": 1},
    "lr": {"type": "number", "exclusiveMinimum": 0},
    "schedule": {"enum": ["step", "cosine"]},
    "momentum": {"type": "number", "minimum": 0, "maximum": 1},
    "l2": {"type": "number", "minimum": 0},
    "rho": {"type": "number", "minimum": 0},
    "rho_growth": {"type": "number", "minimum": 1},
    "rho_max": {"type": "number", "minimum": 0},
    "admm_period": {"type": "integer", "minimum": 1},
    "act_bits": {"type": "integer", "minimum": 1, "maximum": 16},
    "alpha": {"enum": ["max_abs", "least_squares"]},
    "reassign": {"type": "boolean"},
    "arch": {"enum": ["mlp", "cnn"]},
    "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}},
    "n_train": {"type": "integer", "minimum": 2},
    "n_test": {"type": "integer", "minimum": 1},
}

RUN_CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "RunConfig",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "scheme": {"enum": sorted(SCHEMES)},
        "ratio": {"type": "string", "pattern": r"^\d+:\d+:\d+$"},
        "bits": {"type": "integer", "minimum": 2, "maximum": 8},
        "m1": {"type": ["integer", "null"], "minimum": 1},
        "m2": {"type": ["integer", "null"], "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "device": {
            "oneOf": [
                {"enum": sorted(fpga.DEVICES)},
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["name", "dsp_total", "lut_total", "bram36_total", "ff_total"],
                    "properties": {
                        "name": {"type": "string"},
                        "dsp_total": {"type": "integer", "minimum": 1},
                        "lut_total": {"type": "integer", "minimum": 1},
                        "bram36_total": {"type": "number", "exclusiveMinimum": 0},
                        "ff_total": {"type": "integer", "minimum": 1},
                        "freq_mhz": {"type": "number", "exclusiveMinimum": 0},
                    },
                },
            ]
        },
        "training": {"type": "object", "additionalProperties": False, "properties": _TRAINING_PROPS},
        "paths": {
            "type": "object",
            "additionalProperties": False,
            "required": ["dataset"],
            "properties": {
                "dataset": {"type": "string"},
                "test_dataset": {"type": "string"},
                "out": {"type": "string"},
            },
        },
    },
    "required": ["paths"],
}

DEFAULT_TRAINING = {
    "epochs": 150,
    "batch_size": 32,
    "lr": 0.05,
    "schedule": "cosine",
    "momentum": 0.9,
    "l2": 1e-4,
    "rho": 1e-3,
    "rho_growth": 1.08,
    "rho_max": 5.0,
    "admm_period": 1,
    "act_bits": 4,
    "alpha": "least_squares",
    "reassign": False,
    "arch": "mlp",
    "hidden": [16, 16],
    "n_train": 1000,
    "n_test": 500,
}


def validate_run_config(cfg: dict) -> dict:
    """Schema check plus defaults; returns a fully populated copy."""
    try:
        jsonschema.validate(cfg, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ValidationError(f"run config invalid at {where}: {exc.message}") from None
    out = copy.deepcopy(cfg)
    out.setdefault("scheme", "msp")
    out.setdefault("bits", 4)
    out.setdefault("m1", None)
    out.setdefault("m2", None)
    out.setdefault("seed", 0)
    out.setdefault("device", "xc7z045")
    training = dict(DEFAULT_TRAINING)
    training.update(out.get("training", {}))
    training.setdefault("pretrain_epochs", training["epochs"])
    out["training"] = training
    out["ratio"] = str(resolve_ratio(out["scheme"], out.get("ratio")))
    return out


def load_run_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from None
    return validate_run_config(cfg)


def resolve_ratio(scheme, ratio_text=None) -> SchemeRatio:
    if scheme not in SCHEMES:
        raise ValidationError(f"unknown scheme {scheme!r}; choose from {sorted(SCHEMES)}")
    default, tag = SCHEMES[scheme]
    if isinstance(ratio_text, SchemeRatio):
        return ratio_text
    if ratio_text is not None:
        return SchemeRatio.parse(ratio_text)
    if tag is not None:
        # uniform schemes: report the share of the DSP/LUT datapaths
        return SchemeRatio(0, 1, 0) if tag == FIXED_TAG else SchemeRatio(1, 0, 0)
    return SchemeRatio.parse(default)


def uniform_tag(scheme):
    return SCHEMES[scheme][1]


def load_dataset(source: str, split="test", seed=0, limit=None, n_train=1000, n_test=500) -> Dataset:
    """``idx:DIR`` or a synthetic name (``moons``, ``gaussians``).

    Synthetic train/test splits come from one draw seeded by ``seed``.
    """
    if source.startswith("idx:"):
        d = Path(source[4:])
        if not d.exists():
            raise FormatError(f"dataset directory {d} does not exist")
        return load_idx_dataset(d, split, limit)
    if source in SYNTHETIC:
        tr, te = train_test(source, n_train, n_test, seed)
        ds = tr if split == "train" else te
        return ds.subset(limit) if limit else ds
    raise ValidationError(f"unknown dataset {source!r}; use idx:DIR, moons or gaussians")


def build_net(sample_shape, num_classes, arch="mlp", hidden=(16, 16), seed=0) -> NetworkIR:
    rng = np.random.default_rng(seed)
    if arch == "mlp":
        n_in = int(np.prod(sample_shape))
        net = mlp([n_in, *hidden, num_classes], rng)
        if len(sample_shape) > 1:
            net = NetworkIR((Flatten(),) + net.layers)
        return net
    if len(sample_shape) != 3:
        raise ValidationError("cnn architecture needs (C, H, W) samples")
    c, h, w = sample_shape
    width = hidden[0] if hidden else 8
    layers = [conv2d(c, width, 3, 1, 1, rng), ReLU(), MaxPool2x2(), Flatten()]
    flat = width * (h // 2) * (w // 2)
    sizes = [flat, *hidden[1:], num_classes]
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(dense(a, b, rng))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    return NetworkIR(tuple(layers))


def train_config(run: dict) -> TrainConfig:
    t = run["training"]
    scheme = run["scheme"]
    return TrainConfig(
        epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"], schedule=t["schedule"],
        momentum=t["momentum"], l2=t["l2"], rho=t["rho"], rho_growth=t["rho_growth"],
        rho_max=t["rho_max"], admm_period=t["admm_period"], seed=run["seed"], act_bits=t["act_bits"],
        ratio=SchemeRatio.parse(run["ratio"]),
        schemes=SchemeConfig(run["bits"], run["m1"], run["m2"]),
        refit_alpha=AlphaPolicy(t["alpha"]), reassign_each_update=t["reassign"],
        uniform_tag=uniform_tag(scheme),
    )


LOG_FIELDS = ("epoch", "task_loss", "penalty", "feasibility_gap", "train_acc", "test_acc")


def log_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for r in rows:
        w.writerow([r["epoch"]] + [repr(float(r[k])) for k in LOG_FIELDS[1:]])
    return buf.getvalue()


def run_training(run: dict, out_dir=None) -> dict:
    """Float pre-training, ADMM quantization training and engine cross-check.

    Writes ``float.msp``, ``model.msp``, ``train_log.csv`` and ``metrics.json``
    under ``out_dir`` when given. Returns the metrics.
    """
    t = run["training"]
    seed = run["seed"]
    source = run["paths"]["dataset"]
    tr = load_dataset(source, "train", seed, n_train=t["n_train"], n_test=t["n_test"])
    te_source = run["paths"].get("test_dataset", source)
    te = load_dataset(te_source, "test", seed, n_train=t["n_train"], n_test=t["n_test"])
    cfg = train_config(run)
    net = build_net(tr.sample_shape, max(tr.num_classes, te.num_classes), t["arch"], tuple(t["hidden"]), seed)
    pre = train_float(net, tr, replace(cfg, epochs=t["pretrain_epochs"]), te)
    res = train(pre.net, tr, cfg, te)
    shift = infer(res.model, te, "shift")
    ref = infer(res.model, te, "float_ref")
    last = res.log[-1]
    metrics = {
        "scheme": run["scheme"],
        "ratio": run["ratio"],
        "bits": run["bits"],
        "seed": seed,
        "dataset": source,
        "float_test_acc": pre.log[-1]["test_acc"],
        "test_acc": shift.accuracy,
        "feasibility_gap": last["feasibility_gap"],
        "final_rho": res.state.rho,
        "engines_agree": bool(np.array_equal(shift.predictions, ref.predictions)),
        "checksums": shift.checksums,
        "layer_counts": {str(i): q.counts() for i, q in sorted(res.model.layers.items())},
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_model(pre.net, out / "float.msp", tr.sample_shape)
        save_model(res.model, out / "model.msp", tr.sample_shape)
        (out / "train_log.csv").write_text(log_csv(res.log))
        (out / "metrics.json").write_bytes(dumps_json(metrics))
    return metrics


def quantize_summary(net: NetworkIR, model: QuantizedModel) -> dict:
    """Per-layer row counts and mean |W - Q| per scheme group."""
    layers = {}
    for i, q in sorted(model.layers.items()):
        W = net.layers[i].weight.reshape(net.layers[i].weight.shape[0], -1)
        err = np.abs(W - q.dequantized())
        groups = {}
        for tag in sorted(set(q.tags.tolist())):
            rows = q.tags == tag
            groups[tag] = {"rows": int(rows.sum()), "mean_abs_error": float(err[rows].mean())}
        layers[str(i)] = {"counts": q.counts(), "theta": q.theta, "groups": groups}
    return {"ratio": None if model.ratio is None else str(model.ratio), "layers": layers}


def quantize_net(net, scheme, ratio=None, bits=4, m1=None, m2=None, alpha="max_abs", calib=None, act_bits=4):
    ratio = resolve_ratio(scheme, ratio)
    config = SchemeConfig(bits, m1, m2, alpha=AlphaPolicy(alpha))
    act = None if calib is None else calibrate_activations(net, calib.samples, act_bits)
    return quantize_model(net, ratio, config, uniform_tag(scheme), act)


# -- report tables --------------------------------------------------------------

ABLATION_CONFIGS = (
    ("Fixed", "0:100:0", False),
    ("Fixed", "0:100:0", True),
    ("SPoT", "100:0:0", True),
    ("MS", "50:50:0", False),
    ("MS", "65:35:0", False),
    ("MS", "65:35:0", True),
    ("MSP", "60:35:5", True),
    ("MSP", "65:30:5", True),
)


def ablation_rows(device="xc7z045", cost=None, layers=None):
    """Modeled latency of each configuration; the last flag says whether the
    first and last layers are quantized (otherwise they run wide on DSPs)."""
    cost = cost or fpga.load_calibration()
    layers = layers or fpga.resnet18_profile()
    base = None
    rows = []
    for name, r, ends in ABLATION_CONFIGS:
        ratio = SchemeRatio.parse(r)
        plan = fpga.plan_cores(device, ratio, cost)
        prof = layers if ends else fpga.with_wide_ends(layers)
        perf = fpga.estimate_perf(prof, plan, ratio, device, cost)
        if base is None:
            base = perf.latency_ms
        rows.append({
            "scheme": name, "ratio": r, "first_last_quantized": ends,
            "latency_ms": perf.latency_ms, "speedup": base / perf.latency_ms,
        })
    return rows


def markdown_table(rows, columns) -> str:
    if not rows:
        return "| " + " | ".join(columns) + " |\n|" + "---|" * len(columns) + "\n"
    out = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    for r in rows:
        out.append("| " + " | ".join(_fmt(r.get(c)) for c in columns) + " |")
    return "\n".join(out) + "\n"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    return "" if v is None else str(v)


def rows_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


ACCURACY_COLUMNS = ("run", "scheme", "ratio", "bits", "dataset", "float_test_acc", "test_acc", "feasibility_gap", "engines_agree")
ABLATION_COLUMNS = ("scheme", "ratio", "first_last_quantized", "latency_ms", "speedup")
PERF_COLUMNS = ("device", "ratio", "lut", "lut_measured", "bram36", "bram36_measured", "ff", "ff_measured", "gops", "gops_measured")


def collect_runs(root) -> list:
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"{root}: not a directory")
    rows = []
    for m in sorted(root.glob("**/metrics.json")):
        try:
            d = json.loads(m.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{m}: {exc}") from None
        d = {k: d.get(k) for k in ACCURACY_COLUMNS if k != "run"}
        d["run"] = str(m.parent.relative_to(root))
        rows.append(d)
    return rows


def build_report(root) -> dict:
    """``{file name: text}`` for the accuracy, ablation and performance tables."""
    runs = collect_runs(root)
    ablation = ablation_rows()
    perf = fpga.calibration_table()
    files = {}
    for name, rows, cols in (
        ("accuracy", runs, ACCURACY_COLUMNS),
        ("ablation", ablation, ABLATION_COLUMNS),
        ("performance", perf, PERF_COLUMNS),
    ):
        files[f"{name}.csv"] = rows_csv(rows, cols)
        files[f"{name}.md"] = markdown_table(rows, cols)
    return files, len(runs)
