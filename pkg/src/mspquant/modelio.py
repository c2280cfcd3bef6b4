"""Model files: a directory (or zip) of MSPT tensor containers, packed code rows
and a JSON manifest.

Layout::

    manifest.json
    layer<i>.weight.mspt / layer<i>.bias.mspt     float weights and biases
    layer<i>.alpha.mspt                           per-row scales (quantized layers)
    layer<i>.codes.bin                            packed code rows, row r at its own width

A path ending in ``.zip`` or ``.msp`` is written as a zip archive with fixed
timestamps so identical models give identical bytes.
"""
from __future__ import annotations

import io
import json
import zipfile
from fractions import Fraction
from pathlib import Path

import numpy as np

from .core import LAYER_KINDS, Conv2d, Dense, NetworkIR, tensor_from_bytes, tensor_to_bytes
from .errors import FormatError, ValidationError
from .qmodel import TAGS, ActQuant, QuantizedLayer, QuantizedModel, SchemeConfig, SchemeRatio
from .quantizers import build_levels, pack_codes, packed_row_bytes, unpack_codes

FORMAT = "mspquant-model"
VERSION = 1
MANIFEST = "manifest.json"
ZIP_SUFFIXES = (".zip", ".msp")
_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


def is_zip_path(path) -> bool:
    return Path(path).suffix.lower() in ZIP_SUFFIXES


def dumps_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def pack_rows(codes, row_bits) -> bytes:
    return b"".join(pack_codes(row, int(b)) for row, b in zip(codes, row_bits))


def unpack_rows(data, row_bits, cols):
    out = np.empty((len(row_bits), cols), dtype=np.int64)
    off = 0
    for r, b in enumerate(row_bits):
        n = packed_row_bytes(cols, int(b))
        if off + n > len(data):
            raise FormatError("packed code file is truncated")
        out[r] = unpack_codes(data[off:off + n], int(b), cols)
        off += n
    if off != len(data):
        raise FormatError(f"packed code file has {len(data) - off} trailing bytes")
    return out


def scheme_metadata(config: SchemeConfig, tags):
    """Per-tag scheme description: kind, width, SPoT split and normalisation."""
    meta = {}
    for t in sorted(set(tags)):
        s = config.scheme(t)
        lv = build_levels(s)
        meta[t] = {"kind": s.kind, "bits": s.bits, "m1": s.m1, "m2": s.m2, "n_raw": lv.n_raw}
    return meta


def model_files(model, input_shape=None) -> dict:
    """All files of a model as ``{name: bytes}``. ``model`` is a NetworkIR or QuantizedModel."""
    if isinstance(model, QuantizedModel):
        net, q = model.net, model
    elif isinstance(model, NetworkIR):
        net, q = model, None
    else:
        raise ValidationError(f"cannot save {type(model).__name__}")
    files = {}
    layers = []
    for i, layer in enumerate(net.layers):
        entry = {"kind": layer.kind}
        if layer.quantizable:
            entry["shape"] = list(layer.weight.shape)
            entry["weight"] = f"layer{i}.weight.mspt"
            files[entry["weight"]] = tensor_to_bytes(layer.weight)
            if layer.bias is not None:
                entry["bias"] = f"layer{i}.bias.mspt"
                files[entry["bias"]] = tensor_to_bytes(layer.bias)
            if layer.kind == "conv2d":
                entry["stride"], entry["pad"] = layer.stride, layer.pad
        layers.append(entry)
    manifest = {"format": FORMAT, "version": VERSION, "layers": layers}
    if input_shape is not None:
        manifest["input_shape"] = [int(d) for d in input_shape]
    if q is not None:
        qd = {}
        all_tags = set()
        for i, ql in sorted(q.layers.items()):
            bits = ql.row_bits()
            name = f"layer{i}"
            files[name + ".codes.bin"] = pack_rows(ql.codes, bits)
            files[name + ".alpha.mspt"] = tensor_to_bytes(ql.alpha)
            qd[str(i)] = {
                "tags": "".join(ql.tags.tolist()),
                "codes": name + ".codes.bin",
                "alpha": name + ".alpha.mspt",
                "theta": ql.theta,
                "counts": ql.counts(),
            }
            all_tags.update(ql.tags.tolist())
        manifest["quantized"] = qd
        manifest["config"] = q.config.to_dict()
        manifest["schemes"] = scheme_metadata(q.config, all_tags)
        manifest["ratio"] = None if q.ratio is None else str(q.ratio)
        manifest["ratio_fractions"] = None if q.ratio is None else [
            [v.numerator, v.denominator] for v in (q.ratio.spot_frac, q.ratio.fixed_frac, q.ratio.eight_frac)
        ]
        manifest["act"] = None if q.act is None else q.act.to_dict()
        manifest["finalized"] = bool(q.finalized)
    files[MANIFEST] = dumps_json(manifest)
    return files


def write_files(path, files: dict):
    path = Path(path)
    if is_zip_path(path):
        path.parent.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
            for name in sorted(files):
                info = zipfile.ZipInfo(name, date_time=_ZIP_TIME)
                info.compress_type = zipfile.ZIP_DEFLATED
                info.external_attr = 0o644 << 16
                zf.writestr(info, files[name])
        path.write_bytes(buf.getvalue())
    else:
        path.mkdir(parents=True, exist_ok=True)
        for name in sorted(files):
            (path / name).write_bytes(files[name])
    return path


def save_model(model, path, input_shape=None):
    return write_files(path, model_files(model, input_shape))


def read_files(path) -> dict:
    path = Path(path)
    if path.is_dir():
        return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.is_file()}
    if not path.exists():
        raise FormatError(f"{path}: no such model")
    try:
        with zipfile.ZipFile(path) as zf:
            return {n: zf.read(n) for n in zf.namelist()}
    except zipfile.BadZipFile:
        raise FormatError(f"{path}: neither a model directory nor a zip archive") from None


def _get(files, name):
    if name not in files:
        raise FormatError(f"model file {name!r} is missing")
    return files[name]


def _layer(entry, files):
    kind = entry.get("kind")
    if kind not in LAYER_KINDS:
        raise FormatError(f"unknown layer kind {kind!r} in manifest")
    if kind not in ("dense", "conv2d"):
        return LAYER_KINDS[kind]()
    w = tensor_from_bytes(_get(files, entry["weight"]))
    if list(w.shape) != list(entry.get("shape", w.shape)):
        raise FormatError(f"weight {entry['weight']} has shape {w.shape}, manifest says {entry['shape']}")
    b = tensor_from_bytes(_get(files, entry["bias"])) if "bias" in entry else None
    if kind == "dense":
        return Dense(w, b)
    return Conv2d(w, b, int(entry.get("stride", 1)), int(entry.get("pad", 0)))


def load_model(path):
    """Returns ``(model, manifest)``: a QuantizedModel if codes are present, else a NetworkIR."""
    files = read_files(path)
    try:
        manifest = json.loads(_get(files, MANIFEST))
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad manifest: {exc}") from None
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise FormatError(f"unsupported model format {manifest.get('format')!r} v{manifest.get('version')}")
    net = NetworkIR(tuple(_layer(e, files) for e in manifest["layers"]))
    if "quantized" not in manifest:
        return net, manifest
    config = SchemeConfig.from_dict(manifest["config"])
    qlayers = {}
    for key, qd in manifest["quantized"].items():
        i = int(key)
        tags = np.array(list(qd["tags"]), dtype="<U1")
        if not set(tags.tolist()) <= set(TAGS):
            raise FormatError(f"layer {i}: unknown row tags in {qd['tags']!r}")
        layer = net.layers[i]
        R = layer.weight.shape[0]
        C = int(np.prod(layer.weight.shape[1:]))
        if len(tags) != R:
            raise FormatError(f"layer {i}: {len(tags)} tags for {R} rows")
        alpha = tensor_from_bytes(_get(files, qd["alpha"]))
        bits = [config.scheme(t).bits for t in tags]
        codes = unpack_rows(_get(files, qd["codes"]), bits, C)
        qlayers[i] = QuantizedLayer(tags, alpha, codes, qd.get("theta"), config)
    ratio = None
    if manifest.get("ratio_fractions"):
        ratio = SchemeRatio(*(Fraction(n, d) for n, d in manifest["ratio_fractions"]))
    act = ActQuant.from_dict(manifest["act"]) if manifest.get("act") else None
    model = QuantizedModel.from_layers(net, qlayers, config, ratio, act, bool(manifest.get("finalized", True)))
    return model, manifest
