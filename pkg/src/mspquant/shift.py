"""Integer inference: SPoT/PoT rows by shift-add, fixed-point rows by integer multiply.

Activations are unsigned codes on a per-layer grid with step ``s_a``. Weight codes
carry integer numerators over a per-scheme denominator, so every row accumulates
exactly in int64 and is scaled to float once:

    out[n, r] = alpha[r] * s_a / denominator * sum_c a[n, c] * num[r, c] + bias[r]
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import nn
from .admm import calibrate_activations
from .core import NetworkIR
from .data import Dataset
from .errors import (
    EmptyDatasetError,
    OverflowRiskError,
    ShapeMismatchError,
    UnfinalizedModelError,
    ValidationError,
)
from .kernels import int_accumulate, shift_accumulate
from .qmodel import QuantizedLayer, QuantizedModel
from .quantizers import FIXED, LevelSet, QuantScheme, build_levels

ENGINES = ("float_ref", "shift")
MAX_FAN_IN = 1 << 20
_I64_MAX = (1 << 63) - 1
CALIBRATION_SAMPLES = 256


def spot_mac(a: int, code: int, levels: LevelSet) -> int:
    """Partial product of activation code ``a`` and a SPoT/PoT weight code using
    only shifts and one add: ``±((a << sh1) + (a << sh2))``."""
    a = int(a)
    if a < 0:
        raise ValidationError("activation codes are unsigned")
    neg, s1, s2 = levels.shift_terms(code)
    t = (a << s1 if s1 >= 0 else 0) + (a << s2 if s2 >= 0 else 0)
    return -t if neg else t


@lru_cache(maxsize=None)
def code_tables(scheme: QuantScheme):
    """Per-code lookup arrays for one scheme.

    Shift schemes: (sh1, sh2, neg); fixed-point: (numerator,). int64/bool arrays
    indexed by code.
    """
    lv = build_levels(scheme)
    n = 1 << scheme.bits
    if scheme.kind == FIXED:
        return (np.array([lv.signed_magnitude(c) for c in range(n)], dtype=np.int64),)
    terms = [lv.shift_terms(c) for c in range(n)]
    neg = np.array([t[0] for t in terms], dtype=np.bool_)
    sh1 = np.array([t[1] for t in terms], dtype=np.int64)
    sh2 = np.array([t[2] for t in terms], dtype=np.int64)
    return sh1, sh2, neg


def max_numerator(levels: LevelSet) -> int:
    return max(abs(v) for v in levels.numerators)


def accumulator_bound(levels: LevelSet, fan_in: int, act_bits: int) -> int:
    """Worst-case |accumulator| for one row of ``fan_in`` terms."""
    return fan_in * ((1 << act_bits) - 1) * max_numerator(levels)


def check_accumulator_bound(levels: LevelSet, fan_in: int, act_bits: int):
    """Raise :class:`OverflowRiskError` if an int64 row accumulator could overflow.

    Shift schemes also need every individual shift to stay inside 63 bits.
    """
    if fan_in > MAX_FAN_IN:
        raise OverflowRiskError(f"fan-in {fan_in} exceeds the supported {MAX_FAN_IN}")
    bound = accumulator_bound(levels, fan_in, act_bits)
    if bound > _I64_MAX or act_bits + levels.frac_bits + 1 > 63:
        raise OverflowRiskError(
            f"{levels.scheme} with {act_bits}-bit activations and fan-in {fan_in} "
            f"can reach {bound}, beyond int64"
        )
    return bound


def row_scales(layer: QuantizedLayer, s_a: float):
    """Per-row dequantization multipliers ``alpha * s_a / denominator``."""
    den = np.array([layer.config.levels(t).denominator for t in layer.tags], dtype=np.float64)
    return layer.alpha * s_a / den


def integer_gemm(A, layer: QuantizedLayer, act_bits: int | None = None):
    """Exact int64 accumulators (N, R); each row goes down its scheme's datapath."""
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[1] != layer.codes.shape[1]:
        raise ShapeMismatchError(f"activations {A.shape} do not match layer {layer.codes.shape}")
    if A.size and A.min() < 0:
        raise ValidationError("activation codes are unsigned")
    A = A.astype(np.int64)
    if act_bits is None:
        act_bits = max(1, int(A.max()).bit_length()) if A.size else 1
    out = np.zeros((A.shape[0], len(layer.tags)), dtype=np.int64)
    for tag in np.unique(layer.tags):
        rows = np.flatnonzero(layer.tags == tag)
        scheme = layer.config.scheme(tag)
        check_accumulator_bound(build_levels(scheme), A.shape[1], act_bits)
        codes = layer.codes[rows]
        tables = code_tables(scheme)
        if scheme.kind == FIXED:
            out[:, rows] = int_accumulate(A, tables[0][codes])
        else:
            sh1, sh2, neg = (t[codes] for t in tables)
            out[:, rows] = shift_accumulate(A, sh1, sh2, neg)
    return out


def hetero_gemm(A, layer: QuantizedLayer, s_a: float, bias=None, act_bits: int | None = None):
    """Float output of the heterogeneous integer GEMM (scaled once per row)."""
    acc = integer_gemm(A, layer, act_bits)
    out = acc * row_scales(layer, s_a)
    return out + bias if bias is not None else out


def reference_gemm(A, layer: QuantizedLayer, s_a: float, bias=None):
    """Double-precision GEMM over decoded activations and dequantized weights."""
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[1] != layer.codes.shape[1]:
        raise ShapeMismatchError(f"activations {A.shape} do not match layer {layer.codes.shape}")
    out = (A.astype(np.float64) * s_a) @ layer.dequantized().T
    return out + bias if bias is not None else out


def gemm_rel_error(out, ref, A, layer: QuantizedLayer, s_a: float, bias=None):
    """Max of |out - ref| / (|A| |W|^T + |b|): error relative to the accumulated magnitude."""
    mag = (np.abs(np.asarray(A, dtype=np.float64)) * s_a) @ np.abs(layer.dequantized()).T
    if bias is not None:
        mag = mag + np.abs(bias)
    diff = np.abs(np.asarray(out) - np.asarray(ref))
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(mag > 0, diff / mag, diff)
    return float(r.max()) if r.size else 0.0


@dataclass
class InferenceResult:
    engine: str
    accuracy: float
    predictions: np.ndarray
    logits: np.ndarray
    checksums: list

    def to_dict(self):
        return {
            "engine": self.engine,
            "accuracy": self.accuracy,
            "samples": int(len(self.predictions)),
            "checksums": list(self.checksums),
        }


def _layer_gemm(engine, layer, qlayer, codes, s_a, act_bits):
    if engine == "shift":
        return hetero_gemm(codes, qlayer, s_a, layer.bias, act_bits)
    return reference_gemm(codes, qlayer, s_a, layer.bias)


def run_layers(model: QuantizedModel, x, engine="shift", dump=None):
    """Forward pass of a quantized model; returns logits and per-layer outputs if ``dump``."""
    net, act = model.net, model.act
    h = np.asarray(x, dtype=np.float64)
    for i, layer in enumerate(net.layers):
        if layer.quantizable:
            q = model.layers[i]
            codes = act.codes(i, h)
            s_a = act.step(i)
            if layer.kind == "dense":
                h = _layer_gemm(engine, layer, q, codes, s_a, act.bits)
            else:
                cols = nn.im2col(codes, layer.k, layer.stride, layer.pad)
                N, oh, ow, K = cols.shape
                out = _layer_gemm(engine, layer, q, cols.reshape(-1, K), s_a, act.bits)
                h = out.reshape(N, oh, ow, -1).transpose(0, 3, 1, 2)
        else:
            h, _ = nn.forward(NetworkIR((layer,)), h, keep=False)
        if dump is not None:
            dump.append(np.ascontiguousarray(h))
    return h


def ensure_act(model: QuantizedModel, data: Dataset, bits=4) -> QuantizedModel:
    """Calibrate activation clip values on the first samples of ``data`` if the model has none."""
    if model.act is not None:
        return model
    act = calibrate_activations(model.net, data.samples[:CALIBRATION_SAMPLES], bits)
    return QuantizedModel(model.net, model.layers, model.config, model.ratio, act, model.finalized)


def infer(model: QuantizedModel, data: Dataset, engine="shift", batch=500) -> InferenceResult:
    if engine not in ENGINES:
        raise ValidationError(f"unknown engine {engine!r}; choose from {ENGINES}")
    if not model.finalized:
        raise UnfinalizedModelError("model weights are not hard-projected")
    if data is None or len(data) == 0:
        raise EmptyDatasetError("accuracy is undefined on an empty dataset")
    model = ensure_act(model, data)
    digests = None
    logits = []
    for s in range(0, len(data), batch):
        dump = []
        logits.append(run_layers(model, data.samples[s:s + batch], engine, dump))
        if digests is None:
            digests = [hashlib.sha256() for _ in dump]
        for d, h in zip(digests, dump):
            d.update(h.astype("<f8").tobytes())
    logits = np.concatenate(logits)
    pred = np.argmax(logits, axis=1)
    acc = float(np.mean(pred == data.labels))
    return InferenceResult(engine, acc, pred, logits, [d.hexdigest() for d in digests])
