"""Network IR, the ``MSPT`` tensor container, GEMM reshaping and MAC counting."""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import ClassVar

import numpy as np

from .errors import (
    BadMagicError,
    FormatError,
    IncompatibleShapeError,
    LayerKindError,
    ShapeMismatchError,
    TruncatedError,
    ValidationError,
)

MAGIC = b"MSPT"


# -- tensor container ---------------------------------------------------------

def tensor_to_bytes(arr) -> bytes:
    a = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValidationError("tensor container holds finite values only")
    if any(d < 1 for d in a.shape):
        raise ValidationError(f"tensor dims must be positive, got {a.shape}")
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + np.ascontiguousarray(a).astype("<f8", copy=False).tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise TruncatedError("container shorter than its header")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 8 * rank
    if len(buf) < off:
        raise TruncatedError("container truncated inside the dims table")
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    if any(d < 1 for d in dims):
        raise ShapeMismatchError(f"non-positive dim in {dims}")
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = len(buf) - off
    if payload < 8 * n:
        raise TruncatedError(f"payload holds {payload // 8} values, dims need {n}")
    if payload != 8 * n:
        raise ShapeMismatchError(f"payload holds {payload / 8:g} values, dims need {n}")
    a = np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(dims)
    if not np.all(np.isfinite(a)):
        raise FormatError("container holds non-finite values")
    return a


def save_tensor(path, arr):
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


# -- layers -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Dense:
    weight: np.ndarray
    bias: np.ndarray | None = None
    kind: ClassVar[str] = "dense"
    quantizable: ClassVar[bool] = True

    @property
    def in_features(self):
        return self.weight.shape[1]

    @property
    def out_features(self):
        return self.weight.shape[0]

    def output_shape(self, shape):
        if tuple(shape) != (self.in_features,):
            raise IncompatibleShapeError(f"dense({self.in_features}->{self.out_features}) got input {shape}")
        return (self.out_features,)


@dataclass(frozen=True, eq=False)
class Conv2d:
    weight: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    pad: int = 0
    kind: ClassVar[str] = "conv2d"
    quantizable: ClassVar[bool] = True

    @property
    def in_ch(self):
        return self.weight.shape[1]

    @property
    def out_ch(self):
        return self.weight.shape[0]

    @property
    def k(self):
        return self.weight.shape[2]

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_ch:
            raise IncompatibleShapeError(f"conv2d expects ({self.in_ch}, H, W), got {shape}")
        oh = (shape[1] + 2 * self.pad - self.k) // self.stride + 1
        ow = (shape[2] + 2 * self.pad - self.k) // self.stride + 1
        if oh < 1 or ow < 1:
            raise IncompatibleShapeError(f"conv2d kernel {self.k} does not fit input {shape}")
        return (self.out_ch, oh, ow)


@dataclass(frozen=True)
class ReLU:
    kind: ClassVar[str] = "relu"
    quantizable: ClassVar[bool] = False

    def output_shape(self, shape):
        return tuple(shape)


@dataclass(frozen=True)
class MaxPool2x2:
    kind: ClassVar[str] = "maxpool2x2"
    quantizable: ClassVar[bool] = False

    def output_shape(self, shape):
        if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
            raise IncompatibleShapeError(f"maxpool2x2 expects (C, H>=2, W>=2), got {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)


@dataclass(frozen=True)
class Flatten:
    kind: ClassVar[str] = "flatten"
    quantizable: ClassVar[bool] = False

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2d, ReLU, MaxPool2x2, Flatten)}


def dense(n_in, n_out, rng=None, bias=True):
    """He-initialised dense layer."""
    rng = np.random.default_rng(rng)
    w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in))
    return Dense(w, np.zeros(n_out) if bias else None)


def conv2d(in_ch, out_ch, k, stride=1, pad=0, rng=None, bias=True):
    rng = np.random.default_rng(rng)
    w = rng.normal(0.0, np.sqrt(2.0 / (in_ch * k * k)), size=(out_ch, in_ch, k, k))
    return Conv2d(w, np.zeros(out_ch) if bias else None, stride, pad)


@dataclass(frozen=True)
class NetworkIR:
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        for layer in self.layers:
            if getattr(layer, "kind", None) not in LAYER_KINDS:
                raise LayerKindError(f"unsupported layer {layer!r}")

    def __len__(self):
        return len(self.layers)

    def quantizable_indices(self):
        return [i for i, layer in enumerate(self.layers) if layer.quantizable]

    def shapes(self, input_dims):
        """Per-layer output shapes; raises if adjacent layers do not compose."""
        shape = tuple(int(d) for d in input_dims)
        out = []
        for layer in self.layers:
            shape = layer.output_shape(shape)
            out.append(shape)
        return out

    def with_weights(self, weights: dict):
        """Copy with the weights of layers ``{index: array}`` replaced."""
        layers = list(self.layers)
        for i, w in weights.items():
            old = layers[i]
            w = np.asarray(w, dtype=np.float64)
            if w.shape != old.weight.shape:
                raise IncompatibleShapeError(f"layer {i}: weight shape {w.shape} != {old.weight.shape}")
            layers[i] = replace(old, weight=w)
        return NetworkIR(tuple(layers))

    def with_biases(self, biases: dict):
        layers = list(self.layers)
        for i, b in biases.items():
            layers[i] = replace(layers[i], bias=np.asarray(b, dtype=np.float64))
        return NetworkIR(tuple(layers))


def mlp(sizes, rng=None):
    """Dense/ReLU stack, e.g. ``mlp([2, 16, 16, 2])``."""
    rng = np.random.default_rng(rng)
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(dense(a, b, rng))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    return NetworkIR(tuple(layers))


# -- GEMM view -----------------------------------------------------------------

def reshape_to_gemm(layer) -> np.ndarray:
    """2-D (rows = output channels) view of a quantizable layer's weights.

    Conv weights ``O x I x k x k`` flatten row-major over (in_ch, k_row, k_col).
    """
    if not getattr(layer, "quantizable", False):
        raise LayerKindError(f"{getattr(layer, 'kind', layer)!r} layers carry no weights")
    w = layer.weight
    return w.reshape(w.shape[0], -1)


def gemm_to_weight(layer, matrix) -> np.ndarray:
    """Inverse of :func:`reshape_to_gemm` for ``layer``'s weight shape."""
    if not getattr(layer, "quantizable", False):
        raise LayerKindError(f"{getattr(layer, 'kind', layer)!r} layers carry no weights")
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (layer.weight.shape[0], int(np.prod(layer.weight.shape[1:]))):
        raise IncompatibleShapeError(f"matrix {m.shape} does not match weight {layer.weight.shape}")
    return m.reshape(layer.weight.shape)


# -- op counting ------------------------------------------------------------------

def count_ops(net: NetworkIR, input_dims):
    """Per-layer MAC counts (0 for non-quantizable layers) and their total."""
    shape = tuple(int(d) for d in input_dims)
    per_layer = []
    for layer in net.layers:
        out = layer.output_shape(shape)
        if layer.kind == "dense":
            macs = layer.in_features * layer.out_features
        elif layer.kind == "conv2d":
            macs = out[1] * out[2] * layer.out_ch * layer.in_ch * layer.k * layer.k
        else:
            macs = 0
        per_layer.append(int(macs))
        shape = out
    return per_layer, int(sum(per_layer))
