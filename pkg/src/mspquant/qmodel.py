"""Data types shared by assignment, training and inference: ratios, scheme
configuration, activation quantizer and the quantized model container."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .core import NetworkIR, gemm_to_weight, reshape_to_gemm
from .errors import InvalidRatioError, ValidationError
from .quantizers import AlphaPolicy, QuantScheme, build_levels

SPOT_TAG = "s"
FIXED_TAG = "f"
EIGHT_TAG = "8"
POT_TAG = "p"
TAGS = (SPOT_TAG, FIXED_TAG, EIGHT_TAG, POT_TAG)


def _frac(x):
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(float(x)).limit_denominator(1_000_000)


@dataclass(frozen=True)
class SchemeRatio:
    """Row shares for SPoT-4 : Fixed-4 : Fixed-8. Stored as exact fractions."""

    spot_frac: Fraction
    fixed_frac: Fraction
    eight_frac: Fraction

    def __post_init__(self):
        vals = [_frac(v) for v in (self.spot_frac, self.fixed_frac, self.eight_frac)]
        if any(v < 0 for v in vals):
            raise InvalidRatioError(f"ratio fractions must be non-negative, got {vals}")
        if abs(sum(vals) - 1) > Fraction(1, 10**12):
            raise InvalidRatioError(f"ratio fractions must sum to 1, got {float(sum(vals))!r}")
        for name, v in zip(("spot_frac", "fixed_frac", "eight_frac"), vals):
            object.__setattr__(self, name, v)

    @classmethod
    def parse(cls, text):
        """``"65:30:5"``: three non-negative integer percentages summing to 100."""
        parts = str(text).split(":")
        if len(parts) != 3 or not all(p.strip().isdigit() for p in parts):
            raise InvalidRatioError(f"ratio {text!r} must be three integer percentages like 65:30:5")
        ints = [int(p) for p in parts]
        if sum(ints) != 100:
            raise InvalidRatioError(f"ratio {text!r} must sum to 100, sums to {sum(ints)}")
        return cls(*(Fraction(i, 100) for i in ints))

    @classmethod
    def proportional(cls, text):
        """Any non-negative colon triple such as ``"2:1:0"`` or ``"1.5:1:0"``, normalised."""
        parts = str(text).split(":")
        if len(parts) != 3:
            raise InvalidRatioError(f"ratio {text!r} must have three fields")
        try:
            vals = [Fraction(p.strip()) for p in parts]
        except (ValueError, ZeroDivisionError):
            raise InvalidRatioError(f"cannot parse ratio {text!r}") from None
        total = sum(vals)
        if total <= 0 or any(v < 0 for v in vals):
            raise InvalidRatioError(f"ratio {text!r} must be non-negative with a positive sum")
        return cls(*(v / total for v in vals))

    def as_tuple(self):
        return (float(self.spot_frac), float(self.fixed_frac), float(self.eight_frac))

    def __str__(self):
        return ":".join(f"{float(v) * 100:g}" for v in (self.spot_frac, self.fixed_frac, self.eight_frac))


MSP_RATIO = SchemeRatio(Fraction(65, 100), Fraction(30, 100), Fraction(5, 100))


@dataclass(frozen=True)
class SchemeConfig:
    """Bit widths per row tag. SPoT split defaults to m1 = 2, m2 = 1 at 4 bits."""

    bits: int = 4
    m1: int | None = None
    m2: int | None = None
    eight_bits: int = 8
    alpha: AlphaPolicy = field(default_factory=AlphaPolicy)

    def scheme(self, tag) -> QuantScheme:
        if tag == SPOT_TAG:
            return QuantScheme.spot(self.bits, self.m1, self.m2)
        if tag == FIXED_TAG:
            return QuantScheme.fixed(self.bits)
        if tag == EIGHT_TAG:
            return QuantScheme.fixed(self.eight_bits)
        if tag == POT_TAG:
            return QuantScheme.pot(self.bits)
        raise ValidationError(f"unknown row tag {tag!r}")

    def levels(self, tag):
        return build_levels(self.scheme(tag))

    def to_dict(self):
        s = self.scheme(SPOT_TAG)
        return {
            "bits": self.bits,
            "m1": s.m1,
            "m2": s.m2,
            "eight_bits": self.eight_bits,
            "alpha_mode": self.alpha.mode,
            "alpha_granularity": self.alpha.granularity,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            int(d.get("bits", 4)),
            d.get("m1"),
            d.get("m2"),
            int(d.get("eight_bits", 8)),
            AlphaPolicy(d.get("alpha_mode", "max_abs"), d.get("alpha_granularity", "per_row")),
        )


@dataclass(frozen=True)
class ActQuant:
    """Unsigned activation grid ``{0..2**bits-1} * a_max / (2**bits - 1)`` per quantized layer."""

    bits: int = 4
    a_max: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.bits < 1:
            raise ValidationError("activation bits must be >= 1")
        for k, v in self.a_max.items():
            if not v > 0 or not math.isfinite(v):
                raise ValidationError(f"a_max for layer {k} must be positive, got {v!r}")

    @property
    def qmax(self):
        return (1 << self.bits) - 1

    def step(self, layer):
        return self.a_max[layer] / self.qmax

    def codes(self, layer, a):
        """Activation codes ``round(clip(a, 0, a_max) / step)`` (halves round up)."""
        a_max = self.a_max[layer]
        x = np.clip(np.asarray(a, dtype=np.float64), 0.0, a_max)
        return np.floor(x / self.step(layer) + 0.5).astype(np.int64)

    def quantize(self, layer, a):
        return self.codes(layer, a) * self.step(layer)

    def to_dict(self):
        return {"bits": self.bits, "a_max": {str(k): v for k, v in sorted(self.a_max.items())}}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["bits"]), {int(k): float(v) for k, v in d["a_max"].items()})


@dataclass(frozen=True, eq=False)
class QuantizedLayer:
    """Row tags, per-row scales and integer codes of one quantized GEMM matrix."""

    tags: np.ndarray
    alpha: np.ndarray
    codes: np.ndarray
    theta: float | None
    config: SchemeConfig

    def __post_init__(self):
        object.__setattr__(self, "tags", np.asarray(self.tags, dtype="<U1"))
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=np.float64))
        object.__setattr__(self, "codes", np.asarray(self.codes, dtype=np.int64))
        R = len(self.tags)
        if self.alpha.shape != (R,) or self.codes.ndim != 2 or self.codes.shape[0] != R:
            raise ValidationError("tags, alpha and codes disagree on the row count")

    @property
    def shape(self):
        return self.codes.shape

    def row_bits(self):
        return np.array([self.config.scheme(t).bits for t in self.tags], dtype=np.int64)

    def unit_levels(self):
        """Decoded unit levels (R, C)."""
        out = np.empty(self.codes.shape, dtype=np.float64)
        for tag in np.unique(self.tags):
            rows = self.tags == tag
            out[rows] = self.config.levels(tag).decode_table[self.codes[rows]]
        return out

    def dequantized(self):
        return self.alpha[:, None] * self.unit_levels()

    def counts(self):
        return {t: int(np.sum(self.tags == t)) for t in TAGS if np.any(self.tags == t)}


@dataclass(frozen=True, eq=False)
class QuantizedModel:
    """A network whose quantizable layers carry codes; ``net`` holds the dequantized weights."""

    net: NetworkIR
    layers: dict
    config: SchemeConfig
    ratio: SchemeRatio | None = None
    act: ActQuant | None = None
    finalized: bool = True

    @classmethod
    def from_layers(cls, net, qlayers, config, ratio=None, act=None, finalized=True):
        weights = {i: gemm_to_weight(net.layers[i], q.dequantized()) for i, q in qlayers.items()}
        return cls(net.with_weights(weights), dict(qlayers), config, ratio, act, finalized)

    def weight_matrix(self, index):
        return reshape_to_gemm(self.net.layers[index])
