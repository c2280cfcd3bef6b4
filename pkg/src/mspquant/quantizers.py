"""Fixed-point, power-of-two and sum-of-power-of-two level sets.

Every level set is stored as *unit* levels in [-1, 1]; a weight is represented
as ``alpha * unit_level``. Codes are sign-magnitude: the MSB is the sign and the
remaining ``m - 1`` bits select a magnitude. For SPoT the magnitude bits are
split into an ``m1`` field followed by an ``m2`` field.

SPoT sub-tables (field code -> term):

    m1 field c1:  0 -> 0,  c1 -> 2**-c1
    m2 field c2:  0 -> 0,  c2 -> 2**-(c2 - 1)

so for m = 6, m1 = 3, m2 = 2 the raw level 0.625 = 2**-3 + 2**-1 has
m1 field ``011`` and m2 field ``10``. Raw sums are normalised by the largest
raw sum ``n_raw`` (1.5 for every valid split) so that unit levels span [-1, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import InvalidCodeError, InvalidSchemeError, UnknownLevelError, ValidationError
from .kernels import nearest_index

FIXED = "fixed"
POT = "pot"
SPOT = "spot"
KINDS = (FIXED, POT, SPOT)


@dataclass(frozen=True)
class QuantScheme:
    kind: str
    bits: int
    m1: int | None = None
    m2: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSchemeError(f"unknown scheme kind {self.kind!r}")
        if not isinstance(self.bits, (int, np.integer)) or self.bits < 2:
            raise InvalidSchemeError(f"bit width must be an integer >= 2, got {self.bits!r}")
        if self.kind == SPOT:
            if self.m1 is None or self.m2 is None:
                raise InvalidSchemeError("SPoT needs both m1 and m2")
            if not (self.m1 >= self.m2 >= 1):
                raise InvalidSchemeError(f"SPoT needs m1 >= m2 >= 1, got m1={self.m1} m2={self.m2}")
            if 1 + self.m1 + self.m2 != self.bits:
                raise InvalidSchemeError(
                    f"SPoT needs 1 + m1 + m2 == m, got 1 + {self.m1} + {self.m2} != {self.bits}"
                )
        elif self.m1 is not None or self.m2 is not None:
            raise InvalidSchemeError(f"{self.kind} scheme takes no m1/m2")

    @classmethod
    def fixed(cls, bits):
        return cls(FIXED, bits)

    @classmethod
    def pot(cls, bits):
        return cls(POT, bits)

    @classmethod
    def spot(cls, bits, m1=None, m2=None):
        if m1 is None and m2 is None:
            m1 = math.ceil((bits - 1) / 2)
            m2 = bits - 1 - m1
        elif m1 is None:
            m1 = bits - 1 - m2
        elif m2 is None:
            m2 = bits - 1 - m1
        return cls(SPOT, bits, m1, m2)

    def to_dict(self):
        d = {"kind": self.kind, "m": int(self.bits)}
        if self.kind == SPOT:
            d.update(m1=int(self.m1), m2=int(self.m2))
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], int(d["m"]), d.get("m1"), d.get("m2"))

    def __str__(self):
        if self.kind == SPOT:
            return f"SPoT{self.bits}({self.m1},{self.m2})"
        return f"{'Fixed' if self.kind == FIXED else 'PoT'}{self.bits}"


def spot_splits(bits):
    """All valid (m1, m2) with m1 >= m2 >= 1 and 1 + m1 + m2 == bits."""
    return [(m1, bits - 1 - m1) for m1 in range(bits - 2, 0, -1) if m1 >= bits - 1 - m1 >= 1]


@dataclass(frozen=True, eq=False)
class LevelSet:
    """Sorted unit levels of one scheme plus the codec tables.

    ``numerators[c] / denominator`` is the exact unit level of code ``c`` in the
    integer frame used by the shift/multiply datapaths (``frac_bits`` fractional
    bits). ``decode_table[c]`` is the same value as a float.
    """

    scheme: QuantScheme
    levels: np.ndarray
    level_codes: np.ndarray
    decode_table: np.ndarray
    numerators: tuple
    denominator: int
    frac_bits: int
    n_raw: float
    _index: dict = field(repr=False, default_factory=dict)

    @property
    def bits(self):
        return self.scheme.bits

    def __len__(self):
        return len(self.levels)

    def shift_terms(self, code):
        """(negative, shift1, shift2) with -1 for an absent term, in the ``frac_bits`` frame.

        Only defined for PoT and SPoT; the level numerator equals
        ``±((1 << shift1) + (1 << shift2))`` with absent terms dropped.
        """
        m = self.bits
        code = _check_code(self, code)
        neg = bool(code >> (m - 1))
        S = self.frac_bits
        if self.scheme.kind == POT:
            k = code & ((1 << (m - 1)) - 1)
            return neg, (S - (k - 1) if k else -1), -1
        if self.scheme.kind == SPOT:
            m1, m2 = self.scheme.m1, self.scheme.m2
            c1 = (code >> m2) & ((1 << m1) - 1)
            c2 = code & ((1 << m2) - 1)
            return neg, (S - c1 if c1 else -1), (S - (c2 - 1) if c2 else -1)
        raise InvalidSchemeError("fixed-point codes are multiplied, not shifted")

    def signed_magnitude(self, code):
        """Fixed-point only: the signed integer k with unit level k / (2**(m-1) - 1)."""
        if self.scheme.kind != FIXED:
            raise InvalidSchemeError("signed_magnitude is only defined for fixed-point")
        return self.numerators[_check_code(self, code)]


def _check_code(levels, code):
    c = int(code)
    if c != code or not 0 <= c < (1 << levels.bits):
        raise InvalidCodeError(f"code {code!r} is not a valid {levels.bits}-bit code")
    return c


def _code_numerators(scheme):
    """Exact (numerators per code, denominator, frac_bits) as Python ints."""
    m = scheme.bits
    mag_mask = (1 << (m - 1)) - 1
    nums = []
    if scheme.kind == FIXED:
        denom = mag_mask
        frac = 0
        for c in range(1 << m):
            k = c & mag_mask
            nums.append(-k if c >> (m - 1) else k)
    elif scheme.kind == POT:
        E = (1 << (m - 1)) - 2
        denom = 1 << E
        frac = E
        for c in range(1 << m):
            k = c & mag_mask
            v = (1 << (E - (k - 1))) if k else 0
            nums.append(-v if c >> (m - 1) else v)
    else:
        m1, m2 = scheme.m1, scheme.m2
        S = (1 << m1) - 1
        frac = S
        # largest raw sum: 2**-1 from the m1 table plus 2**0 from the m2 table
        denom = (1 << (S - 1)) + (1 << S)
        for c in range(1 << m):
            c1 = (c >> m2) & ((1 << m1) - 1)
            c2 = c & ((1 << m2) - 1)
            v = ((1 << (S - c1)) if c1 else 0) + ((1 << (S - (c2 - 1))) if c2 else 0)
            nums.append(-v if c >> (m - 1) else v)
    return nums, denom, frac


@lru_cache(maxsize=None)
def build_levels(scheme: QuantScheme) -> LevelSet:
    """Construct the level set and codec tables for ``scheme``."""
    if not isinstance(scheme, QuantScheme):
        raise InvalidSchemeError(f"expected QuantScheme, got {type(scheme).__name__}")
    nums, denom, frac = _code_numerators(scheme)
    decode = np.array([n / denom for n in nums], dtype=np.float64)
    decode[decode == 0.0] = 0.0  # drop negative zeros
    canonical = {}
    for code, val in enumerate(decode.tolist()):
        if val not in canonical or code < canonical[val]:
            canonical[val] = code
    vals = sorted(canonical)
    levels = np.array(vals, dtype=np.float64)
    codes = np.array([canonical[v] for v in vals], dtype=np.int64)
    levels.setflags(write=False)
    codes.setflags(write=False)
    decode.setflags(write=False)
    n_raw = 1.5 if scheme.kind == SPOT else 1.0
    ls = LevelSet(scheme, levels, codes, decode, tuple(nums), denom, frac, n_raw)
    ls._index.update({v: i for i, v in enumerate(vals)})
    return ls


@dataclass(frozen=True)
class QuantValue:
    value: float
    unit_level: float
    code: int
    alpha: float


def _check_alpha(alpha):
    alpha = float(alpha)
    if not alpha > 0 or not math.isfinite(alpha):
        raise ValidationError(f"scale alpha must be positive and finite, got {alpha!r}")
    return alpha


def clip(w, alpha):
    """Map ``w`` into [-1, 1] relative to the scale ``alpha``."""
    alpha = _check_alpha(alpha)
    if w < -alpha:
        return -1.0
    if w > alpha:
        return 1.0
    return w / alpha


def clip_array(w, alpha):
    """Vectorised :func:`clip`; ``alpha`` broadcasts against ``w`` (e.g. shape (R, 1))."""
    w = np.asarray(w, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(~(alpha > 0)) or not np.all(np.isfinite(alpha)):
        raise ValidationError("scale alpha must be positive and finite")
    return np.where(w < -alpha, -1.0, np.where(w > alpha, 1.0, w / alpha))


def encode(levels: LevelSet, unit_level) -> int:
    try:
        idx = levels._index[float(unit_level) + 0.0]
    except KeyError:
        raise UnknownLevelError(f"{unit_level!r} is not a level of {levels.scheme}") from None
    return int(levels.level_codes[idx])


def decode(levels: LevelSet, code) -> float:
    return float(levels.decode_table[_check_code(levels, code)])


def encode_array(levels: LevelSet, unit_levels):
    u = np.asarray(unit_levels, dtype=np.float64)
    idx = np.searchsorted(levels.levels, u)
    idx_c = np.clip(idx, 0, len(levels) - 1)
    if not np.all(levels.levels[idx_c] == u):
        raise UnknownLevelError(f"array holds values that are not levels of {levels.scheme}")
    return levels.level_codes[idx_c]


def project_indices(levels: LevelSet, alpha, w):
    """Level indices of the nearest-level projection of ``w`` (array) at scale ``alpha``."""
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValidationError("cannot project non-finite weights")
    return nearest_index(levels.levels, clip_array(w, alpha))


def project_array(levels: LevelSet, alpha, w):
    """Projected values ``alpha * level`` for an array ``w``."""
    idx = project_indices(levels, alpha, w)
    return np.asarray(alpha, dtype=np.float64) * levels.levels[idx]


def project_nearest(levels: LevelSet, alpha, w) -> QuantValue:
    """Nearest-level projection of a scalar weight (ties toward smaller magnitude)."""
    alpha = _check_alpha(alpha)
    w = float(w)
    if not math.isfinite(w):
        raise ValidationError(f"cannot project non-finite weight {w!r}")
    i = int(nearest_index(levels.levels, np.array([clip(w, alpha)]))[0])
    u = float(levels.levels[i])
    return QuantValue(alpha * u, u, int(levels.level_codes[i]), alpha)


def pot_zero_cutoff(bits):
    """Magnitude at or below which the log-domain PoT projection returns 0."""
    E = (1 << (bits - 1)) - 2
    return 2.0 ** (-E - 0.5)


def project_pot_log_array(w, bits, alpha):
    """Log-domain PoT projection; returns unit levels.

    The exponent is ``round(log2|x|)`` (halves toward the smaller magnitude),
    clamped to ``[-(2**(m-1) - 2), 0]``; magnitudes at or below the geometric
    midpoint under the smallest level map to 0.
    """
    if bits < 2:
        raise InvalidSchemeError("PoT needs at least 2 bits")
    x = clip_array(w, alpha)
    mag = np.abs(x)
    E = (1 << (bits - 1)) - 2
    with np.errstate(divide="ignore"):
        e = np.ceil(np.log2(mag) - 0.5)
    e = np.clip(e, -E, 0)
    out = np.where(mag <= pot_zero_cutoff(bits), 0.0, np.sign(x) * np.exp2(e))
    return out + 0.0


def project_pot_log(w, bits, alpha) -> QuantValue:
    alpha = _check_alpha(alpha)
    u = float(project_pot_log_array(np.array([float(w)]), bits, alpha)[0])
    levels = build_levels(QuantScheme.pot(bits))
    return QuantValue(alpha * u, u, encode(levels, u), alpha)


@dataclass(frozen=True)
class AlphaPolicy:
    mode: str = "max_abs"
    granularity: str = "per_row"

    def __post_init__(self):
        if self.mode not in ("max_abs", "least_squares"):
            raise ValidationError(f"unknown alpha mode {self.mode!r}")
        if self.granularity not in ("per_layer", "per_row"):
            raise ValidationError(f"unknown alpha granularity {self.granularity!r}")


def fit_alpha(row, levels: LevelSet, policy: AlphaPolicy = AlphaPolicy(), max_iter=20) -> float:
    """Scale for one group of weights.

    ``least_squares`` alternates nearest-level projection with the closed-form
    scale ``<w, q> / <q, q>`` starting from max-abs; each step cannot increase
    the reconstruction error, and the best iterate is returned.
    """
    w = np.asarray(row, dtype=np.float64).reshape(-1)
    if w.size == 0:
        raise ValidationError("cannot fit a scale to an empty row")
    amax = float(np.max(np.abs(w)))
    if not amax > 0 or not math.isfinite(amax):
        return 1.0
    if policy.mode == "max_abs":
        return amax
    lv = levels.levels
    alpha = amax
    q = lv[nearest_index(lv, clip_array(w, alpha))]
    best_err, best_alpha = float(np.sum((w - alpha * q) ** 2)), alpha
    for _ in range(max_iter):
        qq = float(q @ q)
        if qq == 0.0:
            break
        new = float(w @ q) / qq
        if not new > 0 or new == alpha:
            break
        alpha = new
        q = lv[nearest_index(lv, clip_array(w, alpha))]
        err = float(np.sum((w - alpha * q) ** 2))
        if err < best_err:
            best_err, best_alpha = err, alpha
    return best_alpha


def pack_codes(codes, bits) -> bytes:
    """Pack one row of codes at ``bits`` each, LSB first, padded to a byte boundary."""
    c = np.asarray(codes, dtype=np.int64).reshape(-1)
    if c.size and (c.min() < 0 or c.max() >= (1 << bits)):
        raise InvalidCodeError(f"codes out of range for {bits}-bit packing")
    b = ((c[:, None] >> np.arange(bits)) & 1).astype(np.uint8).reshape(-1)
    return np.packbits(b, bitorder="little").tobytes()


def packed_row_bytes(count, bits):
    return (count * bits + 7) // 8


def unpack_codes(data, bits, count):
    raw = np.frombuffer(data, dtype=np.uint8)
    if raw.size < packed_row_bytes(count, bits):
        raise InvalidCodeError("packed code row is too short")
    b = np.unpackbits(raw, bitorder="little")[: count * bits].reshape(count, bits)
    return (b.astype(np.int64) << np.arange(bits)).sum(axis=1)
