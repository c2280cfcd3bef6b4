import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mspquant.errors import InvalidCodeError, InvalidSchemeError, UnknownLevelError, ValidationError
from mspquant.quantizers import (
    AlphaPolicy,
    QuantScheme,
    build_levels,
    clip,
    decode,
    encode,
    encode_array,
    fit_alpha,
    pack_codes,
    packed_row_bytes,
    project_array,
    project_nearest,
    project_pot_log,
    project_pot_log_array,
    pot_zero_cutoff,
    spot_splits,
    unpack_codes,
)


def all_schemes(bits_range=range(2, 9)):
    out = []
    for m in bits_range:
        out.append(QuantScheme.fixed(m))
        out.append(QuantScheme.pot(m))
        for m1, m2 in spot_splits(m):
            out.append(QuantScheme.spot(m, m1, m2))
    return out


SCHEMES = all_schemes()


def test_scheme_validation():
    with pytest.raises(InvalidSchemeError):
        QuantScheme.fixed(1)
    with pytest.raises(InvalidSchemeError):
        QuantScheme.spot(4, 1, 2)  # m1 < m2
    with pytest.raises(InvalidSchemeError):
        QuantScheme.spot(5, 2, 1)  # 1 + m1 + m2 != m
    with pytest.raises(InvalidSchemeError):
        QuantScheme.spot(2)
    assert QuantScheme.spot(4) == QuantScheme.spot(4, 2, 1)
    assert sorted(spot_splits(6)) == [(3, 2), (4, 1)]


@pytest.mark.parametrize("alpha", [0.0, -1.0, float("nan")])
def test_clip_rejects_bad_alpha(alpha):
    with pytest.raises(ValidationError):
        clip(0.1, alpha)


def test_clip_examples():
    assert clip(0.5, 1.0) == 0.5
    assert clip(-3.0, 1.0) == -1.0
    assert clip(0.6, 0.3) == 1.0


def test_fixed_levels():
    assert build_levels(QuantScheme.fixed(2)).levels.tolist() == [-1.0, 0.0, 1.0]
    lv = build_levels(QuantScheme.fixed(4))
    assert lv.levels.tolist() == [k / 7 for k in range(-7, 8)]


def test_pot_levels():
    assert build_levels(QuantScheme.pot(3)).levels.tolist() == [-1, -0.5, -0.25, 0, 0.25, 0.5, 1]


def test_spot4_levels():
    lv = build_levels(QuantScheme.spot(4, 2, 1))
    raw = sorted({float(Fraction(n, 8)) for n in lv.numerators if n >= 0})
    assert raw == [0, 0.125, 0.25, 0.5, 1, 1.125, 1.25, 1.5]
    assert len(lv) == 15
    assert lv.n_raw == 1.5


def test_spot6_contains_worked_example():
    lv = build_levels(QuantScheme.spot(6, 3, 2))
    u = (2 ** -1 + 2 ** -3) / lv.n_raw
    assert u in lv.levels.tolist()
    code = encode(lv, -u)
    bits = format(code, "06b")
    assert bits[0] == "1" and bits[1:4] == "011" and bits[4:] == "10"
    assert decode(lv, code) == -u


@pytest.mark.parametrize("scheme", SCHEMES, ids=str)
def test_level_set_invariants(scheme):
    lv = build_levels(scheme)
    levels = lv.levels
    assert np.all(np.diff(levels) > 0)
    assert levels[0] == -1.0 and levels[-1] == 1.0 and 0.0 in levels
    assert np.array_equal(levels, -levels[::-1])
    assert len(levels) <= 2 ** scheme.bits - 1
    if scheme.kind != "spot":
        assert len(levels) == 2 ** scheme.bits - 1
    # exact dyadic/rational numerators
    for code, n in enumerate(lv.numerators):
        assert lv.decode_table[code] == n / lv.denominator


@pytest.mark.parametrize("scheme", SCHEMES, ids=str)
def test_codec_round_trip(scheme):
    lv = build_levels(scheme)
    for u in lv.levels:
        assert decode(lv, encode(lv, u)) == u
    assert np.array_equal(encode_array(lv, lv.levels), lv.level_codes)
    # every code decodes to a level; negative zero canonicalises to code 0
    assert set(lv.decode_table.tolist()) == set(lv.levels.tolist())
    assert encode(lv, -0.0) == 0


def test_codec_errors():
    lv = build_levels(QuantScheme.fixed(4))
    with pytest.raises(UnknownLevelError):
        encode(lv, 0.3)
    with pytest.raises(InvalidCodeError):
        decode(lv, 16)
    with pytest.raises(UnknownLevelError):
        encode_array(lv, [0.3])


def test_project_nearest_examples():
    lv = build_levels(QuantScheme.fixed(4))
    q = project_nearest(lv, 1.0, 0.30)
    assert q.unit_level == 2 / 7 and q.value == 2 / 7
    assert project_nearest(lv, 1.0, 1.2).value == 1.0
    with pytest.raises(ValidationError):
        project_nearest(lv, 0.0, 0.1)
    with pytest.raises(ValidationError):
        project_nearest(lv, 1.0, float("inf"))


def test_project_tie_goes_to_smaller_magnitude():
    lv = build_levels(QuantScheme.fixed(2))
    assert project_nearest(lv, 1.0, 0.5).unit_level == 0.0
    assert project_nearest(lv, 1.0, -0.5).unit_level == 0.0
    pot = build_levels(QuantScheme.pot(3))
    assert project_nearest(pot, 1.0, 0.75).unit_level == 0.5


@given(
    st.sampled_from(SCHEMES),
    st.floats(0.01, 10.0),
    st.floats(-20.0, 20.0, allow_nan=False),
)
def test_projection_is_member_and_idempotent(scheme, alpha, w):
    lv = build_levels(scheme)
    q = project_nearest(lv, alpha, w)
    assert q.unit_level in lv.levels
    assert q.value == alpha * q.unit_level
    assert decode(lv, q.code) == q.unit_level
    # projecting a grid point returns it
    assert project_nearest(lv, alpha, q.value).unit_level == q.unit_level


@given(st.sampled_from(SCHEMES), st.integers(0, 10**6))
def test_grid_points_are_fixed(scheme, seed):
    lv = build_levels(scheme)
    u = lv.levels[seed % len(lv)]
    assert project_nearest(lv, 1.0, u).unit_level == u


def test_pot_log_examples():
    assert project_pot_log(0.7, 4, 1.0).value == 0.5
    assert project_pot_log(0.72, 4, 1.0).value == 1.0
    assert project_nearest(build_levels(QuantScheme.pot(4)), 1.0, 0.72).value == 0.5
    assert project_pot_log(0.0, 4, 1.0).value == 0.0
    assert project_pot_log(-0.7, 4, 1.0).value == -0.5


@given(st.integers(2, 8), st.floats(-2, 2, allow_nan=False))
def test_pot_log_is_nearest_in_log_space(bits, w):
    u = float(project_pot_log_array(np.array([w]), bits, 1.0)[0])
    lv = build_levels(QuantScheme.pot(bits))
    assert u in lv.levels
    x = min(abs(w), 1.0)
    if x <= pot_zero_cutoff(bits):
        assert u == 0.0
    else:
        assert math.copysign(1.0, u) == math.copysign(1.0, w)
        assert abs(math.log2(abs(u)) - math.log2(x)) <= 0.5 + 1e-12


def test_pot_resolution_does_not_grow_at_the_top():
    for m in range(3, 8):
        a = build_levels(QuantScheme.pot(m)).levels
        b = build_levels(QuantScheme.pot(m + 1)).levels
        ga = np.max(np.diff(a[a > 0]))
        gb = np.max(np.diff(b[b > 0]))
        assert ga == gb == 0.5


def test_fit_alpha_examples(rng):
    lv = build_levels(QuantScheme.fixed(4))
    assert fit_alpha([0.5, -1.0, 0.25], lv) == 1.0
    assert fit_alpha(np.zeros(5), lv) == 1.0
    assert fit_alpha(np.zeros(5), lv, AlphaPolicy("least_squares")) == 1.0
    w = rng.normal(size=1000)
    a0 = fit_alpha(w, lv)
    a1 = fit_alpha(w, lv, AlphaPolicy("least_squares"))
    e0 = np.mean((w - project_array(lv, a0, w)) ** 2)
    e1 = np.mean((w - project_array(lv, a1, w)) ** 2)
    assert e1 <= e0


@given(
    st.sampled_from(SCHEMES),
    st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=50),
)
def test_least_squares_alpha_never_worse(scheme, row):
    lv = build_levels(scheme)
    w = np.array(row)
    a0 = fit_alpha(w, lv)
    a1 = fit_alpha(w, lv, AlphaPolicy("least_squares"))
    assert a1 > 0
    e0 = np.sum((w - project_array(lv, a0, w)) ** 2)
    e1 = np.sum((w - project_array(lv, a1, w)) ** 2)
    assert e1 <= e0 + 1e-12 * max(1.0, e0)


def test_alpha_policy_validation():
    with pytest.raises(ValidationError):
        AlphaPolicy("median")
    with pytest.raises(ValidationError):
        AlphaPolicy("max_abs", "per_tensor")


@given(st.integers(1, 8), st.lists(st.integers(0, 255), min_size=0, max_size=40))
def test_pack_round_trip(bits, raw):
    codes = np.array([c % (1 << bits) for c in raw], dtype=np.int64)
    data = pack_codes(codes, bits)
    assert len(data) == packed_row_bytes(len(codes), bits)
    assert np.array_equal(unpack_codes(data, bits, len(codes)), codes)


def test_pack_layout_lsb_first():
    assert pack_codes([1, 2], 4) == bytes([0x21])
    assert pack_codes([0b101], 3) == bytes([0b101])
    with pytest.raises(InvalidCodeError):
        pack_codes([16], 4)
