import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mspquant.assignment import (
    RowStats,
    assign,
    quantize_matrix,
    quantize_model,
    row_stats,
    target_counts,
)
from mspquant.core import NetworkIR, mlp, reshape_to_gemm
from mspquant.errors import InvalidRatioError, ValidationError
from mspquant.qmodel import MSP_RATIO, SchemeConfig, SchemeRatio
from mspquant.quantizers import QuantScheme, build_levels, project_array


def oracle_counts(R, ratio):
    """Independent restatement of the rounding rule."""
    s, f, e = ratio.spot_frac, ratio.fixed_frac, ratio.eight_frac
    n8 = math.floor(e * R + Fraction(1, 2))
    if e > 0:
        n8 = max(n8, 1)
    n8 = min(n8, R)
    ns = math.floor(s * R + Fraction(1, 2))
    if s > 0:
        ns = max(ns, 1)
    ns = min(ns, R - n8)
    counts = [ns, R - n8 - ns, n8]
    nonzero = [g for g, x in enumerate((s, f, e)) if x > 0]
    if R >= len(nonzero):
        for g in nonzero:
            if counts[g] == 0:
                donor = max(range(3), key=lambda j: (counts[j], -j))
                counts[donor] -= 1
                counts[g] += 1
    return tuple(counts)


def test_row_stats_examples():
    assert row_stats(np.array([[0.3, 0.3, 0.3]])).variance[0] == pytest.approx(0.0, abs=1e-18)
    assert row_stats(np.array([[0.0, 0.5, -0.5, 1.0]])).variance[0] == 0.3125
    on_grid = np.array([[1.0, 3 / 7, -2 / 7, 0.0]])
    assert row_stats(on_grid).error[0] == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValidationError):
        row_stats(np.zeros((0, 3)))


def test_target_counts_examples():
    assert target_counts(20, MSP_RATIO) == (13, 6, 1)
    assert target_counts(3, SchemeRatio.parse("34:33:33")) == (1, 1, 1)
    assert target_counts(7, SchemeRatio.parse("100:0:0")) == (7, 0, 0)
    assert target_counts(4, MSP_RATIO) == (2, 1, 1)
    with pytest.raises(ValidationError):
        target_counts(0, MSP_RATIO)


def test_assign_hand_example():
    W = np.zeros((3, 4))
    stats = RowStats(np.array([0.2, 0.01, 0.5]), np.array([0.9, 0.1, 0.1]))
    smap = assign(W, SchemeRatio.parse("34:33:33"), stats)
    assert smap.tags.tolist() == ["8", "s", "f"]
    assert smap.theta == 0.01


def test_assign_all_spot(rng):
    W = rng.normal(size=(10, 6))
    smap = assign(W, SchemeRatio.parse("100:0:0"))
    assert set(smap.tags.tolist()) == {"s"}
    assert smap.theta == pytest.approx(np.max(W.var(axis=1)))


def test_assign_errors():
    with pytest.raises(InvalidRatioError):
        assign(np.ones((3, 3)), "65:30:5")
    with pytest.raises(ValidationError):
        assign(np.ones((0, 3)), MSP_RATIO)
    with pytest.raises(InvalidRatioError):
        SchemeRatio.parse("65:30:6")


def test_assign_ties_go_to_lower_index():
    W = np.ones((4, 3))
    stats = RowStats(np.zeros(4), np.zeros(4))
    smap = assign(W, SchemeRatio.parse("50:25:25"), stats)
    assert smap.tags.tolist() == ["8", "s", "s", "f"]


def check_ordering(smap, stats):
    tags = smap.tags
    e8 = stats.error[tags == "8"]
    eo = stats.error[tags != "8"]
    if e8.size and eo.size:
        assert e8.min() >= eo.max()
    vs = stats.variance[tags == "s"]
    vf = stats.variance[tags == "f"]
    if vs.size and vf.size:
        assert vs.max() <= vf.min()
    if vs.size:
        assert smap.theta == vs.max()


ratio_grid = st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(0, 20)).filter(
    lambda t: sum(t) > 0
).map(lambda t: SchemeRatio(*(Fraction(x, sum(t)) for x in t)))


@settings(max_examples=300)
@given(st.integers(3, 200), ratio_grid)
def test_counts_match_rule_on_ratio_grid(R, ratio):
    counts = target_counts(R, ratio)
    assert counts == oracle_counts(R, ratio)
    assert sum(counts) == R and min(counts) >= 0
    for c, x in zip(counts, (ratio.spot_frac, ratio.fixed_frac, ratio.eight_frac)):
        if x == 0:
            assert c == 0
        elif R >= 3:
            assert c >= 1


@settings(max_examples=200)
@given(st.integers(3, 60), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_assign_partition_and_ordering(R, C, seed):
    W = np.random.default_rng(seed).normal(size=(R, C))
    stats = row_stats(W)
    smap = assign(W, MSP_RATIO, stats)
    assert smap.counts() == target_counts(R, MSP_RATIO)
    check_ordering(smap, stats)


def test_msp_beats_fixed4_on_heavy_tailed_rows(rng):
    # rows with a few large outliers: Fixed-8 absorbs the worst rows, SPoT fits the peaked ones
    R, C = 200, 64
    scale = np.where(rng.random(R) < 0.3, 1.0, 0.1)[:, None]
    W = rng.standard_t(2, size=(R, C)) * scale
    cfg = SchemeConfig()
    msp = quantize_matrix(W, assign(W, MSP_RATIO), cfg)
    fx = quantize_matrix(W, np.full(R, "f"), cfg)
    e_msp = np.mean((W - msp.dequantized()) ** 2)
    e_fx = np.mean((W - fx.dequantized()) ** 2)
    assert e_msp <= e_fx


def test_quantize_model_counts_and_determinism(rng):
    net = mlp([6, 24, 20, 4], 5)
    a = quantize_model(net, MSP_RATIO)
    b = quantize_model(net, MSP_RATIO)
    for i in net.quantizable_indices():
        R = net.layers[i].weight.shape[0]
        assert tuple(a.layers[i].counts().get(t, 0) for t in "sf8") == target_counts(R, MSP_RATIO)
        assert np.array_equal(a.layers[i].codes, b.layers[i].codes)
        assert np.array_equal(a.layers[i].alpha, b.layers[i].alpha)
        assert np.array_equal(a.net.layers[i].weight, b.net.layers[i].weight)


def test_quantize_model_identity_on_grid(rng):
    lv = build_levels(QuantScheme.fixed(4))
    W1 = lv.levels[rng.integers(0, len(lv), size=(5, 3))]
    W2 = lv.levels[rng.integers(0, len(lv), size=(2, 5))]
    W1[:, 0], W2[:, 0] = 1.0, -1.0  # pin every row's max_abs scale to 1
    net = mlp([3, 5, 2], 0).with_weights({0: W1, 2: W2})
    q = quantize_model(net, SchemeRatio.parse("0:100:0"))
    assert np.array_equal(q.net.layers[0].weight, W1)
    assert np.array_equal(q.net.layers[2].weight, W2)


def test_quantize_model_projects_rowwise(rng):
    net = mlp([4, 10, 3], 1)
    q = quantize_model(net, MSP_RATIO)
    for i, ql in q.layers.items():
        W = reshape_to_gemm(net.layers[i])
        for r, tag in enumerate(ql.tags):
            lv = q.config.levels(tag)
            assert np.array_equal(q.weight_matrix(i)[r], project_array(lv, ql.alpha[r], W[r]))


def test_quantize_model_needs_quantizable_layer():
    from mspquant.core import ReLU

    with pytest.raises(ValidationError):
        quantize_model(NetworkIR((ReLU(),)), MSP_RATIO)
