import numpy as np
import pytest

from mspquant.assignment import quantize_matrix
from mspquant.errors import (
    EmptyDatasetError,
    OverflowRiskError,
    ShapeMismatchError,
    UnfinalizedModelError,
    ValidationError,
)
from mspquant.data import Dataset
from mspquant.qmodel import QuantizedLayer, QuantizedModel, SchemeConfig
from mspquant.quantizers import QuantScheme, build_levels, encode, spot_splits
from mspquant.shift import (
    MAX_FAN_IN,
    accumulator_bound,
    check_accumulator_bound,
    gemm_rel_error,
    hetero_gemm,
    infer,
    integer_gemm,
    reference_gemm,
    run_layers,
    spot_mac,
)


def shift_schemes(bits_range):
    out = []
    for m in bits_range:
        out.append(QuantScheme.pot(m))
        out.extend(QuantScheme.spot(m, m1, m2) for m1, m2 in spot_splits(m))
    return out


def test_spot_mac_example():
    lv = build_levels(QuantScheme.spot(5, 2, 2))
    assert lv.frac_bits == 3
    raw = 2 ** -1 + 2 ** -3
    code = encode(lv, raw / lv.n_raw)
    assert lv.shift_terms(code) == (False, 0, 2)
    assert spot_mac(5, code, lv) == (5 << 2) + (5 << 0) == 25
    assert all(spot_mac(0, c, lv) == 0 for c in range(1 << lv.bits))
    with pytest.raises(ValidationError):
        spot_mac(-1, code, lv)


@pytest.mark.parametrize("scheme", shift_schemes(range(3, 7)), ids=str)
def test_spot_mac_exhaustive(scheme):
    lv = build_levels(scheme)
    for code in range(1 << scheme.bits):
        n = lv.numerators[code]
        for a in range(16):
            assert spot_mac(a, code, lv) == a * n


def test_numerators_are_exact_dyadic():
    for scheme in shift_schemes(range(3, 9)):
        lv = build_levels(scheme)
        for code, n in enumerate(lv.numerators):
            neg, s1, s2 = lv.shift_terms(code)
            mag = (1 << s1 if s1 >= 0 else 0) + (1 << s2 if s2 >= 0 else 0)
            assert n == (-mag if neg else mag)


def mixed_layer(rng, R=4, C=8, tags=("s", "s", "f", "8")):
    W = rng.normal(size=(R, C))
    return quantize_matrix(W, np.array(tags), SchemeConfig())


def test_hetero_gemm_mixed_4x8(rng):
    layer = mixed_layer(rng)
    A = rng.integers(0, 16, size=(10, 8))
    s_a = 0.37 / 15
    b = rng.normal(size=4)
    out = hetero_gemm(A, layer, s_a, b, 4)
    ref = reference_gemm(A, layer, s_a, b)
    assert gemm_rel_error(out, ref, A, layer, s_a, b) <= 1e-9
    np.testing.assert_allclose(out, ref, rtol=1e-9, atol=1e-12)


def test_path_equivalence_under_row_swap(rng):
    """A row's output does not depend on which datapath computes it."""
    layer = mixed_layer(rng, 6, 9, tags=("s", "f", "8", "s", "p", "f"))
    A = rng.integers(0, 16, size=(7, 9))
    shift_out = hetero_gemm(A, layer, 0.1)
    for r in range(6):
        direct = (A * 0.1) @ layer.dequantized()[r]
        np.testing.assert_allclose(shift_out[:, r], direct, rtol=1e-9, atol=1e-12)


def test_permutation_layer_is_exact(rng):
    P = np.eye(5)[rng.permutation(5)]
    layer = quantize_matrix(P, np.array(["f"] * 5), SchemeConfig())
    A = rng.integers(0, 16, size=(3, 5))
    out = hetero_gemm(A, layer, 1.0)
    assert np.array_equal(out, (A @ P.T).astype(float))
    spot = quantize_matrix(P, np.array(["s"] * 5), SchemeConfig())
    assert np.array_equal(hetero_gemm(A, spot, 1.0), (A @ P.T).astype(float))


def test_zero_activations(rng):
    layer = mixed_layer(rng)
    assert not hetero_gemm(np.zeros((2, 8), dtype=int), layer, 0.5).any()


def test_integer_gemm_errors(rng):
    layer = mixed_layer(rng)
    with pytest.raises(ShapeMismatchError):
        integer_gemm(np.zeros((2, 7), dtype=int), layer)
    with pytest.raises(ValidationError):
        integer_gemm(-np.ones((2, 8), dtype=int), layer)


def test_overflow_bound_check():
    lv = build_levels(QuantScheme.spot(8, 6, 1))
    with pytest.raises(OverflowRiskError):
        check_accumulator_bound(lv, 16, 4)
    fixed = build_levels(QuantScheme.fixed(8))
    with pytest.raises(OverflowRiskError):
        check_accumulator_bound(fixed, MAX_FAN_IN + 1, 4)
    # every 4-bit scheme and the 8-bit fixed grid are safe at the largest fan-in
    for s in [QuantScheme.fixed(4), QuantScheme.fixed(8), QuantScheme.pot(4), QuantScheme.spot(4)]:
        b = check_accumulator_bound(build_levels(s), MAX_FAN_IN, 8)
        assert b < 2 ** 63 - 1


def test_worst_case_accumulation_fits(rng):
    s = QuantScheme.spot(6, 3, 2)
    lv = build_levels(s)
    C = 4096
    big = int(np.argmax(np.abs(lv.numerators)))
    layer = QuantizedLayer(np.array(["s"]), np.array([1.0]), np.full((1, C), big), None,
                           SchemeConfig(6, 3, 2))
    acc = integer_gemm(np.full((1, C), 15), layer, 4)
    assert abs(int(acc[0, 0])) == accumulator_bound(lv, C, 4)


def test_infer_errors_and_checksums(moons_run):
    _, res, _ = moons_run
    model = res.model
    empty = Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int), "test", 2)
    with pytest.raises(EmptyDatasetError):
        infer(model, empty)
    unfinal = QuantizedModel(model.net, model.layers, model.config, model.ratio, model.act, False)
    with pytest.raises(UnfinalizedModelError):
        infer(unfinal, empty)
    with pytest.raises(ValidationError):
        infer(model, empty, engine="gpu")
    one = Dataset(np.array([[0.5, 0.25]]), np.array([1]), "test", 2)
    a, b = infer(model, one), infer(model, one)
    assert a.checksums == b.checksums and len(a.checksums) == len(model.net.layers)


def test_engines_agree_on_moons(moons_run, moons):
    _, res, _ = moons_run
    _, te = moons
    s = infer(res.model, te, "shift")
    f = infer(res.model, te, "float_ref")
    assert np.array_equal(s.predictions, f.predictions)
    assert s.accuracy == f.accuracy


def test_run_layers_dump(moons_run, moons):
    _, res, _ = moons_run
    dump = []
    out = run_layers(res.model, moons[1].samples[:4], "shift", dump)
    assert len(dump) == len(res.model.net.layers)
    assert np.array_equal(dump[-1], out)
