"""Quantization math: worked examples, round-trip/idempotence properties,
matrix-helper consistency, and bit-budget accounting."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockqat.errors import DimensionError, DomainError, NumericError
from blockqat.quant import (
    GroupParams,
    QuantSpec,
    avg_bits,
    dequantize,
    dequantize_matrix,
    expand_groups,
    group_sum,
    init_group_params,
    init_matrix_params,
    model_size_bits,
    model_size_bytes,
    quantize,
    quantize_matrix,
)

W4 = np.array([0.9, -0.4, 0.1, 0.6])


class TestInitGroupParams:
    def test_minmax_rule(self):
        p = init_group_params(W4, QuantSpec(2, 4))
        assert p.s == pytest.approx(1.3 / 3)
        assert p.z == 1.0

    def test_constant_group_hits_eps_floor(self):
        p = init_group_params(np.zeros(4), QuantSpec(2, 4))
        assert p.s == 1e-8 and p.z == 0.0

    def test_exact_range_fit(self):
        p = init_group_params(np.array([0.0, 3.0]), QuantSpec(2, 2))
        assert p.s == 1.0 and p.z == 0.0

    def test_empty_group(self):
        with pytest.raises(DimensionError):
            init_group_params(np.array([]), QuantSpec(2, 4))


class TestQuantizeDequantize:
    def test_worked_vector(self):
        spec = QuantSpec(2, 4)
        p = init_group_params(W4, spec)
        np.testing.assert_array_equal(quantize(W4, p, spec), [3, 0, 1, 2])

    def test_zero_maps_to_zero(self):
        p = GroupParams(s=np.float64(1.0), z=np.float64(0.0))
        assert quantize(np.array([0.0]), p, QuantSpec(2, 1))[0] == 0

    def test_clamp_saturation(self):
        p = GroupParams(s=np.float64(0.5), z=np.float64(0.0))
        assert quantize(np.array([100.0]), p, QuantSpec(2, 1))[0] == 3

    def test_nonfinite_rejected(self):
        p = GroupParams(s=np.float64(1.0), z=np.float64(0.0))
        with pytest.raises(NumericError):
            quantize(np.array([np.nan]), p, QuantSpec(2, 1))

    def test_dequantize_worked_vector(self):
        spec = QuantSpec(2, 4)
        p = init_group_params(W4, spec)
        got = dequantize(np.array([3, 0, 1, 2]), p, spec)
        np.testing.assert_allclose(got, [0.86667, -0.43333, 0.0, 0.43333], atol=1e-4)

    def test_zero_point_maps_to_zero(self):
        p = GroupParams(s=np.float64(0.7), z=np.float64(2.0))
        assert dequantize(np.array([2]), p, QuantSpec(2, 1))[0] == 0.0

    def test_identity_params(self):
        p = GroupParams(s=np.float64(1.0), z=np.float64(0.0))
        ints = np.arange(4)
        np.testing.assert_array_equal(dequantize(ints, p, QuantSpec(2, 4)), ints)

    def test_out_of_range_int(self):
        p = GroupParams(s=np.float64(1.0), z=np.float64(0.0))
        with pytest.raises(DomainError):
            dequantize(np.array([4]), p, QuantSpec(2, 1))

    def test_round_half_to_even(self):
        p = GroupParams(s=np.float64(1.0), z=np.float64(0.0))
        spec = QuantSpec(4, 4)
        np.testing.assert_array_equal(
            quantize(np.array([0.5, 1.5, 2.5, 3.5]), p, spec), [0, 2, 2, 4])


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(
    bits=st.sampled_from([2, 3, 4, 8]),
    s=st.floats(1e-4, 10.0),
    z_frac=st.floats(0.0, 1.0),
    data=st.data(),
)
def test_round_trip_bound_and_idempotence(bits, s, z_frac, data):
    spec = QuantSpec(bits, 8)
    qmax = spec.qmax
    z = float(np.floor(z_frac * qmax))
    p = GroupParams(s=np.float64(s), z=np.float64(z))
    # w inside the representable range [-z*s, (qmax - z)*s]
    w = np.array(data.draw(st.lists(
        st.floats(-z * s, (qmax - z) * s, allow_nan=False), min_size=8, max_size=8)))
    q = quantize(w, p, spec)
    err = np.abs(w - dequantize(q, p, spec))
    assert np.all(err <= s / 2 * (1 + 1e-9))
    q2 = quantize(dequantize(q, p, spec), p, spec)
    np.testing.assert_array_equal(q2, q)


def test_matrix_helpers_match_scalar_loop():
    rng = np.random.default_rng(0)
    spec = QuantSpec(2, 3)  # in=8 leaves a tail group of 2
    w = rng.normal(size=(4, 8))
    p = init_matrix_params(w, spec)
    assert p.s.shape == (4, 3) and p.z.shape == (4, 3)
    for r in range(4):
        for gi, lo in enumerate(range(0, 8, 3)):
            grp = w[r, lo:lo + 3]
            ref = init_group_params(grp, spec)
            assert p.s[r, gi] == pytest.approx(float(ref.s))
            assert p.z[r, gi] == float(ref.z)
    q = quantize_matrix(w, p, spec)
    wd = dequantize_matrix(q, p, spec)
    for r in range(4):
        for gi, lo in enumerate(range(0, 8, 3)):
            sub = GroupParams(s=p.s[r, gi], z=p.z[r, gi])
            np.testing.assert_array_equal(q[r, lo:lo + 3], quantize(w[r, lo:lo + 3], sub, spec))
            np.testing.assert_allclose(wd[r, lo:lo + 3], dequantize(q[r, lo:lo + 3], sub, spec))


def test_expand_and_group_sum_are_adjoint():
    rng = np.random.default_rng(1)
    spec = QuantSpec(4, 5)  # in=12: groups 5,5,2
    per_group = rng.normal(size=(3, 3))
    per_elem = expand_groups(per_group, spec, 12)
    assert per_elem.shape == (3, 12)
    back = group_sum(np.ones_like(per_elem), spec, 12)
    np.testing.assert_array_equal(back, [[5, 5, 2]] * 3)
    rand = rng.normal(size=(3, 12))
    # <expand(a), b> == <a, group_sum(b)>
    lhs = float(np.sum(per_elem * rand))
    rhs = float(np.sum(per_group * group_sum(rand, spec, 12)))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_channelwise_group():
    spec = QuantSpec(4, -1)
    assert spec.effective_group(64) == 64
    assert spec.n_groups(64) == 1


# ---------------------------------------------------------------------------
# bit budgets
# ---------------------------------------------------------------------------

class TestAvgBits:
    def test_w2g64(self):
        assert avg_bits(QuantSpec(2, 64)) == pytest.approx(2.28125)

    def test_w2g64_fp16_zero_points(self):
        assert avg_bits(QuantSpec(2, 64), z_fp16=True) == pytest.approx(2.50)

    def test_w4g32(self):
        assert avg_bits(QuantSpec(4, 32)) == pytest.approx(4.625)

    def test_monotonic_in_group_and_bits(self):
        for n in (2, 3, 4, 8):
            vals = [avg_bits(QuantSpec(n, g)) for g in (16, 32, 64, 128, 256)]
            assert all(a > b for a, b in zip(vals, vals[1:]))
        for g in (32, 64, 128):
            vals = [avg_bits(QuantSpec(n, g)) for n in (2, 3, 4, 8)]
            assert all(a < b for a, b in zip(vals, vals[1:]))

    def test_channelwise_needs_extent(self):
        with pytest.raises(DimensionError):
            avg_bits(QuantSpec(2, -1))
        assert avg_bits(QuantSpec(2, -1), in_dim=64) == pytest.approx(2.28125)


class TestModelSize:
    def test_single_layer_bytes(self):
        # 4x4, N=2, g=4: 4B weights + 1B zero points + 8B step sizes
        assert model_size_bytes([(4, 4)], QuantSpec(2, 4)) == 13

    def test_no_quantized_layers(self):
        assert model_size_bytes([], QuantSpec(2, 4), fp_param_count=100) == 200

    def test_bits_cross_check_against_avg_bits(self):
        spec = QuantSpec(2, 64)
        bits = model_size_bits([(2, 64)], spec)
        assert bits == 292
        assert bits == pytest.approx(avg_bits(spec) * 2 * 64)

    def test_bytes_within_padding_slack_of_avg_bits(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            spec = QuantSpec(int(rng.choice([2, 3, 4, 8])), int(rng.choice([16, 32, 64])))
            dims = [(int(rng.integers(1, 64)), int(rng.integers(1, 256))) for _ in range(3)]
            got = model_size_bytes(dims, spec)
            ideal = sum(o * i for o, i in dims) * avg_bits(spec) / 8
            slack = sum(o + 1 for o, _ in dims) + sum(
                o * spec.n_groups(i) * (spec.bits + 16) / 8 for o, i in dims)
            assert ideal <= got <= ideal + slack + 8
