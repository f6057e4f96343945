import ml_dtypes
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from lowrank_quant.quant import (
    FP4_E2M1,
    FP4_E2M1_MAGNITUDES,
    FP8_E4M3,
    INT4,
    INT8,
    NF4,
    PER_CHANNEL_OUT,
    PER_TENSOR,
    PER_TOKEN,
    Granularity,
    QuantConfig,
    QuantDType,
    ScaleDType,
    dequantize,
    fake_quant,
    fake_quant_weight,
    fp8_e4m3_magnitudes,
    int4_config,
    int8_act_config,
    int8_weight_config,
    lattice_decode,
    lattice_encode,
    lattice_values,
    nf4_levels,
    nf4_weight_config,
    nvfp4_config,
    pack_codes,
    packed_nbytes,
    quantize,
    quantize_weight,
    round_fp8_e4m3,
    round_scale,
    unpack_codes,
)
from lowrank_quant.tensor import Rng


def cfg(dtype, gran=PER_TENSOR, sd=ScaleDType.REAL32, two_level=False):
    return QuantConfig(dtype, gran, sd, two_level)


class TestDTypes:
    @pytest.mark.parametrize("k,q", [(2, 1), (3, 3), (4, 7), (5, 15), (8, 127)])
    def test_int_qmax(self, k, q):
        assert QuantDType.int_k(k).q_max == q

    def test_float_qmax(self):
        assert FP4_E2M1.q_max == 6 and FP8_E4M3.q_max == 448 and NF4.q_max == 1

    @pytest.mark.parametrize("k", [1, 9])
    def test_int_width_range(self, k):
        with pytest.raises(ValueError):
            QuantDType.int_k(k)

    def test_fp4_magnitudes(self):
        assert FP4_E2M1_MAGNITUDES == (0, 0.5, 1, 1.5, 2, 3, 4, 6)

    @pytest.mark.parametrize("name", ["int4", "int8", "fp4_e2m1", "nf4", "fp8_e4m3"])
    def test_name_round_trip(self, name):
        assert QuantDType.from_name(name).name == name


class TestNf4Levels:
    def test_matches_normal_quantile_construction(self):
        offset = 0.9677083
        pos = norm.ppf(np.linspace(offset, 0.5, 9)[:-1])
        neg = -norm.ppf(np.linspace(offset, 0.5, 8)[:-1])
        v = np.sort(np.concatenate([pos, [0.0], neg]))
        v = v / np.abs(v).max()
        np.testing.assert_allclose(nf4_levels(), v, atol=1e-7)

    def test_shape_and_extremes(self):
        lv = nf4_levels()
        assert lv.size == 16 and np.all(np.diff(lv) > 0)
        assert lv[7] == 0.0 and lv[0] == -1.0 and lv[-1] == 1.0

    @pytest.mark.parametrize("c", [0.25, 1.0, 3.0])
    def test_scaled_levels_round_trip(self, c):
        x = (nf4_levels() * c).reshape(2, 8)
        out = fake_quant(x, cfg(NF4, sd=ScaleDType.REAL64))
        np.testing.assert_array_equal(out, x)


class TestFp8:
    def test_magnitudes_match_reference_dtype(self):
        ref = np.arange(127, dtype=np.uint8).view(ml_dtypes.float8_e4m3fn).astype(np.float64)
        np.testing.assert_array_equal(fp8_e4m3_magnitudes(), ref)

    def test_rounding_matches_reference_dtype(self):
        x = Rng(3).normal(20000) * 50
        x = np.clip(x, -448, 448)
        ref = x.astype(ml_dtypes.float8_e4m3fn).astype(np.float64)
        np.testing.assert_array_equal(round_fp8_e4m3(x), ref)

    def test_saturates(self):
        np.testing.assert_array_equal(round_fp8_e4m3([1000.0, -1e9]), [448.0, -448.0])


class TestExamples:
    def test_int4_per_tensor(self):
        q = quantize([[1.75, -3.5], [7.0, 0.0]], cfg(INT4))
        assert q.scales[0, 0] == 1.0
        np.testing.assert_array_equal(q.unpacked_codes(), [[2, -4], [7, 0]])
        np.testing.assert_array_equal(dequantize(q), [[2, -4], [7, 0]])

    def test_int4_groups(self):
        q = quantize([[3.0, 7.0, 60.0, 140.0]], cfg(INT4, Granularity.per_group(2)))
        np.testing.assert_array_equal(q.scales, [[1.0, 20.0]])
        np.testing.assert_array_equal(q.unpacked_codes(), [[3, 7, 3, 7]])

    @pytest.mark.parametrize(
        "c", [cfg(INT4), int4_config(), nvfp4_config(), nf4_weight_config(), int8_act_config()]
    )
    def test_all_zero(self, c):
        q = quantize(np.zeros((3, 70)), c)
        assert np.all(q.unpacked_codes() == 0) or c.dtype.kind.value == "nf4"
        assert np.array_equal(dequantize(q), np.zeros((3, 70)))

    def test_fp4_single_value(self):
        q = quantize([[0.9]], cfg(FP4_E2M1, sd=ScaleDType.REAL64))
        assert q.scales[0, 0] == pytest.approx(0.15, rel=1e-15)
        assert q.lattice()[0, 0] == 6.0
        assert dequantize(q)[0, 0] == pytest.approx(0.9, rel=1e-15)


class TestRounding:
    @pytest.mark.parametrize("y,code", [(2.5, 3), (-2.5, -3), (0.5, 1), (-0.5, -1), (0.49, 0), (9.0, 7), (-9.0, -7)])
    def test_int_half_away_from_zero(self, y, code):
        assert lattice_encode(np.array([y]), INT4)[0] == code

    @pytest.mark.parametrize("y,value", [(0.25, 0.0), (0.75, 1.0), (1.25, 1.0), (2.5, 2.0), (3.5, 4.0), (5.0, 4.0), (-5.0, -4.0), (7.0, 6.0)])
    def test_fp4_ties_to_even_index(self, y, value):
        assert lattice_decode(lattice_encode(np.array([y]), FP4_E2M1), FP4_E2M1)[0] == value

    def test_fp4_negative_zero_is_zero_code(self):
        assert lattice_encode(np.array([-0.1]), FP4_E2M1)[0] == 0

    @pytest.mark.parametrize("dtype", [INT4, INT8, FP4_E2M1, NF4, FP8_E4M3])
    def test_codes_decode_into_lattice(self, dtype):
        y = Rng(1).normal(500) * dtype.q_max
        vals = lattice_decode(lattice_encode(y, dtype), dtype)
        assert np.all(np.isin(vals, lattice_values(dtype)))

    @pytest.mark.parametrize("dtype", [INT4, FP4_E2M1, NF4])
    def test_nearest_level(self, dtype):
        y = Rng(2).uniform(400) * 2 * dtype.q_max - dtype.q_max
        got = lattice_decode(lattice_encode(y, dtype), dtype)
        lv = lattice_values(dtype)
        best = np.abs(y[:, None] - lv[None]).min(axis=1)
        np.testing.assert_allclose(np.abs(y - got), best, atol=1e-15)


class TestPacking:
    def test_nibble_layout(self):
        packed = pack_codes(np.array([1, -1, 7]), INT4)
        np.testing.assert_array_equal(packed, [0xF1, 0x07])

    @given(st.lists(st.integers(-8, 7), min_size=0, max_size=41))
    @settings(max_examples=100, deadline=None)
    def test_int4_bijection(self, codes):
        c = np.array(codes, dtype=np.int64)
        p = pack_codes(c, INT4)
        assert p.size == packed_nbytes(c.size, INT4)
        np.testing.assert_array_equal(unpack_codes(p, c.size, INT4), c)

    @given(st.lists(st.integers(0, 15), max_size=33), st.sampled_from([FP4_E2M1, NF4]))
    @settings(max_examples=100, deadline=None)
    def test_table_nibble_bijection(self, codes, dtype):
        c = np.array(codes, dtype=np.int64)
        np.testing.assert_array_equal(unpack_codes(pack_codes(c, dtype), c.size, dtype), c)

    @given(st.lists(st.integers(-128, 127), max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_int8_bytes(self, codes):
        c = np.array(codes, dtype=np.int64)
        p = pack_codes(c, INT8)
        assert p.size == c.size
        np.testing.assert_array_equal(unpack_codes(p, c.size, INT8), c)

    def test_odd_pad_ignored(self):
        p = pack_codes(np.array([3]), INT4)
        p[-1] |= 0xA0  # garbage in the pad nibble
        np.testing.assert_array_equal(unpack_codes(p, 1, INT4), [3])


class TestScales:
    def test_real16_rounding(self):
        q = quantize([[1.0, 0.1]], cfg(INT4, sd=ScaleDType.REAL16))
        assert q.scales[0, 0] == float(np.float16(1.0 / 7))

    def test_real16_overflow_raises(self):
        with pytest.raises(ValueError, match="overflows"):
            quantize([[1e6]], cfg(INT4, sd=ScaleDType.REAL16))

    def test_tiny_scale_raised_to_min_positive(self):
        np.testing.assert_array_equal(round_scale([1e-30], ScaleDType.REAL16), [2.0**-24])

    def test_per_channel_out_and_token_shapes(self):
        x = Rng(0).standard_normal(5, 3)
        assert quantize_weight(x, cfg(INT8, PER_CHANNEL_OUT)).scales.shape == (1, 3)
        assert quantize(x, cfg(INT8, PER_TOKEN)).scales.shape == (5, 1)

    def test_weight_groups_run_down_columns(self):
        w = np.arange(1.0, 13.0).reshape(6, 2)
        q = quantize_weight(w, cfg(INT4, Granularity.per_group(4), ScaleDType.REAL64))
        assert q.scales.shape == (2, 2)
        np.testing.assert_allclose(q.scales, [[7 / 7, 8 / 7], [11 / 7, 12 / 7]])
        assert q.short_last_group

    def test_short_trailing_group_uses_own_absmax(self):
        x = np.array([[1.0, 1.0, 1.0, 100.0, 0.5]])
        q = quantize(x, cfg(INT4, Granularity.per_group(2), ScaleDType.REAL64))
        np.testing.assert_allclose(q.scales, [[1 / 7, 100 / 7, 0.5 / 7]])
        assert q.short_last_group

    def test_nvfp4_two_level(self):
        x = Rng(4).standard_normal(4, 32) * 3
        q = quantize(x, nvfp4_config())
        amax = np.abs(x).max()
        assert q.tensor_scale == float(np.float32(amax / (6 * 448)))
        np.testing.assert_array_equal(round_fp8_e4m3(q.scales), q.scales)
        assert q.scales.shape == (4, 2)
        assert np.abs(x - dequantize(q)).max() <= amax / 6 + 1e-12

    def test_two_level_requires_fp8(self):
        with pytest.raises(ValueError):
            QuantConfig(FP4_E2M1, Granularity.per_group(16), ScaleDType.REAL16, two_level=True)

    @pytest.mark.parametrize("g", [0, -3])
    def test_group_size_positive(self, g):
        with pytest.raises(ValueError):
            Granularity("per_group", g)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            quantize([[np.inf]], int4_config())


class TestPresets:
    def test_values(self):
        assert int4_config() == QuantConfig(INT4, Granularity.per_group(64), ScaleDType.REAL16)
        assert nvfp4_config() == QuantConfig(FP4_E2M1, Granularity.per_group(16), ScaleDType.FP8_E4M3, True)
        assert int8_act_config() == QuantConfig(INT8, PER_TOKEN, ScaleDType.REAL32)
        assert int8_weight_config() == QuantConfig(INT8, PER_CHANNEL_OUT, ScaleDType.REAL32)

    @pytest.mark.parametrize(
        "c", [int4_config(), nvfp4_config(), int8_act_config(), int8_weight_config(), nf4_weight_config()]
    )
    def test_dict_round_trip(self, c):
        assert QuantConfig.from_dict(c.to_dict()) == c


class TestProperties:
    @pytest.mark.parametrize("k", range(2, 9))
    def test_round_trip_error_bound(self, k):
        dt = QuantDType.int_k(k)
        for s in range(50):
            x = Rng(s).standard_normal(6, 7) * (s + 1)
            err = np.abs(x - fake_quant(x, cfg(dt, sd=ScaleDType.REAL64))).max()
            assert err <= np.abs(x).max() / (2 * dt.q_max) + 1e-12

    def test_idempotent_per_tensor(self):
        for s in range(100):
            x = Rng(s).standard_normal(8, 8)
            once = fake_quant(x, cfg(INT4))
            np.testing.assert_array_equal(fake_quant(once, cfg(INT4)), once)

    @given(st.integers(0, 2**32), st.floats(0.01, 100.0))
    @settings(max_examples=60, deadline=None)
    def test_scale_equivariance(self, seed, c):
        # Where codes agree the outputs differ only by the fp16 rounding of the
        # scale; a code can only change for inputs sitting near a rounding boundary.
        x = Rng(seed).standard_normal(5, 5)
        c16 = cfg(INT4, sd=ScaleDType.REAL16)
        qa, qb = quantize(c * x, c16), quantize(x, c16)
        a, b = dequantize(qa), c * dequantize(qb)
        same = qa.unpacked_codes() == qb.unpacked_codes()
        np.testing.assert_allclose(a[same], b[same], rtol=2.0**-10, atol=0)
        y = x / (np.abs(x).max() / 7)
        dist = np.abs(np.abs(y) - np.floor(np.abs(y)) - 0.5)
        assert np.all(dist[~same] <= 7 * 2.0**-10)

    @pytest.mark.parametrize("e", range(-6, 7))
    def test_lattice_fixed_point(self, e):
        codes = np.array([[7, -3, 0], [2, -7, 5]], dtype=float)
        x = codes * 2.0**e
        for sd in ScaleDType:
            if sd is ScaleDType.FP8_E4M3:
                continue
            np.testing.assert_array_equal(fake_quant(x, cfg(INT4, sd=sd)), x)

    def test_dequantize_returns_writable_copy(self):
        q = quantize([[1.0, 2.0]], cfg(INT4))
        out = dequantize(q)
        out[0, 0] = 9.0
        assert dequantize(q)[0, 0] != 9.0

    def test_fake_quant_none_passthrough(self):
        x = Rng(1).standard_normal(3, 3)
        np.testing.assert_array_equal(fake_quant_weight(x, None), x)
