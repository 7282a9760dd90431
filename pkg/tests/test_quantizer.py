import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qtlab.errors import ConfigurationError, DomainError
from qtlab.model import ToyTransformer, ToyTransformerConfig
from qtlab.quantizer import (
    QuantConfig,
    QuantSpec,
    dequantize,
    fake_quant,
    minmax_weight_specs,
    quantize,
    quantize_model,
    scale_from_range,
)
from qtlab.tensor import Tensor

finite = st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False)
bits_st = st.integers(2, 16)
scale_st = st.floats(1e-4, 1e2, allow_nan=False)


class TestQuantSpec:
    @pytest.mark.parametrize("bits", [1, 17, 0, 4.5])
    def test_bad_bits(self, bits):
        with pytest.raises(DomainError):
            QuantSpec(bits, 1.0)

    @pytest.mark.parametrize("scale", [0.0, -1.0, float("inf"), float("nan")])
    def test_bad_scale(self, scale):
        with pytest.raises(DomainError):
            QuantSpec(8, scale)

    def test_qmax_and_clip(self):
        spec = QuantSpec(8, 0.5)
        assert spec.qmax == 127
        assert spec.clip == 63.5

    def test_json_round_trip(self):
        spec = QuantSpec(7, 0.0123)
        assert QuantSpec.from_json(spec.to_json()) == spec
        with pytest.raises(ConfigurationError):
            QuantSpec.from_json({"bits": 8})

    def test_scale_from_range(self):
        spec = scale_from_range(127.0, 8)
        assert spec.scale == 1.0
        assert scale_from_range(3.0, 6).clip == pytest.approx(3.0, rel=1e-15)
        with pytest.raises(DomainError):
            scale_from_range(0.0, 8)
        with pytest.raises(DomainError):
            scale_from_range(1.0, 1)


class TestFakeQuant:
    def test_round_half_to_even(self):
        spec = QuantSpec(8, 1.0)
        np.testing.assert_array_equal(fake_quant(np.array([0.5, 1.5, 2.5, -0.5, -1.5]), spec), [0.0, 2.0, 2.0, -0.0, -2.0])

    def test_clamps_symmetrically(self):
        spec = QuantSpec(4, 1.0)
        np.testing.assert_array_equal(fake_quant(np.array([100.0, -100.0]), spec), [7.0, -7.0])

    def test_tensor_in_tensor_out(self):
        out = fake_quant(Tensor([0.26]), QuantSpec(8, 0.1))
        assert isinstance(out, Tensor)
        np.testing.assert_allclose(out.data, [0.3])

    def test_quantize_dequantize_matches_fake_quant(self, rng):
        x = rng.normal(size=50)
        spec = QuantSpec(6, 0.07)
        q = quantize(x, spec)
        assert q.codes.dtype == np.int32
        assert np.all(np.abs(q.codes) <= spec.qmax)
        np.testing.assert_array_equal(dequantize(q).data, fake_quant(x, spec))

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(1, 40), elements=finite), bits_st, scale_st)
    def test_idempotent_and_symmetric(self, x, bits, scale):
        spec = QuantSpec(bits, scale)
        once = fake_quant(x, spec)
        np.testing.assert_array_equal(fake_quant(once, spec), once)
        np.testing.assert_array_equal(fake_quant(-x, spec), -once)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(2, 40), elements=finite), bits_st, scale_st)
    def test_monotone(self, x, bits, scale):
        xs = np.sort(x)
        q = fake_quant(xs, QuantSpec(bits, scale))
        assert np.all(np.diff(q) >= 0)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(1, 40), elements=finite), bits_st, scale_st)
    def test_error_bounded_inside_clip(self, x, bits, scale):
        spec = QuantSpec(bits, scale)
        inside = x[np.abs(x) <= spec.clip]
        err = np.abs(inside - fake_quant(inside, spec))
        assert np.all(err <= spec.scale / 2 * (1 + 1e-12))

    def test_values_lie_on_grid(self, rng):
        spec = QuantSpec(5, 0.3)
        codes = fake_quant(rng.normal(scale=3, size=200), spec) / spec.scale
        np.testing.assert_allclose(codes, np.round(codes), atol=1e-9)
        assert np.max(np.abs(codes)) <= spec.qmax + 1e-9


@pytest.fixture(scope="module")
def small_model():
    return ToyTransformer(ToyTransformerConfig(depth=2, dim=16, heads=2, seed=3))


class TestModelQuantization:
    def test_specs_cover_linear_weights_only(self, small_model):
        specs = minmax_weight_specs(small_model, 8)
        assert set(specs) == set(small_model.quantizable_weights())
        assert all(name.endswith(".weight") for name in specs)
        assert not any(".ln" in name or name.startswith("norm") for name in specs)

    def test_all_zero_weight_gets_unit_scale(self, small_model):
        m = small_model.clone()
        name = m.quantizable_weights()[0]
        m.params[name].data[...] = 0.0
        assert minmax_weight_specs(m, 8)[name] == QuantSpec(8, 1.0)

    def _full(self, model, bits):
        acts = {s: scale_from_range(1.0, bits) for s in model.site_ids}
        return QuantConfig(minmax_weight_specs(model, bits), acts)

    def test_missing_and_unknown_specs(self, small_model):
        cfg = self._full(small_model, 8)
        name = next(iter(cfg.weights))
        bad = QuantConfig({k: v for k, v in cfg.weights.items() if k != name}, cfg.activations)
        with pytest.raises(ConfigurationError):
            quantize_model(small_model, bad)
        bad = QuantConfig({**cfg.weights, "nope.weight": QuantSpec(8, 1.0)}, cfg.activations)
        with pytest.raises(ConfigurationError):
            quantize_model(small_model, bad)
        bad = QuantConfig(cfg.weights, {k: v for k, v in cfg.activations.items() if k != "head:out"})
        with pytest.raises(ConfigurationError):
            quantize_model(small_model, bad)
        bad = QuantConfig(cfg.weights, {**cfg.activations, "ghost:in": QuantSpec(8, 1.0)})
        with pytest.raises(ConfigurationError):
            quantize_model(small_model, bad)

    def test_quant_config_json_round_trip(self, small_model):
        cfg = self._full(small_model, 7)
        back = QuantConfig.from_json(cfg.to_json())
        assert back.weights == cfg.weights
        assert back.activations == cfg.activations

    def test_original_model_untouched(self, small_model):
        before = {k: v.data.copy() for k, v in small_model.params.items()}
        quantize_model(small_model, self._full(small_model, 4))
        for k, v in small_model.params.items():
            np.testing.assert_array_equal(v.data, before[k])

    def test_exclusion_flags(self, small_model, rng):
        x = rng.normal(size=(3, small_model.config.seq_len, small_model.config.input_dim))
        q = quantize_model(small_model, self._full(small_model, 8))
        trace = []
        q.forward(x, trace=trace)
        sites = [e for e in trace if e[0] == "site"]
        assert len(sites) == len(small_model.site_ids)
        assert all(e[2] for e in sites)
        others = [e for e in trace if e[0] in ("softmax", "layer_norm")]
        assert others and not any(e[2] for e in others)
