import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qtlab import tensor as T
from qtlab.errors import ConfigurationError, DegenerateActivationError, DimensionError, DomainError
from qtlab.outlier import (
    OutlierLossConfig,
    Schedule,
    classification_loss,
    one_hot,
    outlier_loss,
    outlier_terms,
    step_alpha,
    total_loss,
)
from qtlab.tensor import Tape, Tensor

from conftest import analytic_grad, numeric_grad, rel_err, tie_free


def _ratio_oracle(a):
    """Direct per-sample formula with numpy order statistics."""
    flat = np.abs(a.reshape(a.shape[0], -1))
    return (flat.max(axis=1) - np.median(flat, axis=1)) / a.reshape(a.shape[0], -1).std(axis=1)


class TestClassificationLoss:
    def test_matches_direct_cross_entropy(self, rng):
        logits = rng.normal(size=(5, 4))
        y = np.array([0, 3, 1, 1, 2])
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        expected = -np.mean(np.log(p[np.arange(5), y]))
        assert classification_loss(Tensor(logits), one_hot(y, 4)).item() == pytest.approx(expected, rel=1e-12)

    def test_uniform_logits_give_log_k(self):
        assert classification_loss(Tensor(np.zeros((3, 10))), one_hot([1, 2, 3], 10)).item() == pytest.approx(math.log(10))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            classification_loss(Tensor(np.zeros((3, 4))), one_hot([0, 1], 4))

    def test_gradient(self, rng):
        y = one_hot([2, 0, 1], 3)
        x = rng.normal(size=(3, 3))
        num = numeric_grad(lambda v: classification_loss(Tensor(v), y).item(), x)
        assert rel_err(analytic_grad(lambda t: classification_loss(t, y), x), num) < 1e-7


class TestOutlierTerms:
    def test_hand_constructed_value(self):
        a = Tensor(np.array([[-3.0, -1.0, -1.0, -1.0, 0.0, 0.0]]))
        assert outlier_terms([a])[0].data[0] == 2.0

    def test_symmetric_two_point_is_zero(self):
        assert outlier_terms([Tensor(np.array([[2.5, -2.5, 2.5, -2.5]]))])[0].data[0] == 0.0

    def test_matches_numpy_oracle(self, rng):
        a = rng.standard_t(3, size=(4, 5, 6))
        np.testing.assert_allclose(outlier_terms({"s": Tensor(a)})["s"].data, _ratio_oracle(a), rtol=1e-13)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
    def test_scale_invariance(self, seed, c):
        a = np.random.default_rng(seed).normal(size=(3, 11))
        base = outlier_terms([Tensor(a)])[0].data
        np.testing.assert_allclose(outlier_terms([Tensor(c * a)])[0].data, base, rtol=1e-12)

    def test_degenerate_site_named(self):
        with pytest.raises(DegenerateActivationError) as exc:
            outlier_terms({"blocks.0.ln1:out": Tensor(np.ones((2, 4)))})
        assert exc.value.site_id == "blocks.0.ln1:out"

    def test_loss_averages_sites_and_samples(self, rng):
        a, b = rng.normal(size=(3, 8)), rng.standard_t(2, size=(3, 4, 2))
        expected = np.mean(np.concatenate([_ratio_oracle(a), _ratio_oracle(b)]))
        assert outlier_loss([Tensor(a), Tensor(b)]).item() == pytest.approx(expected, rel=1e-13)
        with pytest.raises(DomainError):
            outlier_loss([])

    def test_gradient(self, rng):
        x = tie_free(rng, (3, 9))
        num = numeric_grad(lambda v: outlier_loss([Tensor(v)]).item(), x)
        assert rel_err(analytic_grad(lambda t: outlier_loss([t]), x), num) < 1e-6


class TestBlend:
    def test_endpoints_are_exact(self):
        cls, out = Tensor(1.2345), Tensor(6.789)
        assert total_loss(cls, out, 0.0).item() == 1.2345
        assert total_loss(cls, out, 1.0).item() == 6.789
        assert total_loss(cls, out, 0.25).item() == pytest.approx(0.75 * 1.2345 + 0.25 * 6.789)

    def test_alpha_domain(self):
        with pytest.raises(DomainError):
            total_loss(Tensor(1.0), Tensor(1.0), 1.5)

    def test_alpha_zero_leaves_outlier_gradient_out(self, rng):
        a = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
        logits = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        with Tape() as tape:
            loss = total_loss(classification_loss(logits, one_hot([0, 1], 3)), outlier_loss([a]), 0.0)
            tape.backward(loss)
        assert a.grad is None
        assert logits.grad is not None


class TestSchedules:
    def test_constant(self):
        cfg = OutlierLossConfig(0.3, Schedule.CONSTANT)
        assert [step_alpha(cfg, s) for s in (0, 10, 10_000)] == [0.3, 0.3, 0.3]

    def test_linear(self):
        cfg = OutlierLossConfig(0.5, "linear", total_steps=100)
        assert step_alpha(cfg, 0) == 0.5
        assert step_alpha(cfg, 50) == 0.25
        assert step_alpha(cfg, 100) == 0.0
        assert step_alpha(cfg, 150) == 0.0

    def test_cosine(self):
        cfg = OutlierLossConfig(0.8, "cosine", total_steps=10)
        assert step_alpha(cfg, 0) == pytest.approx(0.8)
        assert step_alpha(cfg, 5) == pytest.approx(0.4)
        assert step_alpha(cfg, 10) == pytest.approx(0.0, abs=1e-16)
        assert step_alpha(cfg, 20) == step_alpha(cfg, 10)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 1), st.integers(1, 500), st.sampled_from(["linear", "cosine"]))
    def test_decay_is_monotone_and_bounded(self, alpha, total, kind):
        cfg = OutlierLossConfig(alpha, kind, total_steps=total)
        vals = [step_alpha(cfg, s) for s in range(0, total + 3)]
        assert all(0.0 <= v <= alpha for v in vals)
        assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))

    def test_config_validation_and_json(self):
        with pytest.raises(DomainError):
            OutlierLossConfig(1.2)
        with pytest.raises(ConfigurationError):
            OutlierLossConfig(0.5, "linear", total_steps=0)
        with pytest.raises(ConfigurationError):
            OutlierLossConfig.from_json({"schedule": "sawtooth", "total_steps": 3})
        cfg = OutlierLossConfig(0.5, "linear", 40, ["a:in"])
        back = OutlierLossConfig.from_json(cfg.to_json())
        assert back.to_json() == {"alpha": 0.5, "schedule": "linear", "total_steps": 40, "sites": ["a:in"]}
        assert back.select(["a:in", "a:out"]) == ["a:in"]
        with pytest.raises(ConfigurationError):
            back.select(["b:in"])

    def test_negative_step(self):
        with pytest.raises(DomainError):
            step_alpha(OutlierLossConfig(0.5, "constant"), -1)
