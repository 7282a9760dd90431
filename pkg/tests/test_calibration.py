import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qtlab.calibration import (
    DEFAULT_THRESHOLDS,
    EMA,
    NUM_BINS,
    OMSE,
    ActivationStats,
    MinMax,
    Percentile,
    calibrate,
    collect_stats,
    histogram_mse,
    omse_grid,
    parse_method,
    saturation_sweep,
)
from qtlab.data import TaskConfig, make_dataset
from qtlab.errors import ConfigurationError, DataError, DegenerateInputError, DomainError
from qtlab.model import ToyTransformer, ToyTransformerConfig
from qtlab.quantizer import fake_quant, scale_from_range


def _stats(batches):
    s = ActivationStats("s")
    for b in batches:
        s.observe(b)
    return s


class TestActivationStats:
    def test_running_max_and_moments(self, rng):
        batches = [rng.normal(loc=0.3, scale=s, size=500) for s in (0.5, 2.0, 1.0)]
        s = _stats(batches)
        pooled = np.concatenate(batches)
        assert s.max_abs == np.max(np.abs(pooled))
        assert s.sample_count == pooled.size
        assert s.stddev == pytest.approx(np.std(pooled), rel=1e-12)
        assert s.batch_maxes == [float(np.max(np.abs(b))) for b in batches]

    def test_histogram_counts_every_sample(self, rng):
        s = _stats([rng.normal(size=300), 5 * rng.normal(size=300), 40 * rng.normal(size=10)])
        assert s.histogram.sum() == 610
        assert s.hist_range >= s.max_abs
        assert s.hist_range == 2.0 ** np.ceil(np.log2(s.hist_range))

    def test_merge_matches_sequential(self, rng):
        a = [rng.normal(size=200) for _ in range(3)]
        b = [30 * rng.normal(size=200) for _ in range(2)]
        seq = _stats(a + b)
        merged = _stats(a).merge(_stats(b))
        np.testing.assert_array_equal(merged.histogram, seq.histogram)
        assert merged.max_abs == seq.max_abs
        assert merged.stddev == pytest.approx(seq.stddev, rel=1e-12)
        assert merged.batch_maxes == seq.batch_maxes

    def test_merge_commutes_on_histogram(self, rng):
        a, b = _stats([rng.normal(size=100)]), _stats([9 * rng.normal(size=100)])
        np.testing.assert_array_equal(a.merge(b).histogram, b.merge(a).histogram)

    def test_rejects_empty_and_non_finite(self):
        s = ActivationStats("x")
        with pytest.raises(DataError):
            s.observe(np.zeros(0))
        with pytest.raises(DataError):
            s.observe(np.array([1.0, np.nan]))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 0.999))
    def test_percentile_close_to_sort_oracle(self, seed, p):
        rng = np.random.default_rng(seed)
        x = rng.standard_t(3, size=4000)
        s = _stats([x])
        exact = np.quantile(np.abs(x), p)
        # the histogram estimate is accurate to about one bin
        assert abs(s.percentile(p) - exact) <= 2 * s.hist_range / NUM_BINS + 1e-12

    def test_percentile_is_monotone(self, rng):
        s = _stats([rng.standard_t(2, size=5000)])
        ps = np.linspace(0.0, 1.0, 101)
        vals = [s.percentile(p) for p in ps]
        assert np.all(np.diff(vals) >= 0)
        assert vals[-1] == s.max_abs

    def test_percentile_domain(self, rng):
        s = _stats([rng.normal(size=10)])
        with pytest.raises(DomainError):
            s.percentile(1.01)
        with pytest.raises(DataError):
            ActivationStats().percentile(0.5)


class TestMethods:
    def test_parse(self):
        assert parse_method("MinMax") == MinMax()
        assert parse_method("percentile", p=0.99999) == Percentile(0.99999)
        assert parse_method("mse") == OMSE()
        assert parse_method("ema", decay=0.5) == EMA(0.5)
        with pytest.raises(ConfigurationError):
            parse_method("kl")

    @pytest.mark.parametrize("bad", [lambda: EMA(0.0), lambda: EMA(1.0), lambda: Percentile(0.0), lambda: OMSE(1)])
    def test_invalid_parameters(self, bad):
        with pytest.raises(DomainError):
            bad()

    def test_minmax_and_percentile_one_agree(self, rng):
        s = _stats([rng.standard_t(2, size=1000) for _ in range(4)])
        for bits in (6, 7, 8):
            assert calibrate(s, Percentile(1.0), bits) == calibrate(s, MinMax(), bits)
            assert calibrate(s, MinMax(), bits).clip == pytest.approx(s.max_abs, rel=1e-15)

    def test_ema_recursion(self, rng):
        batches = [rng.normal(scale=k + 1, size=100) for k in range(6)]
        s = _stats(batches)
        ema = float(np.max(np.abs(batches[0])))
        for b in batches[1:]:
            ema = 0.3 * float(np.max(np.abs(b))) + 0.7 * ema
        assert calibrate(s, EMA(0.3), 8).clip == pytest.approx(ema, rel=1e-12)

    def test_omse_beats_minmax_on_heavy_tails(self, rng):
        x = rng.standard_t(2, size=20_000)
        s = _stats([x])
        spec = calibrate(s, OMSE(), 6)
        mse = lambda sp: np.mean((x - fake_quant(x, sp)) ** 2)
        assert mse(spec) < mse(calibrate(s, MinMax(), 6))

    def test_histogram_mse_tracks_raw_mse(self, rng):
        x = rng.normal(size=50_000)
        s = _stats([x])
        for r in (0.5, 1.5, 3.0, s.max_abs):
            raw = np.mean((x - fake_quant(x, scale_from_range(r, 6))) ** 2)
            assert histogram_mse(s, r, 6) == pytest.approx(raw, rel=0.02)

    def test_omse_grid_spans_median_to_max(self, rng):
        s = _stats([rng.normal(size=2000)])
        g = omse_grid(s, 16)
        assert len(g) == 16
        assert g[0] == pytest.approx(s.percentile(0.5))
        assert g[-1] == pytest.approx(s.max_abs)
        assert np.all(np.diff(g) > 0)

    def test_degenerate_inputs(self):
        with pytest.raises(DataError):
            calibrate(ActivationStats(), MinMax(), 8)
        with pytest.raises(DegenerateInputError):
            calibrate(_stats([np.zeros(10)]), MinMax(), 8)


@pytest.fixture(scope="module")
def tiny():
    data = make_dataset(TaskConfig(n_samples=400, seed=2))
    model = ToyTransformer(ToyTransformerConfig(depth=1, dim=16, heads=2, seed=2))
    return model, data


class TestModelCalibration:
    def test_collect_stats_covers_all_sites(self, tiny):
        model, data = tiny
        stats = collect_stats(model, data.calibration_batches(2, 50))
        assert set(stats) == set(model.site_ids)
        assert all(len(s.batch_maxes) == 2 for s in stats.values())

    def test_calibration_batches_protocol(self, tiny):
        _, data = tiny
        batches = data.calibration_batches(3, 20)
        assert [len(b) for b in batches] == [20, 20, 20]
        np.testing.assert_array_equal(np.concatenate(batches), data.x_train[:60])
        with pytest.raises(DataError):
            data.calibration_batches(10, 100)

    def test_sweep_one_point_per_threshold(self, tiny):
        model, data = tiny
        pts = saturation_sweep(model, data, thresholds=(0.999, 1.0), bit_width=8, batches=2, batch_size=50)
        assert [p.threshold for p in pts] == [0.999, 1.0]
        assert all(0.0 <= p.accuracy <= 1.0 for p in pts)
        assert set(pts[0].decompositions) == set(model.site_ids)

    @pytest.mark.parametrize("thresholds", [(), (1.0, 0.999), (0.5, 1.0), (0.999, 1.01)])
    def test_sweep_validates_thresholds(self, tiny, thresholds):
        model, data = tiny
        with pytest.raises(ConfigurationError):
            saturation_sweep(model, data, thresholds=thresholds, batches=2, batch_size=50)

    def test_default_grid_is_ascending_and_ends_at_minmax(self):
        assert list(DEFAULT_THRESHOLDS) == sorted(DEFAULT_THRESHOLDS)
        assert DEFAULT_THRESHOLDS[-1] == 1.0
