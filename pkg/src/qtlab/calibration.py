"""Activation statistics and quantization-range calibration.

:class:`ActivationStats` accumulates, per observer site, the running max of
``|x|``, streaming moments of the signed values, the per-batch maxima (for
EMA) and a 2048-bin histogram of ``|x|``.  The histogram covers
``[0, R)`` where ``R`` is the smallest power of two above the running max;
when the max outgrows ``R`` the range doubles as often as needed and adjacent
bins are merged, so counts stay integral and two stats objects can always be
merged exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError, DegenerateInputError, DomainError
from .quantizer import QuantConfig, QuantSpec, minmax_weight_specs, quantize_model, scale_from_range
from .tensor import Tensor

__all__ = [
    "NUM_BINS",
    "ActivationStats",
    "MinMax",
    "EMA",
    "Percentile",
    "OMSE",
    "parse_method",
    "observe",
    "calibrate",
    "histogram_mse",
    "omse_grid",
    "collect_stats",
    "calibrate_model",
    "saturation_specs",
    "saturation_sweep",
    "SweepPoint",
    "DEFAULT_THRESHOLDS",
]

NUM_BINS = 2048

# dense just below 1.0, where clipping only the rarest values starts to pay off
DEFAULT_THRESHOLDS = (0.9999, 0.99992, 0.99994, 0.99996, 0.99998, 0.99999, 1.0)


class ActivationStats:
    def __init__(self, site_id=None):
        self.site_id = site_id
        self.max_abs = 0.0
        self.sample_count = 0
        self.histogram = np.zeros(NUM_BINS, dtype=np.int64)
        self.hist_range = 0.0  # 0 until a non-zero value is seen
        self.batch_maxes: list[float] = []
        self._mean = 0.0
        self._m2 = 0.0

    def __repr__(self) -> str:
        return f"ActivationStats(site_id={self.site_id!r}, max_abs={self.max_abs:.6g}, count={self.sample_count})"

    # streaming updates

    def _grow(self, new_max: float) -> None:
        if new_max <= self.hist_range:
            return
        target = 2.0 ** math.ceil(math.log2(new_max))
        if target < new_max:  # guard against log2 rounding
            target *= 2.0
        if self.hist_range > 0:
            factor = int(round(target / self.hist_range))
            self.histogram = np.bincount(np.arange(NUM_BINS) // factor, weights=self.histogram, minlength=NUM_BINS).astype(np.int64)
        self.hist_range = target

    def _bin(self, absx: np.ndarray) -> np.ndarray:
        if self.hist_range == 0:
            return np.zeros(absx.shape, dtype=np.int64)
        idx = np.floor(absx * (NUM_BINS / self.hist_range)).astype(np.int64)
        return np.minimum(idx, NUM_BINS - 1)

    def observe(self, batch) -> "ActivationStats":
        data = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
        data = data.reshape(-1)
        if data.size == 0:
            raise DataError(f"empty batch observed at site {self.site_id!r}")
        if not np.all(np.isfinite(data)):
            raise DataError(f"non-finite activation observed at site {self.site_id!r}")
        absx = np.abs(data)
        bmax = float(absx.max())
        self.batch_maxes.append(bmax)
        self.max_abs = max(self.max_abs, bmax)
        self._grow(self.max_abs)
        self.histogram += np.bincount(self._bin(absx), minlength=NUM_BINS)
        # Chan et al. pairwise update of mean / M2
        n_b = data.size
        mean_b = float(data.mean())
        m2_b = float(((data - mean_b) ** 2).sum())
        n = self.sample_count + n_b
        delta = mean_b - self._mean
        self._m2 += m2_b + delta * delta * self.sample_count * n_b / n
        self._mean += delta * n_b / n
        self.sample_count = n
        return self

    def merge(self, other: "ActivationStats") -> "ActivationStats":
        """Combine two stats.  ``batch_maxes`` are concatenated self-first."""
        out = ActivationStats(self.site_id)
        out.max_abs = max(self.max_abs, other.max_abs)
        out._grow(out.max_abs)
        for src in (self, other):
            hist = src.histogram
            if src.hist_range > 0 and src.hist_range < out.hist_range:
                factor = int(round(out.hist_range / src.hist_range))
                hist = np.bincount(np.arange(NUM_BINS) // factor, weights=hist, minlength=NUM_BINS).astype(np.int64)
            out.histogram = out.histogram + hist
        n = self.sample_count + other.sample_count
        out.sample_count = n
        if n:
            delta = other._mean - self._mean
            out._mean = (self._mean * self.sample_count + other._mean * other.sample_count) / n
            out._m2 = self._m2 + other._m2 + delta * delta * self.sample_count * other.sample_count / n
        out.batch_maxes = self.batch_maxes + other.batch_maxes
        return out

    # derived statistics

    @property
    def stddev(self) -> float:
        if self.sample_count < 2:
            return 0.0
        return math.sqrt(self._m2 / self.sample_count)

    @property
    def median_abs(self) -> float:
        return self.percentile(0.5)

    @property
    def bin_edges(self) -> np.ndarray:
        return np.linspace(0.0, self.hist_range, NUM_BINS + 1)

    def percentile(self, p: float) -> float:
        """Quantile of ``|x|`` from the pooled histogram (uniform density within a bin).

        ``p == 1`` returns the exact running max.
        """
        if not 0.0 <= p <= 1.0:
            raise DomainError(f"percentile fraction must lie in [0, 1], got {p}")
        if self.sample_count == 0:
            raise DataError(f"no samples observed at site {self.site_id!r}")
        if p == 1.0 or self.hist_range == 0:
            return self.max_abs if p == 1.0 else 0.0
        target = p * self.sample_count
        cum = np.cumsum(self.histogram)
        b = int(np.searchsorted(cum, target, side="left"))
        b = min(b, NUM_BINS - 1)
        below = cum[b - 1] if b > 0 else 0
        width = self.hist_range / NUM_BINS
        inside = self.histogram[b]
        frac = (target - below) / inside if inside > 0 else 0.0
        return float(min(self.max_abs, (b + frac) * width))


def observe(stats: ActivationStats, batch) -> ActivationStats:
    return stats.observe(batch)


# calibration methods


@dataclass(frozen=True)
class MinMax:
    name = "minmax"

    def describe(self) -> dict:
        return {"method": self.name}


@dataclass(frozen=True)
class EMA:
    """Exponential moving average of per-batch maxima.

    ``ema_1 = max_1``; ``ema_t = decay * max_t + (1 - decay) * ema_{t-1}``.
    ``decay`` therefore weights the newest batch: near 1 it tracks the last
    batch, near 0 it stays at the first.
    """

    decay: float = 0.9
    name = "ema"

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise DomainError(f"EMA decay must lie in (0, 1), got {self.decay}")

    def describe(self) -> dict:
        return {"method": self.name, "decay": self.decay}


@dataclass(frozen=True)
class Percentile:
    p: float = 0.9999
    name = "percentile"

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise DomainError(f"percentile must lie in (0, 1], got {self.p}")

    def describe(self) -> dict:
        return {"method": self.name, "p": self.p}


@dataclass(frozen=True)
class OMSE:
    grid_points: int = 128
    name = "omse"

    def __post_init__(self):
        if self.grid_points < 2:
            raise DomainError(f"OMSE needs at least 2 grid points, got {self.grid_points}")

    def describe(self) -> dict:
        return {"method": self.name, "grid_points": self.grid_points}


def parse_method(name: str, p: float = 0.9999, decay: float = 0.9, grid_points: int = 128):
    key = name.lower()
    if key == "minmax":
        return MinMax()
    if key == "ema":
        return EMA(decay)
    if key == "percentile":
        return Percentile(p)
    if key in ("omse", "mse"):
        return OMSE(grid_points)
    raise ConfigurationError(f"unknown calibration method {name!r}")


def _round_err_antiderivative(u: np.ndarray) -> np.ndarray:
    # integral from -1/2 to u of (t - round(t))^2 dt
    v = u + 0.5
    k = np.floor(v)
    f = v - k
    return k / 12.0 + ((f - 0.5) ** 3 + 0.125) / 3.0


def histogram_mse(stats: ActivationStats, r: float, bits: int) -> float:
    """Expected squared quantization error per element for clip range ``r``.

    Each histogram bin is treated as uniformly filled; rounding error is
    integrated in closed form below ``r`` and clipping error above it.
    """
    if stats.sample_count == 0:
        raise DataError("histogram_mse needs observed samples")
    spec = scale_from_range(r, bits)
    s, clip = spec.scale, spec.clip
    edges = stats.bin_edges
    counts = stats.histogram.astype(np.float64)
    nz = counts > 0
    a, b, c = edges[:-1][nz], edges[1:][nz], counts[nz]
    # the top occupied bin may extend past the true max
    b = np.minimum(b, max(stats.max_abs, 0.0))
    b = np.maximum(a, b)
    width = b - a
    lo = np.minimum(a, clip)
    hi = np.minimum(b, clip)
    rnd = s**3 * (_round_err_antiderivative(hi / s) - _round_err_antiderivative(lo / s))
    ca = np.maximum(a, clip) - clip
    cb = np.maximum(b, clip) - clip
    sat = (cb**3 - ca**3) / 3.0
    with np.errstate(divide="ignore", invalid="ignore"):
        per_bin = np.where(width > 0, (rnd + sat) / width, 0.0)
    # zero-width bins (all mass at a single value) use the point error
    point = width == 0
    if np.any(point):
        x = a[point]
        q = np.minimum(np.rint(x / s), spec.qmax) * s
        per_bin[point] = (x - q) ** 2
    return float((per_bin * c).sum() / stats.sample_count)


def omse_grid(stats: ActivationStats, grid_points: int = 128) -> np.ndarray:
    """Geometric grid of candidate ranges between the median and the max of ``|x|``."""
    hi = stats.max_abs
    lo = stats.percentile(0.5)
    lo = min(max(lo, hi * 2.0**-20), hi)
    return np.geomspace(lo, hi, grid_points)


def calibrate(stats: ActivationStats, method, bit_width: int) -> QuantSpec:
    if stats.sample_count == 0:
        raise DataError(f"no samples observed at site {stats.site_id!r}")
    if stats.max_abs == 0:
        raise DegenerateInputError(f"zero dynamic range at site {stats.site_id!r}")
    if isinstance(method, MinMax):
        r = stats.max_abs
    elif isinstance(method, EMA):
        r = stats.batch_maxes[0]
        for m in stats.batch_maxes[1:]:
            r = method.decay * m + (1.0 - method.decay) * r
    elif isinstance(method, Percentile):
        r = stats.percentile(method.p)
    elif isinstance(method, OMSE):
        grid = omse_grid(stats, method.grid_points)
        errs = [histogram_mse(stats, r, bit_width) for r in grid]
        r = float(grid[int(np.argmin(errs))])
    else:
        raise ConfigurationError(f"unknown calibration method {method!r}")
    if r <= 0:
        raise DegenerateInputError(f"calibrated range is zero at site {stats.site_id!r}")
    return scale_from_range(r, bit_width)


# model-level helpers


def collect_stats(model, batches) -> dict:
    """Run ``model`` over ``batches`` and observe every site; returns site id -> stats."""
    stats = {sid: ActivationStats(sid) for sid in model.site_ids}

    def hook(site, t):
        stats[site.site_id].observe(t)

    for xb in batches:
        model.forward(xb, hooks=(hook,))
    return stats


def calibrate_model(model, stats: dict, method, bits: int, weight_bits: int | None = None):
    """Quantized model with activation ranges from ``method`` and min-max weights."""
    acts = {sid: calibrate(stats[sid], method, bits) for sid in model.site_ids}
    weights = minmax_weight_specs(model, weight_bits or bits)
    return quantize_model(model, QuantConfig(weights, acts), stats)


def saturation_specs(stats: dict, threshold: float, bits: int) -> dict:
    """Activation specs clipping every site at the ``threshold`` percentile of ``|x|``."""
    return {sid: calibrate(s, Percentile(threshold), bits) for sid, s in stats.items()}


@dataclass
class SweepPoint:
    threshold: float
    accuracy: float
    decompositions: dict  # site id -> ErrorDecomposition

    @property
    def summary(self):
        from .analysis import summarize

        return summarize(self.decompositions.values())


def saturation_sweep(model, data, thresholds=DEFAULT_THRESHOLDS, bit_width: int = 7, *, stats=None,
                     batches: int = 10, batch_size: int = 100, kl: bool = False,
                     decompose_samples: int | None = None) -> list:
    """Accuracy and error split of the fake-quantized model at each saturation threshold.

    Weights use min-max ranges; every activation site is clipped at the
    threshold percentile of its pooled ``|x|`` histogram.  Returns one
    :class:`SweepPoint` per threshold; error splits use the first
    ``decompose_samples`` evaluation samples when given.
    """
    from .trainer import evaluate

    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ConfigurationError("saturation sweep needs at least one threshold")
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ConfigurationError("thresholds must be sorted ascending")
    if any(not 0.9 < t <= 1.0 for t in thresholds):
        raise ConfigurationError("thresholds must lie in (0.9, 1.0]")
    if len(data.eval_idx) == 0 or len(data.train_idx) == 0:
        raise DataError("saturation sweep needs non-empty data")
    if stats is None:
        stats = collect_stats(model, data.calibration_batches(batches, batch_size))
    weights = minmax_weight_specs(model, bit_width)
    points = []
    for t in thresholds:
        q = quantize_model(model, QuantConfig(weights, saturation_specs(stats, t, bit_width)), stats)
        res = evaluate(q, data, decompose=True, kl=kl, decompose_samples=decompose_samples)
        points.append(SweepPoint(t, res.accuracy, res.decompositions))
    return points
