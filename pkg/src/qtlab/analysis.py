"""Saturation / precision-loss split of quantization error, and KL precision loss.

For a spec with clip level ``c = qmax * scale`` every element is attributed
to exactly one bucket:

* ``|x| > c``: saturation error ``(|x| - c)**2`` (nothing else is counted);
* otherwise: precision error ``(x - fake_quant(x))**2``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DomainError, StateError
from .quantizer import QuantSpec, fake_quant, scale_from_range
from .tensor import Tensor

__all__ = [
    "ErrorDecomposition",
    "decompose",
    "kl_precision_loss",
    "summarize",
    "BlockRange",
    "SiteReport",
    "DynamicRangeReport",
    "dynamic_range_report",
    "write_site_csv",
    "SITE_CSV_COLUMNS",
    "KL_EPS",
    "DEFAULT_KL_BINS",
]

KL_EPS = 1e-10
DEFAULT_KL_BINS = 512
SITE_CSV_COLUMNS = ("site_id", "range_before", "range_after", "saturation_error", "precision_error", "precision_share", "kl")


@dataclass
class ErrorDecomposition:
    site_id: object
    saturation_error: float
    precision_error: float
    total_error: float
    precision_share: float
    kl_divergence: float
    range_before: float
    range_after: float

    def to_row(self) -> dict:
        return {
            "site_id": self.site_id,
            "range_before": self.range_before,
            "range_after": self.range_after,
            "saturation_error": self.saturation_error,
            "precision_error": self.precision_error,
            "precision_share": self.precision_share,
            "kl": self.kl_divergence,
        }


def _array(x) -> np.ndarray:
    return (x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)).reshape(-1)


def _share(precision: float, total: float) -> float:
    return precision / total if total > 0 else 0.0


def kl_precision_loss(x, spec: QuantSpec, bins: int = DEFAULT_KL_BINS) -> float:
    """KL(P || Q) between ``bins``-bin histograms of ``x`` and ``fake_quant(x)``.

    Both histograms span ``[-max|x|, max|x|]``; quantized values that round
    past the edge are counted in the edge bins.  Probabilities get ``1e-10``
    added before renormalising.  A constant tensor gives 0.
    """
    if bins < 16:
        raise DomainError(f"KL needs at least 16 bins, got {bins}")
    data = _array(x)
    if data.size == 0:
        raise DomainError("KL of an empty tensor")
    if np.all(data == data[0]):
        return 0.0
    return _kl(data, fake_quant(data, spec), float(np.max(np.abs(data))), bins)


def _hist(values: np.ndarray, lim: float, bins: int) -> np.ndarray:
    idx = np.floor((values + lim) * (bins / (2.0 * lim))).astype(np.int64)
    return np.bincount(np.clip(idx, 0, bins - 1), minlength=bins)


def _kl(data: np.ndarray, quant: np.ndarray, lim: float, bins: int) -> float:
    p = _hist(data, lim, bins) / data.size + KL_EPS
    q = _hist(quant, lim, bins) / data.size + KL_EPS
    p /= p.sum()
    q /= q.sum()
    return float(max(0.0, np.sum(p * np.log(p / q))))


def decompose(x, spec: QuantSpec, site_id=None, kl: bool = True, bins: int = DEFAULT_KL_BINS) -> ErrorDecomposition:
    data = _array(x)
    clip = spec.clip
    absx = np.abs(data)
    over = absx > clip
    quant = fake_quant(data, spec)
    sat_delta = absx[over] - clip
    saturation = float(np.dot(sat_delta, sat_delta))
    # inside the clip level fake_quant only rounds, so reuse the full result
    rdelta = (data - quant)[~over]
    precision = float(np.dot(rdelta, rdelta))
    total = saturation + precision
    range_before = float(absx.max()) if data.size else 0.0
    kl_value = 0.0
    if kl and data.size and range_before > 0 and not np.all(data == data[0]):
        kl_value = _kl(data, quant, range_before, bins)
    return ErrorDecomposition(
        site_id=site_id,
        saturation_error=saturation,
        precision_error=precision,
        total_error=total,
        precision_share=_share(precision, total),
        kl_divergence=kl_value,
        range_before=range_before,
        range_after=min(range_before, clip),
    )


def summarize(decomps: Iterable[ErrorDecomposition]) -> dict:
    """Model-level aggregate: error sums, pooled precision share and summed KL."""
    decomps = list(decomps)
    sat = sum(d.saturation_error for d in decomps)
    prec = sum(d.precision_error for d in decomps)
    total = sat + prec
    return {
        "sites": len(decomps),
        "saturation_error": sat,
        "precision_error": prec,
        "total_error": total,
        "precision_share": _share(prec, total),
        "kl": sum(d.kl_divergence for d in decomps),
    }


@dataclass
class SiteReport:
    site_id: str
    block_index: int
    saturated: ErrorDecomposition  # spec clipped at the threshold percentile
    full: ErrorDecomposition  # spec covering the full observed range


@dataclass
class BlockRange:
    block_index: int
    range_before: float
    range_after: float
    kl: float


@dataclass
class DynamicRangeReport:
    threshold: float
    bits: int
    blocks: list
    sites: list

    def to_json(self) -> dict:
        return {
            "threshold": self.threshold,
            "bits": self.bits,
            "blocks": [asdict(b) for b in self.blocks],
        }


def dynamic_range_report(qmodel, data, threshold: float = 0.9999, bits: int = 8,
                         samples: int = 200, bins: int = DEFAULT_KL_BINS) -> DynamicRangeReport:
    """Per-block dynamic ranges before/after saturation and the summed KL precision loss.

    ``qmodel`` must carry calibration statistics (see
    :func:`qtlab.calibration.calibrate_model`).  Ranges come from those
    statistics: ``range_before`` is the largest site max in the block and
    ``range_after`` the largest ``threshold``-percentile.  KL and error splits
    are measured on the full-precision activations of the first ``samples``
    evaluation samples.
    """
    stats = getattr(qmodel, "stats", None)
    if not stats:
        raise StateError("dynamic range report needs a calibrated model")
    fp = getattr(qmodel, "fp_model", qmodel)
    captured = {}

    def hook(site, t):
        captured[site.site_id] = t.data

    fp.forward(data.x_eval[:samples], hooks=(hook,))
    site_reports = []
    for site in fp.sites:
        st = stats[site.site_id]
        if st.max_abs == 0:
            continue
        x = captured[site.site_id]
        sat_spec = scale_from_range(st.percentile(threshold), bits)
        full_spec = scale_from_range(st.max_abs, bits)
        saturated = decompose(x, sat_spec, site.site_id, bins=bins)
        full = decompose(x, full_spec, site.site_id, bins=bins)
        saturated.range_before = full.range_before = st.max_abs
        saturated.range_after = min(st.max_abs, sat_spec.clip)
        full.range_after = st.max_abs
        site_reports.append(SiteReport(site.site_id, site.block_index, saturated, full))
    blocks = []
    for b in range(fp.config.depth):
        rows = [r for r in site_reports if r.block_index == b]
        if not rows:
            continue
        blocks.append(BlockRange(
            block_index=b,
            range_before=max(r.saturated.range_before for r in rows),
            range_after=max(r.saturated.range_after for r in rows),
            kl=sum(r.saturated.kl_divergence for r in rows),
        ))
    return DynamicRangeReport(threshold, bits, blocks, site_reports)


def write_site_csv(path, decomps: Iterable[ErrorDecomposition]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SITE_CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for d in decomps:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in d.to_row().items()})
    return path


def write_summary_json(path, decomps: Iterable[ErrorDecomposition], **extra) -> Path:
    path = Path(path)
    path.write_text(json.dumps({**summarize(decomps), **extra}, indent=2, sort_keys=True) + "\n")
    return path
